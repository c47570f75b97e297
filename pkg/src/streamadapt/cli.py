"""Command-line experiment driver.

Subcommands: pretrain, gen-data, adapt, report, serve. Every run writes a
manifest (resolved config + code version + seeds) next to its outputs.
Exit codes: 0 success, 1 internal error, 2 bad input or config.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import asdict

from . import __version__
from .adaptation import AdaptationConfig, write_event_log
from .data import (
    GeneratorConfig,
    ShiftSpec,
    apply_shift,
    generate_synthetic_volume,
    save_volume,
)
from .experiment import (
    ARMS,
    resolve_stream_from_spec,
    run_arm,
    summarize_runs,
    write_manifest,
)
from .model import (
    ArchConfig,
    PretrainConfig,
    build_model,
    load_checkpoint,
    pretrain_source,
    save_checkpoint,
)

OUTPUT_ROOT_ENV = "STREAMADAPT_OUTPUT_ROOT"


class InputError(Exception):
    """Bad input or configuration; maps to exit code 2."""


def _resolve_output(path: str) -> str:
    root = os.environ.get(OUTPUT_ROOT_ENV)
    if root and not os.path.isabs(path):
        return os.path.join(root, path)
    return path


def _load_config(path: str | None) -> dict:
    if path is None:
        return {}
    if not os.path.exists(path):
        raise InputError(f"config file not found: {path}")
    try:
        with open(path) as f:
            return json.load(f)
    except json.JSONDecodeError as e:
        raise InputError(f"malformed config {path}: {e}") from e


def _require(cfg: dict, key: str, what: str) -> object:
    if key not in cfg:
        raise InputError(f"{what} requires config key {key!r}")
    return cfg[key]


# -- pretrain -------------------------------------------------------------------


def cmd_pretrain(args) -> int:
    cfg = _load_config(args.config)
    arch = ArchConfig(**cfg.get("arch", {}))
    pre = PretrainConfig(**cfg.get("pretrain", {}))
    if args.epochs is not None:
        pre.epochs = args.epochs
    if args.seed is not None:
        pre.seed = args.seed
    out = _resolve_output(args.output or cfg.get("output_dir", "pretrain_out"))

    if "paths" in cfg:
        for p in cfg["paths"]:
            if not os.path.exists(p):
                raise InputError(f"dataset path not found: {p}")
        from .data import load_volume
        volumes = [load_volume(p) for p in cfg["paths"]]
        dataset_desc = {"paths": cfg["paths"]}
    else:
        gen = GeneratorConfig(**cfg.get("generator", {}))
        n_volumes = int(cfg.get("n_volumes", 8))
        seed_base = int(cfg.get("volume_seed_base", 1000))
        volumes = [generate_synthetic_volume(gen, seed_base + i)
                   for i in range(n_volumes)]
        dataset_desc = {"generator": asdict(gen), "n_volumes": n_volumes}
    model = build_model(arch, seed=int(cfg.get("model_seed", 0)))
    log = pretrain_source(model, volumes, pre)

    os.makedirs(out, exist_ok=True)
    save_checkpoint(model, out)
    report = {
        "source_dsc_per_class": {str(c): v for c, v in log.val_dsc_per_class.items()},
        "mean_source_dsc": log.mean_val_dsc,
        "converged": log.converged,
        "epoch_losses": log.epoch_losses,
    }
    with open(os.path.join(out, "report.json"), "w") as f:
        json.dump(report, f, indent=2, sort_keys=True)
    write_manifest(out, {**dataset_desc, "arch": asdict(arch),
                         "pretrain": asdict(pre)},
                   seeds=[pre.seed], extra={"command": "pretrain"})
    print(f"checkpoint written to {out} (mean source DSC "
          f"{log.mean_val_dsc:.4f}, converged={log.converged})")
    if not log.converged:
        print("warning: pretraining did not reach the DSC threshold", file=sys.stderr)
    return 0


# -- gen-data -------------------------------------------------------------------


def cmd_gen_data(args) -> int:
    cfg = _load_config(args.config)
    gen = GeneratorConfig(**cfg.get("generator", {}))
    shift = ShiftSpec(**cfg.get("shift", {})) if "shift" in cfg else None
    n = args.n_volumes or int(cfg.get("n_volumes", 4))
    seed_base = int(cfg.get("volume_seed_base", 0))
    out = _resolve_output(args.output or cfg.get("output_dir", "volumes"))
    os.makedirs(out, exist_ok=True)
    paths = []
    for i in range(n):
        vol = generate_synthetic_volume(gen, seed_base + i)
        if shift is not None:
            from dataclasses import replace
            vol = apply_shift(vol, replace(shift, seed=seed_base + i + 7))
        vpath = os.path.join(out, vol.patient_id)
        save_volume(vol, vpath)
        paths.append(vpath)
    write_manifest(out, {"generator": asdict(gen),
                         "shift": asdict(shift) if shift else None,
                         "n_volumes": n, "volume_seed_base": seed_base},
                   seeds=list(range(seed_base, seed_base + n)),
                   extra={"command": "gen-data", "volumes": paths})
    print(f"wrote {n} volumes under {out}")
    return 0


# -- adapt ----------------------------------------------------------------------


_ADAPT_OVERRIDES = ("K", "b", "mode", "patch_side", "lr", "metric",
                    "kl_direction", "strategy", "pruning", "decay", "cycles")


def cmd_adapt(args) -> int:
    cfg = _load_config(args.config)
    ckpt = args.checkpoint or cfg.get("checkpoint")
    if not ckpt:
        raise InputError("adapt requires a checkpoint (--checkpoint or config key)")
    if not os.path.exists(os.path.join(ckpt, "model.pt")):
        raise InputError(f"checkpoint not found: {ckpt}")
    dataset = _require(cfg, "dataset", "adapt") if args.dataset is None \
        else _load_config(args.dataset)
    if "paths" in dataset:
        for p in dataset["paths"]:
            if not os.path.exists(p):
                raise InputError(f"volume path not found: {p}")

    adapt_dict = dict(cfg.get("adaptation", {}))
    for key in _ADAPT_OVERRIDES:
        val = getattr(args, key, None)
        if val is not None:
            adapt_dict[key] = val
    if args.lam is not None:
        adapt_dict["lambda"] = args.lam

    seeds = args.seeds or cfg.get("seeds", [0, 1, 2, 3, 4])
    arm = args.arm or cfg.get("arm", "odes")
    if arm not in ARMS:
        raise InputError(f"unknown arm {arm!r}; choose from {ARMS}")
    out = _resolve_output(args.output or cfg.get("output_dir", "adapt_out"))
    os.makedirs(out, exist_ok=True)

    try:
        model, sidecar = load_checkpoint(ckpt)
    except (ValueError, KeyError, RuntimeError) as e:
        raise InputError(f"cannot load checkpoint {ckpt}: {e}") from e

    per_seed_events = {}
    for seed in seeds:
        run_cfg = AdaptationConfig.from_dict({**adapt_dict, "seed": int(seed)})
        stream = resolve_stream_from_spec(dataset, int(seed))
        events = run_arm(model, stream, run_cfg, arm=arm)
        write_event_log(events, os.path.join(out, f"events_seed{seed}.jsonl"),
                        os.path.join(out, f"timings_seed{seed}.jsonl"))
        per_seed_events[seed] = events

    summary = summarize_runs(per_seed_events, model.config.class_count)
    with open(os.path.join(out, "summary.json"), "w") as f:
        json.dump(summary, f, indent=2, sort_keys=True)
    resolved = {"checkpoint": ckpt, "dataset": dataset, "arm": arm,
                "adaptation": AdaptationConfig.from_dict(adapt_dict).to_dict()}
    write_manifest(out, resolved, seeds=[int(s) for s in seeds],
                   extra={"command": "adapt", "checkpoint_sidecar": sidecar})
    print(f"{arm}: mean DSC {summary['mean_dsc']:.2f} "
          f"+/- {summary['std_dsc']:.2f} over {len(seeds)} seeds -> {out}")
    return 0


# -- report ---------------------------------------------------------------------


def cmd_report(args) -> int:
    from .report import ReportError, generate_report
    out = _resolve_output(args.output)
    try:
        result = generate_report(args.runs, out)
    except ReportError as e:
        raise InputError(str(e)) from e
    print(f"report written to {out}: {result['rows']} summary rows"
          + (f", {result['skipped_lines']} malformed lines skipped"
             if result.get("skipped_lines") else ""))
    return 0


# -- serve ----------------------------------------------------------------------


def cmd_serve(args) -> int:
    import uvicorn

    from .service import create_app

    cfg = _load_config(args.config)
    app = create_app(default_config=cfg)
    uvicorn.run(app, host=args.host, port=args.port, log_level="warning")
    return 0


# -- parser ---------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="streamadapt",
        description="Expert-guided online adaptation for streaming segmentation")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("pretrain", help="train a source model on synthetic volumes")
    p.add_argument("--config", help="JSON config file")
    p.add_argument("--output", help="checkpoint output directory")
    p.add_argument("--epochs", type=int)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("gen-data", help="generate synthetic volumes on disk")
    p.add_argument("--config", help="JSON config file")
    p.add_argument("--output", help="output directory")
    p.add_argument("--n-volumes", dest="n_volumes", type=int)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("adapt", help="run the streaming adaptation headlessly")
    p.add_argument("--config", help="JSON config file")
    p.add_argument("--checkpoint", help="checkpoint directory")
    p.add_argument("--dataset", help="JSON dataset spec file (overrides config)")
    p.add_argument("--output", help="run output directory")
    p.add_argument("--arm", choices=ARMS)
    p.add_argument("--seeds", type=lambda s: [int(x) for x in s.split(",")],
                   help="comma-separated seed list")
    p.add_argument("--K", type=float)
    p.add_argument("--b", type=float)
    p.add_argument("--mode", choices=["pixel", "patch"])
    p.add_argument("--patch-side", dest="patch_side", type=int)
    p.add_argument("--lambda", dest="lam", type=float)
    p.add_argument("--lr", type=float)
    p.add_argument("--metric", choices=["kl", "l1", "l2"])
    p.add_argument("--kl-direction", dest="kl_direction",
                   choices=["source_target", "target_source"])
    p.add_argument("--strategy", choices=["ripu", "ent", "sconf", "random"])
    p.add_argument("--pruning", choices=["proposed", "random"])
    p.add_argument("--decay", choices=["constant", "exp_decay"])
    p.add_argument("--cycles", type=int)
    p.set_defaults(func=cmd_adapt)

    p = sub.add_parser("report", help="tables and plots from run directories")
    p.add_argument("--runs", nargs="+", required=True, help="run directories")
    p.add_argument("--output", required=True)
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("serve", help="start the expert annotation service")
    p.add_argument("--config", help="JSON config file with session defaults")
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8008)
    p.set_defaults(func=cmd_serve)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except InputError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except Exception as e:  # noqa: BLE001 - CLI boundary
        print(f"internal error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
