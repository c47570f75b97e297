"""Tables and plots from adaptation event logs.

A "run directory" is what the adapt command writes: manifest.json,
events_seed<S>.jsonl and summary.json. Reporting pools one or more run
directories into a per-class mean/std CSV and a small set of diagnostic
plots.
"""

from __future__ import annotations

import csv
import json
import os
from glob import glob

import numpy as np

import matplotlib
matplotlib.use("Agg")
import matplotlib.pyplot as plt

from .adaptation import mean_foreground_dsc, read_event_log


class ReportError(ValueError):
    pass


def load_run_dir(path: str) -> dict:
    """Read manifest + per-seed event logs of one run directory."""
    manifest_path = os.path.join(path, "manifest.json")
    if not os.path.exists(manifest_path):
        raise ReportError(f"no manifest.json under {path}")
    with open(manifest_path) as f:
        manifest = json.load(f)
    logs = {}
    warnings = 0
    for log_path in sorted(glob(os.path.join(path, "events_seed*.jsonl"))):
        seed = os.path.basename(log_path)[len("events_seed"):-len(".jsonl")]
        events, skipped = read_event_log(log_path)
        warnings += skipped
        logs[seed] = events
    if not logs:
        raise ReportError(f"no event logs under {path}")
    return {"name": os.path.basename(os.path.normpath(path)),
            "manifest": manifest, "logs": logs, "skipped_lines": warnings}


def _per_class_means(events: list[dict]) -> dict[int, float]:
    acc: dict[int, list[float]] = {}
    for ev in events:
        pc = ev.get("per_class_dsc")
        if not pc:
            continue
        for c, v in pc.items():
            acc.setdefault(int(c), []).append(float(v))
    return {c: 100.0 * float(np.mean(v)) for c, v in acc.items()}


def write_summary_csv(runs: list[dict], out_path: str) -> int:
    """One row per (configuration, class): mean +/- std DSC across seeds."""
    rows = []
    for run in runs:
        per_seed = {seed: _per_class_means(events)
                    for seed, events in run["logs"].items()}
        classes = sorted({c for d in per_seed.values() for c in d})
        for c in classes:
            vals = [d[c] for d in per_seed.values() if c in d]
            rows.append({
                "configuration": run["name"],
                "class": c,
                "mean_dsc": round(float(np.mean(vals)), 4),
                "std_dsc": round(float(np.std(vals)), 4),
                "n_seeds": len(vals),
            })
    with open(out_path, "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=["configuration", "class",
                                               "mean_dsc", "std_dsc", "n_seeds"])
        writer.writeheader()
        writer.writerows(rows)
    return len(rows)


def _run_mean_dsc(run: dict) -> float:
    vals = []
    for events in run["logs"].values():
        per_batch = []
        for ev in events:
            pc = ev.get("per_class_dsc")
            if pc:
                per_batch.append(mean_foreground_dsc({int(c): v for c, v in pc.items()}))
        if per_batch:
            vals.append(100.0 * float(np.mean(per_batch)))
    return float(np.mean(vals)) if vals else float("nan")


def plot_budget_curve(runs: list[dict], out_path: str) -> bool:
    """Mean DSC against the annotation budget b (runs grouped by b)."""
    points = []
    for run in runs:
        b = run["manifest"].get("config", {}).get("adaptation", {}).get("b")
        if b is None:
            continue
        points.append((float(b), _run_mean_dsc(run)))
    if len(points) < 2:
        return False
    points.sort()
    xs, ys = zip(*points)
    fig, ax = plt.subplots(figsize=(5, 3.5))
    ax.plot(xs, ys, marker="o")
    ax.set_xlabel("annotation budget b (% pixels per image)")
    ax.set_ylabel("mean DSC")
    ax.set_title("DSC vs annotation budget")
    fig.tight_layout()
    fig.savefig(out_path, dpi=120)
    plt.close(fig)
    return True


def plot_timeline(runs: list[dict], out_path: str) -> None:
    """Per-batch mean foreground DSC for each configuration (first seed)."""
    fig, ax = plt.subplots(figsize=(6, 3.5))
    for run in runs:
        seed = sorted(run["logs"])[0]
        series = []
        for ev in run["logs"][seed]:
            pc = ev.get("per_class_dsc")
            if pc:
                series.append(100.0 * mean_foreground_dsc(
                    {int(c): v for c, v in pc.items()}))
        ax.plot(range(1, len(series) + 1), series, label=run["name"])
    ax.set_xlabel("batch")
    ax.set_ylabel("mean DSC (pre-update)")
    ax.legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(out_path, dpi=120)
    plt.close(fig)


def plot_divergence_histogram(runs: list[dict], out_path: str) -> None:
    selected, rejected = [], []
    for run in runs:
        for events in run["logs"].values():
            for ev in events:
                for d in ev.get("divergences") or []:
                    (selected if d["selected"] else rejected).append(d["score"])
    fig, ax = plt.subplots(figsize=(5, 3.5))
    if selected or rejected:
        bins = np.histogram_bin_edges(np.array(selected + rejected), bins=30)
        if rejected:
            ax.hist(rejected, bins=bins, alpha=0.6, label="pruned away")
        if selected:
            ax.hist(selected, bins=bins, alpha=0.6, label="selected")
        ax.legend(fontsize=8)
    ax.set_xlabel("batch-norm statistic divergence")
    ax.set_ylabel("images")
    fig.tight_layout()
    fig.savefig(out_path, dpi=120)
    plt.close(fig)


def generate_report(run_dirs: list[str], output_dir: str) -> dict:
    """CSV + plots for a set of run directories."""
    if not run_dirs:
        raise ReportError("no event logs given")
    runs = [load_run_dir(p) for p in run_dirs]
    os.makedirs(output_dir, exist_ok=True)
    n_rows = write_summary_csv(runs, os.path.join(output_dir, "summary.csv"))
    outputs = {"summary_csv": "summary.csv", "rows": n_rows,
               "skipped_lines": sum(r["skipped_lines"] for r in runs)}
    if plot_budget_curve(runs, os.path.join(output_dir, "dsc_vs_budget.png")):
        outputs["budget_curve"] = "dsc_vs_budget.png"
    plot_timeline(runs, os.path.join(output_dir, "timeline.png"))
    outputs["timeline"] = "timeline.png"
    plot_divergence_histogram(runs, os.path.join(output_dir, "divergences.png"))
    outputs["divergence_histogram"] = "divergences.png"
    return outputs
