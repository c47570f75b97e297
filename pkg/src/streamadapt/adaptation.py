"""Per-batch model update from expert-annotated pixels plus slice continuity.

One stream step is: infer pseudo-labels, prune the batch to its most shifted
images, score and select annotation queries, obtain labels (oracle or human),
then take exactly one optimizer step on the BN scale/shift parameters using
a supervised cross-entropy over the annotated pixels plus a weighted
inter-slice continuity term. All the bookkeeping lands in one
:class:`AdaptationEvent` per batch, serialized as a JSON line.

:class:`StreamSession` holds the state of a live stream (optimizer moments
persist across batches); the headless runner and the annotation service both
drive it, which is what makes their event logs comparable.
"""

from __future__ import annotations

import hashlib
import json
import time
from dataclasses import dataclass, field, asdict

import numpy as np
import torch
import torch.nn.functional as F

from .acquisition import (
    AnnotationRecord,
    QuerySet,
    acquisition_score,
    baseline_score,
    entropy_map,
    impurity_map,
    oracle_annotate,
    select_patches,
    select_pixels,
    uncertainty_map,
)
from .data import StreamBatch
from .model import SegmentationNet, infer, normalize
from .pruning import (
    AugmentSpec,
    DivergenceScore,
    PruneConfig,
    batch_divergences,
    decay_schedule,
    random_prune,
    select_top_k,
)


@dataclass
class AdaptationConfig:
    """Everything one stream run needs. ``K=0`` disables active learning."""

    K: float = 100.0
    b: float = 1.0
    mode: str = "pixel"                 # pixel | patch
    patch_side: int = 5
    lam: float = 0.1
    lr: float = 0.01
    metric: str = "kl"                  # kl | l1 | l2
    kl_direction: str = "source_target"  # ablation: or "target_source"
    strategy: str = "ripu"              # ripu | ent | sconf | random
    pruning: str = "proposed"           # proposed | random
    decay: str = "constant"             # constant | exp_decay
    seed: int = 0
    cycles: int = 1
    min_selected: int = 1
    continuity_target: str = "hard"     # hard | soft
    bn_mode: str = "batch"              # normalization during adaptation passes
    objective: str = "acquired"         # acquired | entmin
    log_post_dsc: bool = True
    augmentation: AugmentSpec = field(default_factory=AugmentSpec)

    def __post_init__(self):
        if not 0.0 <= self.K <= 100.0:
            raise ValueError("K must be in [0, 100]")
        if not 0.0 < self.b <= 100.0:
            raise ValueError("b must be in (0, 100]")
        if self.mode not in ("pixel", "patch"):
            raise ValueError("mode must be 'pixel' or 'patch'")
        if self.cycles < 1:
            raise ValueError("cycles must be >= 1")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["lambda"] = d.pop("lam")
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "AdaptationConfig":
        d = dict(d)
        if "lambda" in d:
            d["lam"] = d.pop("lambda")
        if isinstance(d.get("augmentation"), dict):
            d["augmentation"] = AugmentSpec(**d["augmentation"])
        return cls(**d)


@dataclass
class LossBreakdown:
    sup_loss: float | None
    cont_loss: float
    total: float
    lam: float
    annotated_pixel_count: int

    def to_dict(self) -> dict:
        return {
            "sup_loss": self.sup_loss,
            "cont_loss": self.cont_loss,
            "total": self.total,
            "lambda": self.lam,
            "annotated_pixel_count": self.annotated_pixel_count,
        }


@dataclass
class AdaptationEvent:
    batch_id: int
    cycle: int
    batch_index: int
    K_effective: float
    metric: str
    strategy: str
    mode: str
    selected_indices: list[int]
    queries: list[QuerySet]
    losses: LossBreakdown
    divergences: list[dict] | None = None
    per_class_dsc: dict[int, float] | None = None
    per_class_dsc_post: dict[int, float] | None = None
    optimizer_stepped: bool = True
    wall_times: dict[str, float] = field(default_factory=dict)

    def to_dict(self, include_wall_times: bool = False) -> dict:
        d = {
            "batch_id": self.batch_id,
            "cycle": self.cycle,
            "batch_index": self.batch_index,
            "K_effective": float(self.K_effective),
            "metric": self.metric,
            "strategy": self.strategy,
            "mode": self.mode,
            "selected_indices": [int(i) for i in self.selected_indices],
            "queries": [q.to_dict() for q in self.queries],
            "losses": self.losses.to_dict(),
            "divergences": self.divergences,
            "per_class_dsc": (None if self.per_class_dsc is None else
                              {str(c): float(v) for c, v in self.per_class_dsc.items()}),
            "per_class_dsc_post": (None if self.per_class_dsc_post is None else
                                   {str(c): float(v) for c, v in self.per_class_dsc_post.items()}),
            "optimizer_stepped": self.optimizer_stepped,
        }
        if include_wall_times:
            d["wall_times"] = self.wall_times
        return d

    def to_json_line(self) -> str:
        # canonical form: volatile wall times stay out so fixed-seed runs are
        # byte-identical
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))


# -- loss functions (reference numpy forms) -----------------------------------


def supervised_loss(probs: list[np.ndarray],
                    annotations: list[AnnotationRecord]) -> float:
    """Mean negative log-probability of the expert label over all annotated
    pixels of the batch (every pixel weighted equally)."""
    total = 0.0
    count = 0
    for rec in annotations:
        pm = probs[rec.image_index]
        for x, y, c in rec.entries:
            total += -float(np.log(pm[c, y, x]))
            count += 1
    if count == 0:
        raise ValueError("no annotated pixels: skip the supervised term instead")
    return total / count


def continuity_loss(probs: list[np.ndarray],
                    patient_ids: list[str] | None = None,
                    target: str = "hard") -> float:
    """Sum over adjacent slice pairs of the cross-entropy of slice j against
    slice j+1's (detached) pseudo-label, pixel-averaged per pair.

    Pairs spanning two patients are skipped.
    """
    if len(probs) < 2:
        return 0.0
    total = 0.0
    for j in range(len(probs) - 1):
        if patient_ids is not None and patient_ids[j] != patient_ids[j + 1]:
            continue
        pj = probs[j].astype(np.float64)
        pn = probs[j + 1].astype(np.float64)
        if target == "hard":
            tgt = pn.argmax(axis=0)
            picked = np.take_along_axis(pj, tgt[None], axis=0)[0]
            total += float(-np.log(picked).mean())
        elif target == "soft":
            logs = np.log(np.maximum(pj, 1e-300))
            total += float(-(np.where(pn > 0, pn * logs, 0.0)).sum(axis=0).mean())
        else:
            raise ValueError(f"unknown continuity target {target!r}")
    return total


def total_loss(sup: float | None, cont: float, lam: float = 0.1) -> float:
    return (0.0 if sup is None else sup) + lam * cont


def dsc(pred: np.ndarray, truth: np.ndarray, class_id: int) -> float:
    """Per-class Dice; both masks empty -> 1.0, exactly one empty -> 0.0."""
    if pred.shape != truth.shape:
        raise ValueError("shape mismatch")
    p = pred == class_id
    t = truth == class_id
    denom = int(p.sum()) + int(t.sum())
    if denom == 0:
        return 1.0
    return 2.0 * int(np.logical_and(p, t).sum()) / denom


def per_class_dsc(preds: list[np.ndarray], truths: list[np.ndarray],
                  class_count: int) -> dict[int, float]:
    """Per-class Dice with counts pooled across the batch's slices."""
    inter = np.zeros(class_count)
    sizes = np.zeros(class_count)
    for pred, truth in zip(preds, truths):
        for c in range(class_count):
            p = pred == c
            t = truth == c
            inter[c] += np.logical_and(p, t).sum()
            sizes[c] += p.sum() + t.sum()
    return {c: (1.0 if sizes[c] == 0 else float(2.0 * inter[c] / sizes[c]))
            for c in range(class_count)}


def mean_foreground_dsc(per_class: dict[int, float]) -> float:
    vals = [v for c, v in per_class.items() if c != 0]
    return float(np.mean(vals)) if vals else 0.0


# -- one stream step ----------------------------------------------------------


def derive_seed(*parts) -> int:
    h = hashlib.sha256(repr(parts).encode())
    return int.from_bytes(h.digest()[:8], "little")


@dataclass
class BatchProposal:
    """Inference + pruning + query selection for one batch, pre-update."""

    batch: StreamBatch
    batch_index: int
    cycle: int
    K_effective: float
    probs: list[np.ndarray]
    pseudo: list[np.ndarray]
    selected: list[int]
    querysets: list[QuerySet]
    divergences: list[DivergenceScore] | None
    per_class_dsc: dict[int, float] | None
    wall_times: dict[str, float] = field(default_factory=dict)

    def queryset_for(self, image_index: int) -> QuerySet | None:
        for qs in self.querysets:
            if qs.image_index == image_index:
                return qs
        return None


def _image_score(config: AdaptationConfig, probs: np.ndarray, pseudo: np.ndarray,
                 seed: int) -> np.ndarray:
    if config.strategy == "ripu":
        unc = uncertainty_map(entropy_map(probs), config.mode, config.patch_side)
        imp = impurity_map(pseudo, config.patch_side)
        return acquisition_score(unc, imp)
    return baseline_score(probs, config.strategy, seed=seed)


def propose_batch(model: SegmentationNet, batch: StreamBatch,
                  config: AdaptationConfig, batch_index: int = 0,
                  total_batches: int | None = None,
                  cycle: int = 1) -> BatchProposal:
    """Phases 1-3 of a stream step: infer, prune, select queries."""
    wall: dict[str, float] = {}

    t0 = time.perf_counter()
    probs = infer(model, batch.slices, bn_mode=config.bn_mode)
    pseudo = [p.argmax(axis=0) for p in probs]
    pre_dsc = None
    if batch.truth is not None:
        pre_dsc = per_class_dsc(pseudo, batch.truth, model.config.class_count)
    wall["infer"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    if config.K > 0:
        k_eff = decay_schedule(config.K, batch_index, total_batches, config.decay)
    else:
        k_eff = 0.0
    divergences = None
    selected: list[int] = []
    if k_eff > 0:
        if config.pruning == "proposed":
            prune_cfg = PruneConfig(K=k_eff, metric=config.metric,
                                    augmentation=config.augmentation,
                                    min_selected=config.min_selected,
                                    kl_direction=config.kl_direction)
            divergences = batch_divergences(model, batch.slices, prune_cfg, config.seed)
            selected = select_top_k([d.score for d in divergences], k_eff,
                                    config.min_selected)
        elif config.pruning == "random":
            selected = random_prune(len(batch.slices), k_eff,
                                    seed=derive_seed(config.seed, batch.batch_id),
                                    min_selected=config.min_selected)
        else:
            raise ValueError(f"unknown pruning mode {config.pruning!r}")
    wall["prune"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    querysets = []
    for i in selected:
        score = _image_score(config, probs[i], pseudo[i],
                             seed=derive_seed(config.seed, batch.batch_id, i))
        if config.mode == "pixel":
            querysets.append(select_pixels(score, config.b, image_index=i))
        else:
            querysets.append(select_patches(score, config.b, config.patch_side,
                                            image_index=i))
    wall["acquire"] = time.perf_counter() - t0

    return BatchProposal(batch=batch, batch_index=batch_index, cycle=cycle,
                         K_effective=k_eff, probs=probs, pseudo=pseudo,
                         selected=selected, querysets=querysets,
                         divergences=divergences, per_class_dsc=pre_dsc,
                         wall_times=wall)


def _torch_sup_loss(logp: torch.Tensor,
                    annotations: list[AnnotationRecord]) -> tuple[torch.Tensor | None, int]:
    idx_i, idx_c, idx_y, idx_x = [], [], [], []
    for rec in annotations:
        for x, y, c in rec.entries:
            idx_i.append(rec.image_index)
            idx_c.append(c)
            idx_y.append(y)
            idx_x.append(x)
    if not idx_i:
        return None, 0
    picked = logp[idx_i, idx_c, idx_y, idx_x]
    return -picked.mean(), len(idx_i)


def _torch_cont_loss(logp: torch.Tensor, probs_next: list[np.ndarray],
                     target: str) -> torch.Tensor | float:
    n = logp.shape[0]
    if n < 2:
        return 0.0
    total = None
    for j in range(n - 1):
        if target == "hard":
            tgt = torch.from_numpy(probs_next[j + 1].argmax(axis=0)).long()
            term = -logp[j].gather(0, tgt[None])[0].mean()
        else:
            soft = torch.from_numpy(probs_next[j + 1].astype(np.float32))
            term = -(soft * logp[j]).sum(dim=0).mean()
        total = term if total is None else total + term
    return total


def update_from_proposal(model: SegmentationNet, proposal: BatchProposal,
                         annotations: dict[int, AnnotationRecord | None],
                         optimizer: torch.optim.Optimizer,
                         config: AdaptationConfig,
                         annotate_seconds: float = 0.0) -> AdaptationEvent:
    """Phase 5: one loss forward, one backward, one BN-only optimizer step."""
    wall = dict(proposal.wall_times)
    wall["annotate"] = annotate_seconds
    t0 = time.perf_counter()

    batch = proposal.batch
    records = [annotations[i] for i in proposal.selected
               if annotations.get(i) is not None]

    x = torch.from_numpy(
        np.stack([s.pixels for s in batch.slices]).astype(np.float32))[:, None]
    prev_mode = model.bn_mode
    model.set_bn_mode(config.bn_mode)
    try:
        logits = model(x)
        logp = F.log_softmax(logits, dim=1)
        if config.objective == "entmin":
            probs_t = logp.exp()
            loss = -(probs_t * logp).sum(dim=1).mean()
            sup_t, n_annot = None, 0
            cont_t = 0.0
        else:
            sup_t, n_annot = _torch_sup_loss(logp, records)
            cont_t = _torch_cont_loss(logp, proposal.probs, config.continuity_target)
            loss = (0.0 if sup_t is None else sup_t)
            loss = loss + config.lam * cont_t

        stepped = False
        if isinstance(loss, torch.Tensor) and loss.requires_grad:
            model.zero_grad(set_to_none=True)
            loss.backward()
            optimizer.step()
            stepped = True
    finally:
        model.set_bn_mode(prev_mode)

    sup_val = None if sup_t is None else float(sup_t.item())
    cont_val = float(cont_t.item()) if isinstance(cont_t, torch.Tensor) else float(cont_t)
    if config.objective == "entmin":
        total_val = float(loss.item()) if isinstance(loss, torch.Tensor) else float(loss)
        breakdown = LossBreakdown(None, cont_val, total_val, config.lam, 0)
    else:
        breakdown = LossBreakdown(
            sup_val, cont_val, total_loss(sup_val, cont_val, config.lam),
            config.lam, n_annot)
    wall["update"] = time.perf_counter() - t0

    post_dsc = None
    if config.log_post_dsc and batch.truth is not None:
        t0 = time.perf_counter()
        post_probs = infer(model, batch.slices, bn_mode=config.bn_mode)
        post_dsc = per_class_dsc([p.argmax(axis=0) for p in post_probs],
                                 batch.truth, model.config.class_count)
        wall["post_eval"] = time.perf_counter() - t0

    divergences = None
    if proposal.divergences is not None:
        divergences = [{"index": d.image_index, "score": float(d.score),
                        "selected": d.image_index in proposal.selected}
                       for d in proposal.divergences]

    return AdaptationEvent(
        batch_id=batch.batch_id, cycle=proposal.cycle,
        batch_index=proposal.batch_index, K_effective=proposal.K_effective,
        metric=config.metric, strategy=config.strategy, mode=config.mode,
        selected_indices=list(proposal.selected),
        queries=list(proposal.querysets), losses=breakdown,
        divergences=divergences, per_class_dsc=proposal.per_class_dsc,
        per_class_dsc_post=post_dsc, optimizer_stepped=stepped,
        wall_times=wall)


def oracle_annotator(proposal: BatchProposal, image_index: int,
                     queryset: QuerySet) -> AnnotationRecord | None:
    """Answer queries from the batch's ground truth (headless runs)."""
    if proposal.batch.truth is None:
        return None
    return oracle_annotate(queryset, proposal.batch.truth[image_index])


class StreamSession:
    """Stateful single-writer adaptation loop over an ordered batch stream.

    Adam moments persist across batches; ``next_proposal`` / ``submit``
    alternate strictly, which serializes updates by construction.
    """

    def __init__(self, model: SegmentationNet, stream: list[StreamBatch],
                 config: AdaptationConfig, normalize_inputs: bool = True):
        self.model = model
        self.config = config
        self.stream = stream
        self.total_batches = len(stream)
        self.optimizer = torch.optim.Adam(model.bn_parameters(), lr=config.lr)
        self.cycle = 1
        self.cursor = 0
        self.steps_taken = 0
        self.events: list[AdaptationEvent] = []
        self._normalize = normalize_inputs
        self._pending: BatchProposal | None = None

    def finished(self) -> bool:
        return (self._pending is None and self.cursor >= len(self.stream)
                and self.cycle >= self.config.cycles)

    def next_proposal(self) -> BatchProposal | None:
        if self._pending is not None:
            raise RuntimeError("previous batch still awaiting annotations")
        if self.cursor >= len(self.stream):
            if self.cycle >= self.config.cycles:
                return None
            self.cycle += 1
            self.cursor = 0
        raw = self.stream[self.cursor]
        if self._normalize:
            batch = StreamBatch(raw.batch_id, raw.patient_id,
                                [normalize(s) for s in raw.slices], raw.truth)
        else:
            batch = raw
        proposal = propose_batch(self.model, batch, self.config,
                                 batch_index=self.cursor,
                                 total_batches=self.total_batches,
                                 cycle=self.cycle)
        self._pending = proposal
        self.cursor += 1
        return proposal

    def submit(self, annotations: dict[int, AnnotationRecord | None],
               annotate_seconds: float = 0.0) -> AdaptationEvent:
        if self._pending is None:
            raise RuntimeError("no batch awaiting annotations")
        event = update_from_proposal(self.model, self._pending, annotations,
                                     self.optimizer, self.config,
                                     annotate_seconds=annotate_seconds)
        if event.optimizer_stepped:
            self.steps_taken += 1
        self._pending = None
        self.events.append(event)
        return event


def adapt_batch(model: SegmentationNet, batch: StreamBatch,
                config: AdaptationConfig,
                annotator=oracle_annotator,
                optimizer: torch.optim.Optimizer | None = None,
                batch_index: int = 0, total_batches: int | None = None,
                cycle: int = 1,
                normalize_inputs: bool = True) -> AdaptationEvent:
    """One complete stream step on a single batch.

    For multi-batch runs use :class:`StreamSession` (or :func:`run_stream`)
    so optimizer moments persist.
    """
    if normalize_inputs:
        batch = StreamBatch(batch.batch_id, batch.patient_id,
                            [normalize(s) for s in batch.slices], batch.truth)
    proposal = propose_batch(model, batch, config, batch_index=batch_index,
                             total_batches=total_batches, cycle=cycle)
    t0 = time.perf_counter()
    annotations: dict[int, AnnotationRecord | None] = {}
    for qs in proposal.querysets:
        annotations[qs.image_index] = annotator(proposal, qs.image_index, qs)
    annotate_seconds = time.perf_counter() - t0
    if optimizer is None:
        optimizer = torch.optim.Adam(model.bn_parameters(), lr=config.lr)
    return update_from_proposal(model, proposal, annotations, optimizer,
                                config, annotate_seconds=annotate_seconds)


def run_stream(model: SegmentationNet, stream: list[StreamBatch],
               config: AdaptationConfig,
               annotator=oracle_annotator) -> list[AdaptationEvent]:
    """Run the full stream (all cycles) headlessly."""
    session = StreamSession(model, stream, config)
    while True:
        proposal = session.next_proposal()
        if proposal is None:
            break
        t0 = time.perf_counter()
        annotations: dict[int, AnnotationRecord | None] = {}
        for qs in proposal.querysets:
            annotations[qs.image_index] = annotator(proposal, qs.image_index, qs)
        session.submit(annotations, annotate_seconds=time.perf_counter() - t0)
    return session.events


# -- event log I/O ------------------------------------------------------------


def write_event_log(events: list[AdaptationEvent], path: str,
                    timings_path: str | None = None) -> None:
    with open(path, "w") as f:
        for ev in events:
            f.write(ev.to_json_line() + "\n")
    if timings_path is not None:
        with open(timings_path, "w") as f:
            for ev in events:
                f.write(json.dumps({"batch_id": ev.batch_id, "cycle": ev.cycle,
                                    "wall_times": ev.wall_times}) + "\n")


def read_event_log(path: str) -> tuple[list[dict], int]:
    """Parse a JSON-lines event log; malformed lines are skipped and counted."""
    events = []
    skipped = 0
    with open(path) as f:
        for line in f:
            line = line.strip()
            if not line:
                continue
            try:
                d = json.loads(line)
                if not isinstance(d, dict) or "batch_id" not in d:
                    raise ValueError("not an event object")
                events.append(d)
            except (json.JSONDecodeError, ValueError):
                skipped += 1
    return events, skipped
