"""Batch pruning: pick the most domain-shifted images of each incoming batch.

Each image is augmented once, its per-layer BN statistics are probed, and the
per-channel Gaussian divergence against the stored source statistics is
summed into a single score. The top-K% scorers are kept for annotation.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field

import numpy as np

from .data import SliceImage
from .model import (
    VARIANCE_FLOOR,
    BNStatsProfile,
    SegmentationNet,
    probe_bn_stats_batch,
)

PRUNE_METRICS = ("kl", "l1", "l2")


@dataclass
class AugmentSpec:
    """Divergence-probing augmentation: horizontal flip + intensity noise.

    Noise sigma is relative to the image's own intensity std.
    """

    flip_prob: float = 0.5
    noise_scale: float = 0.05


@dataclass
class PruneConfig:
    K: float = 100.0                       # percentage of the batch to keep
    metric: str = "kl"
    augmentation: AugmentSpec = field(default_factory=AugmentSpec)
    min_selected: int = 1
    # ablation knob: which way the Gaussian KL is evaluated
    kl_direction: str = "source_target"    # or "target_source"

    def __post_init__(self):
        if not 0.0 < self.K <= 100.0:
            raise ValueError("K must be in (0, 100]")
        if self.metric not in PRUNE_METRICS:
            raise ValueError(f"metric must be one of {PRUNE_METRICS}")
        if self.kl_direction not in ("source_target", "target_source"):
            raise ValueError("kl_direction must be 'source_target' or "
                             "'target_source'")


@dataclass
class DivergenceScore:
    image_index: int
    score: float


def content_seed(session_seed: int, image: SliceImage) -> int:
    """Per-image seed from the image content (position independent).

    Hashes coarse 4x4 block means quantized to a 0.01 grid rather than raw
    pixel bytes: numerically equivalent images (e.g. re-normalized after a
    constant intensity offset, where float32 rounding perturbs single pixels
    by ~1e-5) must map to the same seed, and block averaging keeps that
    rounding dust far below the quantization step.
    """
    px = image.pixels.astype(np.float64)
    h_dim, w_dim = px.shape
    bh, bw = h_dim // 4, w_dim // 4
    blocks = px[: bh * 4, : bw * 4].reshape(4, bh, 4, bw).mean(axis=(1, 3))
    q = np.rint(blocks * 100.0).astype(np.int64)
    h = hashlib.sha256()
    h.update(int(session_seed).to_bytes(8, "little", signed=True))
    h.update(q.tobytes())
    return int.from_bytes(h.digest()[:8], "little")


def augment(image: SliceImage, seed: int,
            spec: AugmentSpec | None = None) -> SliceImage:
    """Seeded flip + additive Gaussian intensity noise; shape preserved."""
    spec = spec or AugmentSpec()
    rng = np.random.default_rng(seed)
    px = image.pixels.astype(np.float32)
    if rng.random() < spec.flip_prob:
        px = px[:, ::-1].copy()
    if spec.noise_scale > 0:
        sigma = spec.noise_scale * float(px.std())
        if sigma > 0:
            px = px + rng.normal(0.0, sigma, size=px.shape).astype(np.float32)
    return SliceImage(px, image.patient_id, image.slice_index)


def gaussian_kl(mu1: float, var1: float, mu2: float, var2: float) -> float:
    """KL( N(mu1, var1) || N(mu2, var2) ), closed form, in nats.

    Arguments are ordered (source, target). Works elementwise on arrays.
    """
    mu1, var1, mu2, var2 = (np.asarray(a, dtype=np.float64) for a in (mu1, var1, mu2, var2))
    if not (np.all(np.isfinite(mu1)) and np.all(np.isfinite(var1))
            and np.all(np.isfinite(mu2)) and np.all(np.isfinite(var2))):
        raise ValueError("non-finite Gaussian parameters")
    if np.any(var1 < VARIANCE_FLOOR) or np.any(var2 < VARIANCE_FLOOR):
        raise ValueError(f"variances must be >= {VARIANCE_FLOOR}")
    out = 0.5 * np.log(var2 / var1) + (var1 + (mu1 - mu2) ** 2) / (2.0 * var2) - 0.5
    return float(out) if out.ndim == 0 else out


def batch_divergence(source: BNStatsProfile, probe: BNStatsProfile,
                     metric: str = "kl",
                     kl_direction: str = "source_target") -> float:
    """Single domain-shift score between two statistic profiles.

    kl sums per-channel Gaussian KL(source || target); l1 sums
    |dmean| + |dvar|; l2 is the global euclidean norm over the same index
    set. ``kl_direction="target_source"`` evaluates the KL the other way
    round (ablation knob; the default follows the source-first convention).
    """
    if metric not in PRUNE_METRICS:
        raise ValueError(f"metric must be one of {PRUNE_METRICS}")
    if source.n_layers() != probe.n_layers():
        raise ValueError("profile layer count mismatch")
    total = 0.0
    for (lid_s, mu_s, var_s), (lid_p, mu_p, var_p) in zip(source.per_layer, probe.per_layer):
        if lid_s != lid_p or mu_s.shape != mu_p.shape:
            raise ValueError(f"profile layout mismatch at layer {lid_s!r}/{lid_p!r}")
        var_s = np.maximum(var_s, VARIANCE_FLOOR)
        var_p = np.maximum(var_p, VARIANCE_FLOOR)
        if metric == "kl":
            if kl_direction == "source_target":
                total += float(np.sum(gaussian_kl(mu_s, var_s, mu_p, var_p)))
            else:
                total += float(np.sum(gaussian_kl(mu_p, var_p, mu_s, var_s)))
        elif metric == "l1":
            total += float(np.sum(np.abs(mu_s - mu_p) + np.abs(var_s - var_p)))
        else:
            total += float(np.sum((mu_s - mu_p) ** 2 + (var_s - var_p) ** 2))
    return math.sqrt(total) if metric == "l2" else total


def selection_count(K: float, batch_size: int, min_selected: int = 1) -> int:
    return min(batch_size, max(min_selected, math.ceil(K * batch_size / 100.0)))


def select_top_k(scores: list[float], K: float, min_selected: int = 1) -> list[int]:
    """Indices of the top-K% scores, descending, ties to the lower index."""
    n = selection_count(K, len(scores), min_selected)
    order = sorted(range(len(scores)), key=lambda i: (-scores[i], i))
    return order[:n]


def batch_divergences(model: SegmentationNet, batch: list[SliceImage],
                      config: PruneConfig, seed: int) -> list[DivergenceScore]:
    """Divergence of every image's augmented version against source stats."""
    source = model.source_stats()
    augmented = [augment(img, content_seed(seed, img), config.augmentation)
                 for img in batch]
    profiles = probe_bn_stats_batch(model, augmented)
    return [DivergenceScore(i, batch_divergence(source, prof, config.metric,
                                                config.kl_direction))
            for i, prof in enumerate(profiles)]


def prune_batch(model: SegmentationNet, batch: list[SliceImage],
                config: PruneConfig, seed: int) -> list[int]:
    """Top-K% most shifted image indices, descending score order."""
    if not batch:
        raise ValueError("batch must be non-empty")
    scores = batch_divergences(model, batch, config, seed)
    return select_top_k([s.score for s in scores], config.K, config.min_selected)


def random_prune(batch_size: int, K: float, seed: int,
                 min_selected: int = 1) -> list[int]:
    """Control arm: uniformly random image subset of the same size."""
    n = selection_count(K, batch_size, min_selected)
    rng = np.random.default_rng(seed)
    return sorted(rng.choice(batch_size, size=n, replace=False).tolist())


def decay_schedule(K0: float, batch_index: int, total_batches: int | None,
                   mode: str = "constant") -> float:
    """Effective image-selection rate for a given batch position.

    exp_decay shrinks K0 exponentially and cuts annotation off entirely
    after 60% of the declared stream length; the rate constant puts the
    effective K at 0.5 (below one percent) at the cutoff.
    """
    if not 0.0 < K0 <= 100.0:
        raise ValueError("K0 must be in (0, 100]")
    if mode == "constant":
        return K0
    if mode != "exp_decay":
        raise ValueError(f"unknown decay mode {mode!r}")
    if total_batches is None:
        raise ValueError("exp_decay requires a declared stream horizon "
                         "(total_batches)")
    cutoff = 0.6 * total_batches
    if batch_index >= cutoff:
        return 0.0
    gamma = math.log(2.0 * K0) / cutoff
    return K0 * math.exp(-gamma * batch_index)
