"""Pixel and patch annotation-query selection.

Every pixel of a selected image is scored by prediction uncertainty times
regional impurity (entropy of the class histogram in a square window of the
pseudo-label map); the budgeted top scorers become the query set handed to
the expert. Random / entropy / second-confidence baselines produce drop-in
score maps for the same selectors.

Coordinate convention: a query location is (x, y) with x the column and y the
row, so arrays index as ``arr[y, x]`` and row-major tie-breaking means
"smaller y, then smaller x".
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

ACQUISITION_STRATEGIES = ("ripu", "ent", "sconf", "random")


class BudgetError(ValueError):
    """The pixel budget floors to zero queryable units."""


def check_prob_map(probs: np.ndarray, tol: float = 1e-5) -> None:
    if probs.ndim != 3 or probs.shape[0] < 2:
        raise ValueError("probability map must be (C, H, W) with C >= 2")
    if not np.all(np.isfinite(probs)):
        raise ValueError("probability map contains non-finite values")
    if probs.min() < -tol or probs.max() > 1 + tol:
        raise ValueError("probabilities outside [0, 1]")
    sums = probs.sum(axis=0)
    if np.abs(sums - 1.0).max() > tol:
        raise ValueError("per-pixel probabilities do not sum to 1")


def _box_sum(a: np.ndarray, side: int) -> np.ndarray:
    """Sum over the side x side window centered at each pixel, clipped at borders."""
    r = side // 2
    h, w = a.shape
    s = np.zeros((h + 1, w + 1), dtype=np.float64)
    s[1:, 1:] = np.cumsum(np.cumsum(a, axis=0, dtype=np.float64), axis=1)
    y0 = np.clip(np.arange(h) - r, 0, h)
    y1 = np.clip(np.arange(h) + r + 1, 0, h)
    x0 = np.clip(np.arange(w) - r, 0, w)
    x1 = np.clip(np.arange(w) + r + 1, 0, w)
    return (s[y1[:, None], x1[None, :]] - s[y0[:, None], x1[None, :]]
            - s[y1[:, None], x0[None, :]] + s[y0[:, None], x0[None, :]])


def _box_count(shape: tuple[int, int], side: int) -> np.ndarray:
    r = side // 2
    h, w = shape
    ny = np.clip(np.arange(h) + r + 1, 0, h) - np.clip(np.arange(h) - r, 0, h)
    nx = np.clip(np.arange(w) + r + 1, 0, w) - np.clip(np.arange(w) - r, 0, w)
    return ny[:, None] * nx[None, :]


def _require_odd_side(patch_side: int) -> None:
    if patch_side < 3 or patch_side % 2 == 0:
        raise ValueError(f"patch side must be odd and >= 3, got {patch_side}")


def entropy_map(probs: np.ndarray) -> np.ndarray:
    """Per-pixel Shannon entropy in nats; 0*log 0 := 0."""
    p = probs.astype(np.float64)
    logs = np.zeros_like(p)
    np.log(p, out=logs, where=p > 0)
    return -(p * logs).sum(axis=0)


def uncertainty_map(entropy: np.ndarray, mode: str = "pixel",
                    patch_side: int = 5) -> np.ndarray:
    """Pixel mode: the entropy itself. Patch mode: window-mean entropy."""
    if mode == "pixel":
        return entropy.astype(np.float64).copy()
    if mode != "patch":
        raise ValueError(f"mode must be 'pixel' or 'patch', got {mode!r}")
    _require_odd_side(patch_side)
    return _box_sum(entropy, patch_side) / _box_count(entropy.shape, patch_side)


def impurity_map(pseudo: np.ndarray, patch_side: int = 5) -> np.ndarray:
    """Entropy of the class histogram in the window around each pixel."""
    _require_odd_side(patch_side)
    counts = _box_count(pseudo.shape, patch_side).astype(np.float64)
    out = np.zeros(pseudo.shape, dtype=np.float64)
    for c in np.unique(pseudo):
        frac = _box_sum((pseudo == c).astype(np.float64), patch_side) / counts
        logs = np.zeros_like(frac)
        np.log(frac, out=logs, where=frac > 0)
        out -= frac * logs
    return out


def acquisition_score(uncertainty: np.ndarray, impurity: np.ndarray) -> np.ndarray:
    if uncertainty.shape != impurity.shape:
        raise ValueError(f"shape mismatch: {uncertainty.shape} vs {impurity.shape}")
    return uncertainty * impurity


def baseline_score(probs: np.ndarray, strategy: str,
                   seed: int | None = None) -> np.ndarray:
    """Score maps for the comparison acquisition strategies.

    random: seeded uniform scores; ent: plain entropy; sconf: margin between
    the two most probable classes, 1 - (p1 - p2).
    """
    if strategy == "ent":
        return entropy_map(probs)
    if strategy == "sconf":
        top2 = np.sort(probs.astype(np.float64), axis=0)[-2:]
        return 1.0 - (top2[1] - top2[0])
    if strategy == "random":
        rng = np.random.default_rng(seed)
        return rng.random(probs.shape[1:])
    raise ValueError(f"unknown acquisition strategy {strategy!r}")


# -- query sets ---------------------------------------------------------------


@dataclass
class QuerySet:
    """Locations selected for annotation in one image."""

    image_index: int
    mode: str                                   # "pixel" | "patch"
    budget_b: float
    pixels: list[tuple[int, int]] = field(default_factory=list)
    patches: list[tuple[int, int, int]] = field(default_factory=list)
    pixels_covered: int = 0

    def covered(self) -> set[tuple[int, int]]:
        """All (x, y) locations this query set asks the expert to label."""
        if self.mode == "pixel":
            return set(self.pixels)
        out: set[tuple[int, int]] = set()
        for cx, cy, side in self.patches:
            r = side // 2
            for yy in range(cy - r, cy + r + 1):
                for xx in range(cx - r, cx + r + 1):
                    out.add((xx, yy))
        return out

    def to_dict(self) -> dict:
        return {
            "image_index": self.image_index,
            "mode": self.mode,
            "budget_b": self.budget_b,
            "pixels": [[int(x), int(y)] for x, y in self.pixels],
            "patches": [[int(cx), int(cy), int(s)] for cx, cy, s in self.patches],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "QuerySet":
        qs = cls(
            image_index=int(d["image_index"]),
            mode=d["mode"],
            budget_b=float(d["budget_b"]),
            pixels=[(int(x), int(y)) for x, y in d.get("pixels", [])],
            patches=[(int(cx), int(cy), int(s)) for cx, cy, s in d.get("patches", [])],
        )
        qs.pixels_covered = (len(qs.pixels) if qs.mode == "pixel"
                             else sum(s * s for _, _, s in qs.patches))
        return qs


@dataclass
class AnnotationRecord:
    """Class labels provided at queried locations."""

    image_index: int
    entries: list[tuple[int, int, int]] = field(default_factory=list)  # (x, y, class)
    source: str = "oracle"

    def to_dict(self) -> dict:
        return {
            "image_index": self.image_index,
            "entries": [[int(x), int(y), int(c)] for x, y, c in self.entries],
            "source": self.source,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "AnnotationRecord":
        return cls(
            image_index=int(d["image_index"]),
            entries=[(int(x), int(y), int(c)) for x, y, c in d.get("entries", [])],
            source=d.get("source", "human"),
        )


def pixel_budget(shape: tuple[int, int], b: float) -> int:
    h, w = shape
    # epsilon guards against float dust when b*H*W/100 is an exact integer
    return int(np.floor(b * h * w / 100 + 1e-9))


def select_pixels(score: np.ndarray, b: float, image_index: int = 0) -> QuerySet:
    """The floor(b% of H*W) highest-scoring pixels, ties row-major."""
    if not 0.0 < b <= 100.0:
        raise ValueError("b must be in (0, 100]")
    h, w = score.shape
    n = pixel_budget((h, w), b)
    if n == 0:
        raise BudgetError("budget below one pixel")
    order = np.argsort(-score.ravel(), kind="stable")[:n]
    pixels = [(int(i % w), int(i // w)) for i in order]
    return QuerySet(image_index, "pixel", b, pixels=pixels, pixels_covered=n)


def select_patches(score: np.ndarray, b: float, patch_side: int = 5,
                   image_index: int = 0) -> QuerySet:
    """Greedy non-overlapping patch selection under the same pixel budget.

    Takes the highest-scoring center whose patch fits inside the image and
    does not overlap an already accepted patch, until the budget (floored to
    whole patches) is spent or no candidate remains.
    """
    if not 0.0 < b <= 100.0:
        raise ValueError("b must be in (0, 100]")
    _require_odd_side(patch_side)
    h, w = score.shape
    budget_px = pixel_budget((h, w), b)
    n_patches = budget_px // (patch_side * patch_side)
    if n_patches == 0:
        raise BudgetError("budget below one patch")
    r = patch_side // 2
    inner = score[r:h - r, r:w - r]
    iw = w - 2 * r
    order = np.argsort(-inner.ravel(), kind="stable")
    chosen: list[tuple[int, int, int]] = []
    for idx in order:
        cy = int(idx // iw) + r
        cx = int(idx % iw) + r
        if any(abs(cy - py) < patch_side and abs(cx - px) < patch_side
               for px, py, _ in chosen):
            continue
        chosen.append((cx, cy, patch_side))
        if len(chosen) == n_patches:
            break
    covered = len(chosen) * patch_side * patch_side
    return QuerySet(image_index, "patch", b, patches=chosen, pixels_covered=covered)


def oracle_annotate(queries: QuerySet, truth: np.ndarray) -> AnnotationRecord:
    """Ground-truth lookup standing in for the human expert.

    Patch queries label every pixel inside each patch.
    """
    h, w = truth.shape
    entries: list[tuple[int, int, int]] = []
    if queries.mode == "pixel":
        locations = queries.pixels
    else:
        locations = sorted(queries.covered(), key=lambda xy: (xy[1], xy[0]))
    for x, y in locations:
        if not (0 <= x < w and 0 <= y < h):
            raise ValueError(f"query ({x}, {y}) outside image bounds {w}x{h}")
        entries.append((x, y, int(truth[y, x])))
    return AnnotationRecord(queries.image_index, entries, source="oracle")
