"""Volume I/O, synthetic phantom generation and stream assembly.

A volume is one patient's ordered stack of 2-D slices plus (optionally) the
aligned ground-truth label maps. Synthetic volumes contain smooth ellipsoidal
structures with distinct intensity bands, so that cross-sections evolve
continuously from slice to slice; a configurable intensity shift (gamma curve,
multiplicative bias field, additive noise, optional inversion) turns a source
volume into a domain-shifted target volume without touching the labels.

On disk a volume is a directory:

    meta.json    patient id, shape, dtype, domain tag, sha256 per array
    pixels.bin   n_slices*H*W float32, little endian
    labels.bin   n_slices*H*W uint8, little endian (optional)
"""

from __future__ import annotations

import hashlib
import math
import json
import os
from dataclasses import dataclass, asdict

import numpy as np
from scipy.ndimage import gaussian_filter


class VolumeFormatError(Exception):
    """Base class for on-disk volume format problems."""


class VolumeSchemaError(VolumeFormatError):
    """meta.json is missing, malformed, or declares an unsupported layout."""


class VolumeTruncatedError(VolumeFormatError):
    """A binary array file is shorter than meta.json declares."""


class VolumeDigestError(VolumeFormatError):
    """A binary array file does not match its recorded sha256."""


@dataclass
class SliceImage:
    """A single 2-D slice of one patient's scan.

    ``pixels`` is (H, W) float32. ``constant_flag`` is set by
    :func:`streamadapt.model.normalize` when the input had zero variance.
    """

    pixels: np.ndarray
    patient_id: str
    slice_index: int
    constant_flag: bool = False

    @property
    def shape(self) -> tuple[int, int]:
        return self.pixels.shape  # type: ignore[return-value]


def validate_slice(image: SliceImage) -> None:
    h, w = image.pixels.shape
    if h < 8 or w < 8:
        raise ValueError(f"slice must be at least 8x8, got {h}x{w}")
    if not np.all(np.isfinite(image.pixels)):
        raise ValueError("slice contains non-finite intensities")


@dataclass
class VolumeRecord:
    """One patient's slice stack with optional aligned truth masks."""

    patient_id: str
    slices: list[SliceImage]
    truth: list[np.ndarray] | None = None
    domain_tag: str = "source"

    @property
    def n_slices(self) -> int:
        return len(self.slices)

    def pixel_array(self) -> np.ndarray:
        return np.stack([s.pixels for s in self.slices]).astype(np.float32)

    def truth_array(self) -> np.ndarray | None:
        if self.truth is None:
            return None
        return np.stack(self.truth).astype(np.uint8)


@dataclass
class ShiftSpec:
    """Synthetic appearance shift. Labels are never touched.

    ``contrast_warp`` adds a sinusoidal intensity remap (v + a*sin(2*pi*v))
    that is non-monotone for a > 1/(2*pi) and scrambles mid-range tissue
    contrast the way a different pulse sequence would, while leaving the
    extremes mostly alone. ``swap_strength`` smoothly exchanges the two
    intensity bands around ``swap_centers`` (fluid/tissue contrast reversal
    between pulse sequences); at strength 1 the bands trade places exactly.
    ``slice_jitter`` modulates gamma, warp and bias strength per slice
    (factor in [1-jitter, 1+jitter]) so slices of one volume carry unequal
    amounts of shift; 0 disables it.
    """

    gamma: float = 1.0
    contrast_warp: float = 0.0
    swap_strength: float = 0.0
    swap_centers: tuple[float, float] = (0.50, 0.70)
    swap_width: float = 0.09
    bias_field_strength: float = 0.0
    noise_sigma: float = 0.0
    intensity_invert: bool = False
    slice_jitter: float = 0.0
    seed: int = 0

    def is_identity(self) -> bool:
        return (
            self.gamma == 1.0
            and self.contrast_warp == 0.0
            and self.swap_strength == 0.0
            and self.bias_field_strength == 0.0
            and self.noise_sigma == 0.0
            and not self.intensity_invert
        )


# Anchor layout for the four foreground structures: (cy, cx, ay, ax) in
# normalized in-plane coordinates. One big left structure, two small right
# ones, one mid-bottom one.
_ORGAN_ANCHORS = [
    (0.50, 0.30, 0.27, 0.20),
    (0.27, 0.70, 0.13, 0.12),
    (0.60, 0.74, 0.12, 0.13),
    (0.82, 0.45, 0.10, 0.16),
]
_ORGAN_BANDS = [0.90, 0.50, 0.70, 0.30]
_BACKGROUND_BAND = 0.12


@dataclass
class GeneratorConfig:
    image_size: int = 96
    n_slices: int = 16
    class_count: int = 5
    intensity_jitter: float = 0.02
    texture_amplitude: float = 0.02
    pixel_noise: float = 0.03
    edge_blur: float = 0.7          # partial-volume style soft boundaries
    overlap_tolerance: float = 0.08
    max_retries: int = 10


def _ellipsoid_masks(cfg: GeneratorConfig, rng: np.random.Generator) -> list[np.ndarray]:
    """Per-class boolean stacks (n_slices, H, W), one per foreground class."""
    n = cfg.image_size
    ys, xs = np.mgrid[0:n, 0:n] / (n - 1)
    zs = np.linspace(-1.0, 1.0, cfg.n_slices)
    masks = []
    for cy, cx, ay, ax in _ORGAN_ANCHORS[: cfg.class_count - 1]:
        cy_j = cy + rng.uniform(-0.03, 0.03)
        cx_j = cx + rng.uniform(-0.03, 0.03)
        ay_j = ay * rng.uniform(0.85, 1.15)
        ax_j = ax * rng.uniform(0.85, 1.15)
        # z half-axis comfortably larger than the stack so every slice keeps
        # a non-degenerate cross-section; coarser stacks get flatter organs
        # so the per-slice change stays bounded regardless of slice count
        z_scale = math.sqrt(26.0 / max(cfg.n_slices - 1, 1))
        az = rng.uniform(1.5, 2.0) * z_scale
        cz = rng.uniform(-0.05, 0.05)
        stack = np.empty((cfg.n_slices, n, n), dtype=bool)
        for k, z in enumerate(zs):
            zterm = ((z - cz) / az) ** 2
            stack[k] = ((ys - cy_j) / ay_j) ** 2 + ((xs - cx_j) / ax_j) ** 2 <= 1.0 - zterm
        masks.append(stack)
    return masks


def _overlap_fraction(a: np.ndarray, b: np.ndarray) -> float:
    inter = np.logical_and(a, b).sum()
    denom = min(a.sum(), b.sum())
    if denom == 0:
        return 0.0
    return float(inter) / float(denom)


def generate_synthetic_volume(cfg: GeneratorConfig, seed: int) -> VolumeRecord:
    """Deterministic synthetic phantom volume with paired truth masks."""
    if cfg.class_count < 2 or cfg.class_count > len(_ORGAN_ANCHORS) + 1:
        raise ValueError(f"class_count must be in [2, {len(_ORGAN_ANCHORS) + 1}]")
    rng = np.random.default_rng(seed)
    masks = None
    for _ in range(cfg.max_retries):
        candidate = _ellipsoid_masks(cfg, rng)
        bad = False
        for i in range(len(candidate)):
            for j in range(i + 1, len(candidate)):
                if _overlap_fraction(candidate[i], candidate[j]) > cfg.overlap_tolerance:
                    bad = True
        if not bad:
            masks = candidate
            break
    if masks is None:
        raise RuntimeError("could not place structures within overlap tolerance")

    n, n_sl = cfg.image_size, cfg.n_slices
    labels = np.zeros((n_sl, n, n), dtype=np.uint8)
    for c, m in enumerate(masks, start=1):
        labels[m] = c

    bands = [_BACKGROUND_BAND] + list(_ORGAN_BANDS[: cfg.class_count - 1])
    jitter = rng.uniform(-cfg.intensity_jitter, cfg.intensity_jitter, size=len(bands))
    pixels = np.zeros((n_sl, n, n), dtype=np.float64)
    for c in range(cfg.class_count):
        pixels[labels == c] = bands[c] + jitter[c]
    if cfg.edge_blur > 0:
        pixels = gaussian_filter(pixels, sigma=(0.0, cfg.edge_blur, cfg.edge_blur))
    texture = gaussian_filter(rng.standard_normal((n_sl, n, n)), sigma=(1.5, n / 12, n / 12))
    tmax = np.abs(texture).max()
    if tmax > 0:
        pixels += cfg.texture_amplitude * texture / tmax
    pixels += rng.normal(0.0, cfg.pixel_noise, size=pixels.shape)
    pixels = np.clip(pixels, 0.0, 1.0).astype(np.float32)

    patient_id = f"synth-{seed:05d}"
    slices = [SliceImage(pixels[k], patient_id, k) for k in range(n_sl)]
    truth = [labels[k] for k in range(n_sl)]
    return VolumeRecord(patient_id, slices, truth, domain_tag="source")


def apply_shift(volume: VolumeRecord, spec: ShiftSpec) -> VolumeRecord:
    """Appearance shift: gamma curve, bias field, noise, optional inversion.

    Truth masks are carried over untouched. The identity spec returns a
    pixel-identical copy.
    """
    if spec.is_identity():
        slices = [SliceImage(s.pixels.copy(), s.patient_id, s.slice_index) for s in volume.slices]
        return VolumeRecord(volume.patient_id, slices, volume.truth, volume.domain_tag)

    rng = np.random.default_rng(spec.seed)
    stack = volume.pixel_array().astype(np.float64)
    n_sl, h, w = stack.shape

    gamma_mod = 1.0 + spec.slice_jitter * rng.uniform(-1.0, 1.0, size=n_sl)
    warp_mod = 1.0 + spec.slice_jitter * rng.uniform(-1.0, 1.0, size=n_sl)
    bias_mod = 1.0 + spec.slice_jitter * rng.uniform(-1.0, 1.0, size=n_sl)

    out = np.clip(stack, 0.0, 1.0)
    if spec.gamma != 1.0:
        exponents = spec.gamma ** gamma_mod
        out = out ** exponents[:, None, None]
    if spec.contrast_warp != 0.0:
        amp = spec.contrast_warp * warp_mod
        out = out + amp[:, None, None] * np.sin(2.0 * np.pi * out)
    if spec.swap_strength != 0.0:
        c1, c2 = spec.swap_centers
        w2 = 2.0 * spec.swap_width ** 2
        bump1 = np.exp(-((out - c1) ** 2) / w2)
        bump2 = np.exp(-((out - c2) ** 2) / w2)
        out = out + spec.swap_strength * (c2 - c1) * (bump1 - bump2)
    if spec.bias_field_strength > 0.0:
        fld = gaussian_filter(rng.standard_normal((n_sl, h, w)), sigma=(2.0, h / 6, w / 6))
        fld /= max(np.abs(fld).max(), 1e-12)
        strength = np.clip(spec.bias_field_strength * bias_mod, 0.0, None)
        out = out * (1.0 + strength[:, None, None] * fld)
    if spec.intensity_invert:
        out = 1.0 - out
    if spec.noise_sigma > 0.0:
        out = out + rng.normal(0.0, spec.noise_sigma, size=out.shape)
    out = out.astype(np.float32)

    slices = [SliceImage(out[k], volume.patient_id, volume.slices[k].slice_index)
              for k in range(n_sl)]
    return VolumeRecord(volume.patient_id, slices, volume.truth, domain_tag="shifted")


def _sha256(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def save_volume(volume: VolumeRecord, path: str) -> None:
    os.makedirs(path, exist_ok=True)
    pixels = volume.pixel_array()
    if pixels.dtype.byteorder == ">":
        pixels = pixels.astype("<f4")
    pix_bytes = pixels.astype("<f4").tobytes()
    meta = {
        "patient_id": volume.patient_id,
        "H": int(pixels.shape[1]),
        "W": int(pixels.shape[2]),
        "n_slices": int(pixels.shape[0]),
        "dtype": "f32le",
        "domain_tag": volume.domain_tag,
        "sha256": {"pixels.bin": _sha256(pix_bytes)},
    }
    with open(os.path.join(path, "pixels.bin"), "wb") as f:
        f.write(pix_bytes)
    truth = volume.truth_array()
    if truth is not None:
        lab_bytes = truth.astype(np.uint8).tobytes()
        meta["C"] = int(truth.max()) + 1
        meta["sha256"]["labels.bin"] = _sha256(lab_bytes)
        with open(os.path.join(path, "labels.bin"), "wb") as f:
            f.write(lab_bytes)
    with open(os.path.join(path, "meta.json"), "w") as f:
        json.dump(meta, f, indent=2, sort_keys=True)


def load_volume(path: str) -> VolumeRecord:
    meta_path = os.path.join(path, "meta.json")
    try:
        with open(meta_path) as f:
            meta = json.load(f)
    except FileNotFoundError as e:
        raise VolumeSchemaError(f"missing meta.json under {path}") from e
    except json.JSONDecodeError as e:
        raise VolumeSchemaError(f"malformed meta.json under {path}: {e}") from e

    for key in ("patient_id", "H", "W", "n_slices", "dtype", "sha256"):
        if key not in meta:
            raise VolumeSchemaError(f"meta.json missing required key {key!r}")
    if meta["dtype"] != "f32le":
        raise VolumeSchemaError(f"unsupported dtype {meta['dtype']!r}")

    h, w, n_sl = int(meta["H"]), int(meta["W"]), int(meta["n_slices"])

    def read_array(name: str, dtype, count: int) -> np.ndarray:
        fpath = os.path.join(path, name)
        with open(fpath, "rb") as f:
            raw = f.read()
        expected = count * np.dtype(dtype).itemsize
        if len(raw) < expected:
            raise VolumeTruncatedError(f"{name}: {len(raw)} bytes, expected {expected}")
        raw = raw[:expected]
        if _sha256(raw) != meta["sha256"].get(name):
            raise VolumeDigestError(f"{name}: sha256 mismatch")
        return np.frombuffer(raw, dtype=dtype).copy()

    pixels = read_array("pixels.bin", "<f4", n_sl * h * w).reshape(n_sl, h, w)
    pid = meta["patient_id"]
    slices = [SliceImage(pixels[k].astype(np.float32), pid, k) for k in range(n_sl)]

    truth = None
    if "labels.bin" in meta["sha256"]:
        labels = read_array("labels.bin", np.uint8, n_sl * h * w).reshape(n_sl, h, w)
        truth = [labels[k] for k in range(n_sl)]
    return VolumeRecord(pid, slices, truth, domain_tag=meta.get("domain_tag", "unknown"))


@dataclass
class StreamBatch:
    """One incoming unit of the stream: consecutive slices of one patient."""

    batch_id: int
    patient_id: str
    slices: list[SliceImage]
    truth: list[np.ndarray] | None = None

    def __len__(self) -> int:
        return len(self.slices)


def make_stream(volumes: list[VolumeRecord], batch_size: int,
                order_seed: int = 0) -> list[StreamBatch]:
    """Turn volumes into an ordered batch stream.

    Each patient volume becomes consecutive windows of ``batch_size`` slices
    in slice order; a batch never mixes patients. Patient order is shuffled
    by ``order_seed``.
    """
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    rng = np.random.default_rng(order_seed)
    order = rng.permutation(len(volumes))
    batches: list[StreamBatch] = []
    bid = 1
    for vi in order:
        vol = volumes[vi]
        for start in range(0, vol.n_slices, batch_size):
            stop = min(start + batch_size, vol.n_slices)
            truth = vol.truth[start:stop] if vol.truth is not None else None
            batches.append(StreamBatch(bid, vol.patient_id, vol.slices[start:stop], truth))
            bid += 1
    return batches


def generator_config_from_dict(d: dict) -> GeneratorConfig:
    return GeneratorConfig(**d)


def shift_spec_from_dict(d: dict) -> ShiftSpec:
    return ShiftSpec(**d)


def shift_spec_to_dict(s: ShiftSpec) -> dict:
    return asdict(s)
