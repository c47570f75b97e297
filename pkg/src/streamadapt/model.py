"""Segmentation network with batch-normalization instrumentation.

The network is a small U-Net style encoder-decoder with BN after every
convolution and a softmax head. Every BN layer supports four normalization
modes, selected on the model:

    train   batch statistics, running statistics updated (pretraining only)
    source  frozen running statistics (deployment baseline)
    batch   statistics of the current batch, running stats untouched
    image   per-sample statistics over the spatial dims only

``image`` mode is what per-image statistic probing uses: with it, every
sample in a forward pass is normalized by its own spatial statistics, so the
outputs for one image do not depend on the rest of the batch.
"""

from __future__ import annotations

import hashlib
import json
import os
from contextlib import contextmanager
from dataclasses import dataclass, field, asdict

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .data import SliceImage, VolumeRecord, validate_slice

VARIANCE_FLOOR = 1e-6

BN_MODES = ("train", "source", "batch", "image")


@dataclass
class ArchConfig:
    class_count: int = 5
    stages: int = 4
    base_width: int = 16
    in_channels: int = 1
    batchnorm: bool = True
    class_names: list[str] | None = None

    def resolved_class_names(self) -> list[str]:
        if self.class_names is not None:
            return list(self.class_names)
        return ["background"] + [f"class_{i}" for i in range(1, self.class_count)]


@dataclass
class BNStatsProfile:
    """Per-layer, per-channel Gaussian statistics (mean, variance).

    Layer order matches the model's BN registration order and is identical
    across profiles from the same architecture. Variances are floored at
    VARIANCE_FLOOR.
    """

    per_layer: list[tuple[str, np.ndarray, np.ndarray]]
    untrained_warning: bool = False

    def digest(self) -> str:
        h = hashlib.sha256()
        for layer_id, means, variances in self.per_layer:
            h.update(layer_id.encode())
            h.update(np.ascontiguousarray(means, dtype=np.float64).tobytes())
            h.update(np.ascontiguousarray(variances, dtype=np.float64).tobytes())
        return h.hexdigest()

    def n_layers(self) -> int:
        return len(self.per_layer)


@dataclass
class ParamPartition:
    """Names of BN scale/shift parameters vs. all other weights."""

    bn_params: list[str]
    frozen_params: list[str]


class InstrumentedBatchNorm2d(nn.Module):
    """BatchNorm2d with selectable statistics source and a probing hook."""

    def __init__(self, num_features: int, eps: float = 1e-5, momentum: float = 0.1):
        super().__init__()
        self.num_features = num_features
        self.eps = eps
        self.momentum = momentum
        self.weight = nn.Parameter(torch.ones(num_features))
        self.bias = nn.Parameter(torch.zeros(num_features))
        self.register_buffer("running_mean", torch.zeros(num_features))
        self.register_buffer("running_var", torch.ones(num_features))
        self.register_buffer("num_batches_tracked", torch.tensor(0, dtype=torch.long))
        self.layer_id = ""          # set by the owning model
        self.mode = "source"        # pushed down by the owning model
        self._sink: list | None = None

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        mode = self.mode
        if mode == "image":
            var, mean = torch.var_mean(x, dim=(2, 3), unbiased=False)  # (B, C)
            if self._sink is not None:
                self._sink.append((self.layer_id, mean.detach(), var.detach()))
            xhat = (x - mean[:, :, None, None]) / torch.sqrt(var[:, :, None, None] + self.eps)
        elif mode in ("batch", "train"):
            var, mean = torch.var_mean(x, dim=(0, 2, 3), unbiased=False)  # (C,)
            if mode == "train":
                with torch.no_grad():
                    n = x.numel() / x.shape[1]
                    unbiased = var * n / max(n - 1, 1)
                    self.running_mean.mul_(1 - self.momentum).add_(self.momentum * mean)
                    self.running_var.mul_(1 - self.momentum).add_(self.momentum * unbiased)
                    self.num_batches_tracked += 1
            if self._sink is not None:
                self._sink.append((self.layer_id, mean.detach(), var.detach()))
            xhat = (x - mean[None, :, None, None]) / torch.sqrt(var[None, :, None, None] + self.eps)
        elif mode == "source":
            mean, var = self.running_mean, self.running_var
            xhat = (x - mean[None, :, None, None]) / torch.sqrt(var[None, :, None, None] + self.eps)
        else:
            raise ValueError(f"unknown BN mode {mode!r}")
        return xhat * self.weight[None, :, None, None] + self.bias[None, :, None, None]


def _conv_bn_relu(cin: int, cout: int) -> nn.Sequential:
    return nn.Sequential(
        nn.Conv2d(cin, cout, 3, padding=1, bias=False),
        InstrumentedBatchNorm2d(cout),
        nn.ReLU(inplace=True),
    )


class _DoubleConv(nn.Module):
    def __init__(self, cin: int, cout: int):
        super().__init__()
        self.block = nn.Sequential(_conv_bn_relu(cin, cout), _conv_bn_relu(cout, cout))

    def forward(self, x):
        return self.block(x)


class SegmentationNet(nn.Module):
    """Encoder-decoder segmentation backbone with instrumented BN layers.

    The head emits logits; callers apply softmax / log-softmax.
    """

    def __init__(self, config: ArchConfig):
        super().__init__()
        if config.class_count < 2:
            raise ValueError("need >=2 classes")
        if not config.batchnorm:
            raise ValueError("architecture without BN layers is not supported: "
                             "statistic probing and adaptation both require BN")
        if config.stages < 1:
            raise ValueError("need >=1 stage")
        self.config = config
        widths = [config.base_width * (2 ** i) for i in range(config.stages)]

        self.encoders = nn.ModuleList()
        cin = config.in_channels
        for wdt in widths:
            self.encoders.append(_DoubleConv(cin, wdt))
            cin = wdt
        self.pool = nn.MaxPool2d(2)

        self.up_reduce = nn.ModuleList()
        self.dec_merge = nn.ModuleList()
        for i in range(config.stages - 2, -1, -1):
            self.up_reduce.append(_conv_bn_relu(widths[i + 1], widths[i]))
            self.dec_merge.append(_conv_bn_relu(2 * widths[i], widths[i]))

        self.head = nn.Conv2d(widths[0], config.class_count, 1)

        self.bn_mode = "source"
        self._source_stats_cache: BNStatsProfile | None = None
        for name, module in self.named_modules():
            if isinstance(module, InstrumentedBatchNorm2d):
                module.layer_id = name

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        divisor = 2 ** (self.config.stages - 1)
        if x.shape[-1] % divisor or x.shape[-2] % divisor:
            raise ValueError(f"input spatial dims must be divisible by {divisor}")
        skips = []
        for i, enc in enumerate(self.encoders):
            x = enc(x)
            if i < len(self.encoders) - 1:
                skips.append(x)
                x = self.pool(x)
        for j, (up, merge) in enumerate(zip(self.up_reduce, self.dec_merge)):
            x = F.interpolate(x, scale_factor=2, mode="bilinear", align_corners=False)
            x = up(x)
            skip = skips[-(j + 1)]
            x = merge(torch.cat([skip, x], dim=1))
        return self.head(x)

    # -- BN instrumentation -------------------------------------------------

    def bn_layers(self) -> list[tuple[str, InstrumentedBatchNorm2d]]:
        return [(n, m) for n, m in self.named_modules()
                if isinstance(m, InstrumentedBatchNorm2d)]

    def set_bn_mode(self, mode: str) -> None:
        if mode not in BN_MODES:
            raise ValueError(f"unknown BN mode {mode!r}")
        self.bn_mode = mode
        for _, m in self.bn_layers():
            m.mode = mode

    @contextmanager
    def collect_bn_stats(self):
        """Collect (layer_id, mean, var) tuples during forward passes."""
        layers = [m for _, m in self.bn_layers()]
        prev = [m._sink for m in layers]
        sink: list = []
        for m in layers:
            m._sink = sink
        try:
            yield sink
        finally:
            for m, p in zip(layers, prev):
                m._sink = p

    def bn_parameters(self) -> list[nn.Parameter]:
        params = []
        for _, m in self.bn_layers():
            params.extend([m.weight, m.bias])
        return params

    def param_partition(self) -> ParamPartition:
        bn_names = set()
        for lname, _ in self.bn_layers():
            bn_names.add(f"{lname}.weight")
            bn_names.add(f"{lname}.bias")
        bn, frozen = [], []
        for name, _ in self.named_parameters():
            (bn if name in bn_names else frozen).append(name)
        return ParamPartition(bn_params=bn, frozen_params=frozen)

    def source_stats(self) -> BNStatsProfile:
        """Frozen source-domain BN statistics (running mean/var)."""
        if self._source_stats_cache is None:
            per_layer = []
            tracked = 0
            for name, m in sorted(self.bn_layers(), key=lambda t: t[0]):
                means = m.running_mean.detach().cpu().numpy().astype(np.float64)
                variances = m.running_var.detach().cpu().numpy().astype(np.float64)
                variances = np.maximum(variances, VARIANCE_FLOOR)
                per_layer.append((name, means, variances))
                tracked += int(m.num_batches_tracked.item())
            self._source_stats_cache = BNStatsProfile(
                per_layer=per_layer, untrained_warning=(tracked == 0))
        prof = self._source_stats_cache
        return BNStatsProfile(
            per_layer=[(lid, m.copy(), v.copy()) for lid, m, v in prof.per_layer],
            untrained_warning=prof.untrained_warning)

    def invalidate_source_stats(self) -> None:
        self._source_stats_cache = None


def build_model(config: ArchConfig, seed: int = 0) -> SegmentationNet:
    """Seeded model construction: same config + seed -> identical parameters."""
    torch.manual_seed(seed)
    model = SegmentationNet(config)
    model._build_seed = seed
    return model


# -- image plumbing ----------------------------------------------------------


def normalize(image: SliceImage) -> SliceImage:
    """Zero-mean unit-variance normalization of one slice.

    Constant images (variance below the floor) map to all zeros with
    ``constant_flag`` set.
    """
    validate_slice(image)
    px = image.pixels.astype(np.float64)
    var = px.var()
    if var < VARIANCE_FLOOR:
        return SliceImage(np.zeros_like(px, dtype=np.float32), image.patient_id,
                          image.slice_index, constant_flag=True)
    out = (px - px.mean()) / np.sqrt(var)
    return SliceImage(out.astype(np.float32), image.patient_id, image.slice_index)


def _stack_batch(images: list[SliceImage]) -> torch.Tensor:
    if not images:
        raise ValueError("batch must be non-empty")
    shape = images[0].pixels.shape
    for img in images[1:]:
        if img.pixels.shape != shape:
            raise ValueError(f"shape mismatch in batch: {img.pixels.shape} vs {shape}")
    arr = np.stack([img.pixels for img in images]).astype(np.float32)
    return torch.from_numpy(arr)[:, None, :, :]


def infer(model: SegmentationNet, batch: list[SliceImage],
          bn_mode: str = "batch") -> list[np.ndarray]:
    """Forward a batch; one (C, H, W) softmax probability map per image."""
    x = _stack_batch(batch)
    prev = model.bn_mode
    model.set_bn_mode(bn_mode)
    try:
        with torch.no_grad():
            probs = torch.softmax(model(x), dim=1)
    finally:
        model.set_bn_mode(prev)
    return [probs[i].numpy().astype(np.float32) for i in range(probs.shape[0])]


def _profiles_from_sink(sink: list, batch_size: int) -> list[BNStatsProfile]:
    # canonical layer order: sorted by layer id, so probe profiles line up
    # with source profiles regardless of execution order
    entries = sorted(sink, key=lambda t: t[0])
    profiles = [[] for _ in range(batch_size)]
    for layer_id, mean, var in entries:
        mean = mean.cpu().numpy().astype(np.float64)
        var = np.maximum(var.cpu().numpy().astype(np.float64), VARIANCE_FLOOR)
        for i in range(batch_size):
            profiles[i].append((layer_id, mean[i], var[i]))
    return [BNStatsProfile(per_layer=p) for p in profiles]


def probe_bn_stats(model: SegmentationNet, image: SliceImage) -> BNStatsProfile:
    """Per-layer, per-channel spatial statistics of one image's activations.

    Pure probe: parameters and running statistics are untouched.
    """
    return probe_bn_stats_batch(model, [image])[0]


def probe_bn_stats_batch(model: SegmentationNet,
                         images: list[SliceImage]) -> list[BNStatsProfile]:
    """Probe several images in one forward pass (per-image BN mode)."""
    x = _stack_batch(images)
    prev = model.bn_mode
    model.set_bn_mode("image")
    try:
        with torch.no_grad(), model.collect_bn_stats() as sink:
            model(x)
    finally:
        model.set_bn_mode(prev)
    return _profiles_from_sink(sink, len(images))


def source_stats(model: SegmentationNet) -> BNStatsProfile:
    return model.source_stats()


# -- supervised source pretraining -------------------------------------------


@dataclass
class PretrainConfig:
    epochs: int = 20
    lr: float = 1e-3
    batch_size: int = 8
    seed: int = 0
    val_volumes: int = 1
    dsc_threshold: float = 0.90
    # inverse-sqrt-frequency class weights keep small structures from being
    # drowned out by the background term
    class_weighting: str = "inv_sqrt_freq"   # or "none"
    # keeps softmax outputs calibrated instead of saturated, so entropy-based
    # acquisition has signal to work with at test time
    label_smoothing: float = 0.05


@dataclass
class TrainLog:
    epoch_losses: list[float] = field(default_factory=list)
    val_dsc_per_class: dict[int, float] = field(default_factory=dict)
    mean_val_dsc: float = 0.0
    converged: bool = False
    epochs: int = 0
    seed: int = 0


def _normalized_tensor_dataset(volumes: list[VolumeRecord]):
    xs, ys = [], []
    for vol in volumes:
        if vol.truth is None:
            raise ValueError(f"volume {vol.patient_id} has no labels")
        for img, lab in zip(vol.slices, vol.truth):
            xs.append(normalize(img).pixels)
            ys.append(lab.astype(np.int64))
    x = torch.from_numpy(np.stack(xs).astype(np.float32))[:, None]
    y = torch.from_numpy(np.stack(ys))
    return x, y


def _dice_counts(pred: np.ndarray, truth: np.ndarray, class_count: int):
    inter = np.zeros(class_count)
    sizes = np.zeros((class_count, 2))
    for c in range(class_count):
        p = pred == c
        t = truth == c
        inter[c] = np.logical_and(p, t).sum()
        sizes[c] = [p.sum(), t.sum()]
    return inter, sizes


def evaluate_volumes(model: SegmentationNet, volumes: list[VolumeRecord],
                     bn_mode: str = "source", batch_size: int = 8) -> dict[int, float]:
    """Per-class DSC over entire volumes (counts pooled across slices)."""
    C = model.config.class_count
    inter = np.zeros(C)
    sizes = np.zeros((C, 2))
    for vol in volumes:
        for start in range(0, vol.n_slices, batch_size):
            sl = vol.slices[start:start + batch_size]
            tr = vol.truth[start:start + batch_size]
            probs = infer(model, [normalize(s) for s in sl], bn_mode=bn_mode)
            for pm, t in zip(probs, tr):
                i, s = _dice_counts(pm.argmax(axis=0), t, C)
                inter += i
                sizes += s
    out = {}
    for c in range(C):
        denom = sizes[c].sum()
        out[c] = 1.0 if denom == 0 else float(2.0 * inter[c] / denom)
    return out


def pretrain_source(model: SegmentationNet, volumes: list[VolumeRecord],
                    config: PretrainConfig) -> TrainLog:
    """Standard supervised cross-entropy pretraining on labeled source volumes.

    Populates BN running statistics; flags non-convergence when the held-out
    mean foreground DSC stays below ``dsc_threshold``.
    """
    if not volumes:
        raise ValueError("empty source dataset")
    log = TrainLog(epochs=config.epochs, seed=config.seed)
    n_val = min(config.val_volumes, max(len(volumes) - 1, 0))
    train_vols = volumes[: len(volumes) - n_val] if n_val else volumes
    val_vols = volumes[len(volumes) - n_val:] if n_val else volumes

    if config.epochs > 0:
        torch.manual_seed(config.seed)
        rng = np.random.default_rng(config.seed)
        x, y = _normalized_tensor_dataset(train_vols)
        weights = None
        if config.class_weighting == "inv_sqrt_freq":
            counts = np.bincount(y.numpy().ravel(), minlength=model.config.class_count)
            w = 1.0 / np.sqrt(np.maximum(counts, 1))
            weights = torch.from_numpy((w / w.mean()).astype(np.float32))
        opt = torch.optim.Adam(model.parameters(), lr=config.lr)
        model.set_bn_mode("train")
        for _ in range(config.epochs):
            order = rng.permutation(x.shape[0])
            losses = []
            for start in range(0, len(order), config.batch_size):
                idx = order[start:start + config.batch_size]
                logits = model(x[idx])
                loss = F.cross_entropy(logits, y[idx], weight=weights,
                                       label_smoothing=config.label_smoothing)
                opt.zero_grad()
                loss.backward()
                opt.step()
                losses.append(float(loss.item()))
            log.epoch_losses.append(float(np.mean(losses)))
        model.set_bn_mode("source")
        model.invalidate_source_stats()

    dsc_by_class = evaluate_volumes(model, val_vols, bn_mode="source")
    log.val_dsc_per_class = dsc_by_class
    fg = [v for c, v in dsc_by_class.items() if c != 0]
    log.mean_val_dsc = float(np.mean(fg)) if fg else 0.0
    log.converged = log.mean_val_dsc >= config.dsc_threshold
    return log


# -- checkpointing -----------------------------------------------------------


def save_checkpoint(model: SegmentationNet, path: str) -> str:
    """Write model.pt (binary blob) + model.json (normative sidecar)."""
    os.makedirs(path, exist_ok=True)
    blob_path = os.path.join(path, "model.pt")
    torch.save({"state_dict": model.state_dict(),
                "arch_config": asdict(model.config)}, blob_path)
    sidecar = {
        "arch_config": asdict(model.config),
        "class_names": model.config.resolved_class_names(),
        "source_stats_digest": model.source_stats().digest(),
        "seed": getattr(model, "_build_seed", None),
    }
    with open(os.path.join(path, "model.json"), "w") as f:
        json.dump(sidecar, f, indent=2, sort_keys=True)
    return blob_path


def load_checkpoint(path: str) -> tuple[SegmentationNet, dict]:
    """Load a checkpoint directory; verifies the source-stats digest."""
    with open(os.path.join(path, "model.json")) as f:
        sidecar = json.load(f)
    blob = torch.load(os.path.join(path, "model.pt"), weights_only=False)
    config = ArchConfig(**blob["arch_config"])
    model = SegmentationNet(config)
    model.load_state_dict(blob["state_dict"])
    if sidecar.get("seed") is not None:
        model._build_seed = sidecar["seed"]
    digest = model.source_stats().digest()
    if digest != sidecar["source_stats_digest"]:
        raise ValueError("checkpoint mismatch: source statistics digest differs "
                         "from the sidecar record")
    return model, sidecar


def param_checksum(model: SegmentationNet, names: list[str]) -> str:
    """sha256 over the named parameters' bytes, in name order."""
    state = dict(model.named_parameters())
    h = hashlib.sha256()
    for name in sorted(names):
        h.update(name.encode())
        h.update(state[name].detach().cpu().numpy().tobytes())
    return h.hexdigest()


def running_stats_checksum(model: SegmentationNet) -> str:
    h = hashlib.sha256()
    for name, m in model.bn_layers():
        h.update(name.encode())
        h.update(m.running_mean.detach().cpu().numpy().tobytes())
        h.update(m.running_var.detach().cpu().numpy().tobytes())
    return h.hexdigest()
