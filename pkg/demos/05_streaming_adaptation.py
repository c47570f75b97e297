"""End-to-end streaming adaptation on a small shifted stream.

Compares the frozen source model, continuity-only updates, and the full
annotate-then-update loop, and plots the per-batch Dice trajectories.
"""

import os

import matplotlib
matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np
import torch

from streamadapt import AdaptationConfig
from streamadapt.adaptation import mean_foreground_dsc
from streamadapt.experiment import (
    BenchmarkSpec,
    events_mean_dsc,
    run_arm,
    target_stream,
)
from streamadapt.model import load_checkpoint

OUT = os.path.join(os.path.dirname(__file__), "output")
CKPT = os.path.join(OUT, "demo_checkpoint")
if not os.path.exists(os.path.join(CKPT, "model.pt")):
    raise SystemExit("run 02_source_pretraining.py first")
torch.set_num_threads(max(os.cpu_count() // 2, 1))

model, _ = load_checkpoint(CKPT)
spec = BenchmarkSpec()
spec.generator.n_slices = 16
stream = target_stream(spec, stream_seed=0, n_volumes=4)
print(f"target stream: {len(stream)} batches of {len(stream[0])} slices")

trajectories = {}
for arm, cfg in [
    ("source_only", AdaptationConfig(seed=0)),
    ("continuity_only", AdaptationConfig(seed=0, log_post_dsc=False)),
    ("annotate+update", AdaptationConfig(K=100, b=1, patch_side=3, seed=0,
                                         log_post_dsc=False)),
]:
    a = "odes" if arm == "annotate+update" else arm
    events = run_arm(model, stream, cfg, arm=a)
    traj = [100 * mean_foreground_dsc({int(c): v for c, v in e.per_class_dsc.items()})
            for e in events]
    trajectories[arm] = traj
    print(f"{arm:16s} mean DSC {events_mean_dsc(events):6.2f}")

fig, ax = plt.subplots(figsize=(6, 3.5))
for arm, traj in trajectories.items():
    ax.plot(np.arange(1, len(traj) + 1), traj, marker=".", label=arm)
ax.set_xlabel("incoming batch")
ax.set_ylabel("mean DSC (pre-update)")
ax.legend(fontsize=8)
fig.tight_layout()
fig.savefig(os.path.join(OUT, "adaptation_trajectories.png"), dpi=110)
print(f"wrote {OUT}/adaptation_trajectories.png")
