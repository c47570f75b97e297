"""The annotation service driven by a scripted oracle client, in process.

Spins the HTTP app, creates a session, answers every query from ground
truth, and prints the event history. The same flow a human would drive in
the browser client under frontend/.
"""

import os

from fastapi.testclient import TestClient

from streamadapt.client import OracleClient
from streamadapt.service import create_app

CKPT = os.path.join(os.path.dirname(__file__), "output", "demo_checkpoint")
if not os.path.exists(os.path.join(CKPT, "model.pt")):
    raise SystemExit("run 02_source_pretraining.py first")

config = {
    "checkpoint": CKPT,
    "dataset": {
        "generator": {"image_size": 64, "n_slices": 16},
        "shift": {"gamma": 1.2, "contrast_warp": 0.25, "swap_strength": 0.8,
                  "bias_field_strength": 0.2, "noise_sigma": 0.06,
                  "slice_jitter": 0.35},
        "n_volumes": 2,
        "batch_size": 8,
    },
    "adaptation": {"K": 50.0, "b": 1.0, "patch_side": 3, "seed": 0,
                   "log_post_dsc": False},
    "demo": True,
}

http = TestClient(create_app())
client = OracleClient(http, config)
sid = client.create_session()
print(f"session {sid[:8]} created")

n = 0
while True:
    ack = client.step()
    if ack is None:
        break
    n += 1
    losses = ack.get("losses", {})
    print(f"batch {n:2d}: sup={losses.get('sup_loss')} "
          f"cont={losses.get('cont_loss'):.4f} "
          f"annotated={losses.get('annotated_pixel_count')}")

events = http.get(f"/sessions/{sid}/metrics").json()["events"]
print(f"\n{len(events)} events recorded; selected per batch:",
      [e["selected_indices"] for e in events])
