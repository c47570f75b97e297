"""Session-oriented HTTP API for the expert annotation loop.

One session owns one model instance and one stream. The client pulls the
next batch (slices, predictions, query overlays), posts the expert's
annotations, and the service runs the adaptation step before handing out the
following batch. Per-session mutations are serialized by a lock; reads are
snapshots.

Endpoints:

    POST /sessions
    GET  /sessions/{sid}/next-batch
    POST /sessions/{sid}/batches/{bid}/annotations
    GET  /sessions/{sid}/metrics
    GET  /sessions/{sid}/slices/{bid}/{idx}.png
    GET  /sessions/{sid}/slices/{bid}/{idx}.raw
    GET  /sessions/{sid}/predictions/{bid}/{idx}.png
    GET  /schemas            GET /schemas/{name}
"""

from __future__ import annotations

import base64
import io
import os
import threading
import time
import uuid

import numpy as np
from fastapi import FastAPI, HTTPException, Response
from PIL import Image

from .acquisition import AnnotationRecord
from .adaptation import AdaptationConfig, BatchProposal, StreamSession
from .experiment import resolve_stream_from_spec
from .model import load_checkpoint

SCHEMA_VERSION = "1"

# indexed-color palette for prediction maps: background + distinct hues
_PALETTE = [
    (0, 0, 0), (214, 39, 40), (44, 160, 44), (31, 119, 180), (255, 127, 14),
    (148, 103, 189), (140, 86, 75), (227, 119, 194), (127, 127, 127),
    (188, 189, 34), (23, 190, 207),
]


class SessionRuntime:
    def __init__(self, session_id: str, session: StreamSession, config: dict):
        self.session_id = session_id
        self.session = session
        self.config = config
        self.demo = bool(config.get("demo", False))
        self.state = "awaiting_batch"
        self.proposal: BatchProposal | None = None
        self.records: dict[int, AnnotationRecord] = {}
        self.lock = threading.Lock()
        self.issued_at = 0.0
        self.slice_png: dict[tuple[int, int], bytes] = {}
        self.slice_raw: dict[tuple[int, int], bytes] = {}
        self.pred_png: dict[tuple[int, int], bytes] = {}
        self.truth_png: dict[tuple[int, int], bytes] = {}
        self.window_level: dict[tuple[int, int], dict] = {}


def _to_png(arr: np.ndarray, lo: float, hi: float) -> bytes:
    scaled = np.clip((arr - lo) / max(hi - lo, 1e-9), 0, 1)
    img = Image.fromarray((scaled * 255).astype(np.uint8), mode="L")
    buf = io.BytesIO()
    img.save(buf, format="PNG")
    return buf.getvalue()


def _labels_to_png(labels: np.ndarray) -> bytes:
    img = Image.fromarray(labels.astype(np.uint8), mode="P")
    flat = []
    for rgb in _PALETTE:
        flat.extend(rgb)
    img.putpalette(flat + [0] * (768 - len(flat)))
    buf = io.BytesIO()
    img.save(buf, format="PNG")
    return buf.getvalue()


def _render_batch(rt: SessionRuntime, proposal: BatchProposal) -> None:
    bid = proposal.batch.batch_id
    for i, (raw, probs) in enumerate(zip(proposal.batch.slices, proposal.probs)):
        px = raw.pixels.astype(np.float32)
        lo, hi = float(np.percentile(px, 1)), float(np.percentile(px, 99))
        rt.slice_png[(bid, i)] = _to_png(px, lo, hi)
        rt.slice_raw[(bid, i)] = px.astype("<f4").tobytes()
        rt.pred_png[(bid, i)] = _labels_to_png(probs.argmax(axis=0))
        if rt.demo and proposal.batch.truth is not None:
            rt.truth_png[(bid, i)] = _labels_to_png(proposal.batch.truth[i])
        rt.window_level[(bid, i)] = {"low": lo, "high": hi,
                                     "center": (lo + hi) / 2, "width": hi - lo}


def _batch_payload(rt: SessionRuntime, proposal: BatchProposal) -> dict:
    bid = proposal.batch.batch_id
    sid = rt.session_id
    slices = []
    predictions = []
    for i, s in enumerate(proposal.batch.slices):
        slices.append({
            "index": i,
            "patient_id": s.patient_id,
            "slice_index": s.slice_index,
            "height": int(s.pixels.shape[0]),
            "width": int(s.pixels.shape[1]),
            "window_level": rt.window_level[(bid, i)],
            "png_base64": base64.b64encode(rt.slice_png[(bid, i)]).decode(),
            "png_url": f"/sessions/{sid}/slices/{bid}/{i}.png",
            "raw_url": f"/sessions/{sid}/slices/{bid}/{i}.raw",
        })
        predictions.append({
            "index": i,
            "png_base64": base64.b64encode(rt.pred_png[(bid, i)]).decode(),
            "png_url": f"/sessions/{sid}/predictions/{bid}/{i}.png",
        })
        if (bid, i) in rt.truth_png:
            slices[-1]["truth_png_url"] = f"/sessions/{sid}/truth/{bid}/{i}.png"
    return {
        "batch_id": bid,
        "state": rt.state,
        "K_effective": proposal.K_effective,
        "selected_indices": [int(i) for i in proposal.selected],
        "querysets": [qs.to_dict() for qs in proposal.querysets],
        "slices": slices,
        "predictions": predictions,
        "class_count": rt.session.model.config.class_count,
        "class_names": rt.session.model.config.resolved_class_names(),
    }


SCHEMAS: dict[str, dict] = {
    "queryset": {
        "$id": "queryset", "type": "object",
        "required": ["image_index", "mode", "budget_b", "pixels", "patches"],
        "properties": {
            "image_index": {"type": "integer", "minimum": 0},
            "mode": {"enum": ["pixel", "patch"]},
            "budget_b": {"type": "number", "exclusiveMinimum": 0},
            "pixels": {"type": "array", "items": {
                "type": "array", "items": {"type": "integer"},
                "minItems": 2, "maxItems": 2}},
            "patches": {"type": "array", "items": {
                "type": "array", "items": {"type": "integer"},
                "minItems": 3, "maxItems": 3}},
        },
    },
    "annotation_record": {
        "$id": "annotation_record", "type": "object",
        "required": ["image_index", "entries"],
        "properties": {
            "image_index": {"type": "integer", "minimum": 0},
            "entries": {"type": "array", "items": {
                "type": "array", "items": {"type": "integer"},
                "minItems": 3, "maxItems": 3}},
            "source": {"enum": ["oracle", "human"]},
        },
    },
    "annotation_submission": {
        "$id": "annotation_submission", "type": "object",
        "required": ["records"],
        "properties": {
            "records": {"type": "array", "items": {"$ref": "annotation_record"}},
            "finalize": {"type": "boolean"},
        },
    },
    "batch_payload": {
        "$id": "batch_payload", "type": "object",
        "required": ["batch_id", "state", "querysets", "slices", "predictions"],
        "properties": {
            "batch_id": {"type": ["integer", "null"]},
            "state": {"enum": ["awaiting_batch", "awaiting_annotations",
                               "adapting", "finished"]},
            "K_effective": {"type": "number"},
            "selected_indices": {"type": "array", "items": {"type": "integer"}},
            "querysets": {"type": "array", "items": {"$ref": "queryset"}},
            "slices": {"type": "array"},
            "predictions": {"type": "array"},
        },
    },
}


def create_app(default_config: dict | None = None) -> FastAPI:
    app = FastAPI(title="streamadapt annotation service", version=SCHEMA_VERSION)
    sessions: dict[str, SessionRuntime] = {}
    store_lock = threading.Lock()
    app.state.sessions = sessions
    defaults = default_config or {}

    def _get(sid: str) -> SessionRuntime:
        rt = sessions.get(sid)
        if rt is None:
            raise HTTPException(404, f"unknown session {sid!r}")
        return rt

    @app.post("/sessions", status_code=201)
    def create_session(body: dict):
        cfg = {**defaults, **(body or {})}
        ckpt = cfg.get("checkpoint")
        if not ckpt or not os.path.exists(os.path.join(str(ckpt), "model.pt")):
            raise HTTPException(400, f"checkpoint not found: {ckpt!r}")
        if "dataset" not in cfg:
            raise HTTPException(400, "missing dataset spec")
        try:
            adapt_cfg = AdaptationConfig.from_dict(cfg.get("adaptation", {}))
            model, _ = load_checkpoint(str(ckpt))
            stream = resolve_stream_from_spec(cfg["dataset"], adapt_cfg.seed)
        except (ValueError, TypeError, KeyError, OSError) as e:
            raise HTTPException(400, f"bad session config: {e}") from e
        sid = uuid.uuid4().hex
        rt = SessionRuntime(sid, StreamSession(model, stream, adapt_cfg), cfg)
        with store_lock:
            sessions[sid] = rt
        return {"session_id": sid, "state": rt.state,
                "total_batches": len(stream), "cycles": adapt_cfg.cycles}

    @app.get("/sessions/{sid}/next-batch")
    def next_batch(sid: str):
        rt = _get(sid)
        with rt.lock:
            if rt.state == "finished":
                return {"batch_id": None, "state": "finished", "querysets": [],
                        "slices": [], "predictions": []}
            if rt.state != "awaiting_batch":
                raise HTTPException(409, f"session is {rt.state}, "
                                         "not awaiting_batch")
            proposal = rt.session.next_proposal()
            if proposal is None:
                rt.state = "finished"
                return {"batch_id": None, "state": "finished", "querysets": [],
                        "slices": [], "predictions": []}
            rt.proposal = proposal
            rt.records = {}
            rt.issued_at = time.perf_counter()
            _render_batch(rt, proposal)
            if not proposal.querysets:
                # nothing to annotate (K decayed to 0): adapt right away
                rt.state = "adapting"
                event = rt.session.submit({}, annotate_seconds=0.0)
                rt.proposal = None
                rt.state = ("finished" if rt.session.finished()
                            else "awaiting_batch")
                payload = _batch_payload(rt, proposal)
                payload["losses"] = event.losses.to_dict()
                return payload
            rt.state = "awaiting_annotations"
            return _batch_payload(rt, proposal)

    @app.post("/sessions/{sid}/batches/{bid}/annotations")
    def submit_annotations(sid: str, bid: int, body: dict):
        rt = _get(sid)
        with rt.lock:
            if rt.state != "awaiting_annotations":
                raise HTTPException(409, f"session is {rt.state}, "
                                         "not awaiting_annotations")
            proposal = rt.proposal
            if proposal is None or proposal.batch.batch_id != bid:
                current = proposal.batch.batch_id if proposal else None
                raise HTTPException(409, f"stale batch id {bid}, current is {current}")
            class_count = rt.session.model.config.class_count
            for rec_dict in body.get("records", []):
                try:
                    rec = AnnotationRecord.from_dict(rec_dict)
                except (KeyError, TypeError, ValueError) as e:
                    raise HTTPException(400, f"malformed record: {e}") from e
                qs = proposal.queryset_for(rec.image_index)
                if qs is None:
                    raise HTTPException(
                        400, f"image {rec.image_index} has no query set")
                allowed = qs.covered()
                offending = [[x, y] for x, y, _ in rec.entries
                             if (x, y) not in allowed]
                if offending:
                    raise HTTPException(
                        400, f"coordinates outside the query set for image "
                             f"{rec.image_index}: {offending}")
                bad_class = [c for _, _, c in rec.entries
                             if not 0 <= c < class_count]
                if bad_class:
                    raise HTTPException(400, f"class index out of range: {bad_class}")
                rec.source = rec_dict.get("source", "human")
                rt.records[rec.image_index] = rec
            finalize = bool(body.get("finalize", False))
            missing = [qs.image_index for qs in proposal.querysets
                       if qs.image_index not in rt.records]
            if missing and not finalize:
                return {"status": "accepted", "state": rt.state,
                        "pending_images": missing}
            rt.state = "adapting"
            annotations = {qs.image_index: rt.records.get(qs.image_index)
                           for qs in proposal.querysets}
            event = rt.session.submit(
                annotations,
                annotate_seconds=time.perf_counter() - rt.issued_at)
            rt.proposal = None
            rt.records = {}
            rt.state = "finished" if rt.session.finished() else "awaiting_batch"
            return {"status": "adapted", "state": rt.state,
                    "losses": event.losses.to_dict(),
                    "per_class_dsc": event.to_dict()["per_class_dsc"]}

    @app.get("/sessions/{sid}/metrics")
    def metrics(sid: str):
        rt = _get(sid)
        events = list(rt.session.events)
        return {"session_id": sid, "state": rt.state,
                "batches_done": len(events),
                "events": [ev.to_dict() for ev in events]}

    @app.get("/sessions/{sid}/slices/{bid}/{idx}.png")
    def slice_png(sid: str, bid: int, idx: int):
        rt = _get(sid)
        data = rt.slice_png.get((bid, idx))
        if data is None:
            raise HTTPException(404, f"no rendered slice {bid}/{idx}")
        return Response(content=data, media_type="image/png")

    @app.get("/sessions/{sid}/slices/{bid}/{idx}.raw")
    def slice_raw(sid: str, bid: int, idx: int):
        rt = _get(sid)
        data = rt.slice_raw.get((bid, idx))
        if data is None:
            raise HTTPException(404, f"no slice {bid}/{idx}")
        return Response(content=data, media_type="application/octet-stream")

    @app.get("/sessions/{sid}/predictions/{bid}/{idx}.png")
    def prediction_png(sid: str, bid: int, idx: int):
        rt = _get(sid)
        data = rt.pred_png.get((bid, idx))
        if data is None:
            raise HTTPException(404, f"no prediction {bid}/{idx}")
        return Response(content=data, media_type="image/png")

    @app.get("/sessions/{sid}/truth/{bid}/{idx}.png")
    def truth_png(sid: str, bid: int, idx: int):
        rt = _get(sid)
        data = rt.truth_png.get((bid, idx))
        if data is None:
            raise HTTPException(404, f"no truth overlay {bid}/{idx} "
                                     "(demo mode only)")
        return Response(content=data, media_type="image/png")

    @app.get("/schemas")
    def schemas():
        return {"version": SCHEMA_VERSION, "schemas": sorted(SCHEMAS)}

    @app.get("/schemas/{name}")
    def schema(name: str):
        if name not in SCHEMAS:
            raise HTTPException(404, f"unknown schema {name!r}")
        return {"version": SCHEMA_VERSION, **SCHEMAS[name]}

    return app
