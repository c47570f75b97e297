"""Scripted oracle client for the annotation service.

Answers every query from locally reconstructed ground truth, mirroring the
headless oracle annotator. Works against any HTTP client object exposing
``get``/``post`` with a requests-like response API (httpx.Client,
fastapi.testclient.TestClient, ...).
"""

from __future__ import annotations

import numpy as np

from .acquisition import QuerySet, oracle_annotate
from .experiment import resolve_volumes_from_spec


class ServiceError(RuntimeError):
    def __init__(self, response):
        super().__init__(f"{response.status_code}: {response.text}")
        self.response = response


def _check(response):
    if response.status_code >= 400:
        raise ServiceError(response)
    return response.json()


class OracleClient:
    """Drives a whole service session, labeling queries from ground truth."""

    def __init__(self, http, session_config: dict):
        self.http = http
        self.config = session_config
        seed = session_config.get("adaptation", {}).get("seed", 0)
        volumes = resolve_volumes_from_spec(session_config["dataset"], seed)
        self.truth: dict[tuple[str, int], np.ndarray] = {}
        for vol in volumes:
            if vol.truth is None:
                continue
            for img, lab in zip(vol.slices, vol.truth):
                self.truth[(vol.patient_id, img.slice_index)] = lab
        self.session_id: str | None = None

    def create_session(self) -> str:
        out = _check(self.http.post("/sessions", json=self.config))
        self.session_id = out["session_id"]
        return self.session_id

    def _answer(self, payload: dict) -> list[dict]:
        slices = {s["index"]: s for s in payload["slices"]}
        records = []
        for qs_dict in payload["querysets"]:
            qs = QuerySet.from_dict(qs_dict)
            meta = slices[qs.image_index]
            truth = self.truth[(meta["patient_id"], meta["slice_index"])]
            rec = oracle_annotate(qs, truth)
            records.append(rec.to_dict())
        return records

    def step(self) -> dict | None:
        """One batch: pull, annotate, submit. None when the stream is done."""
        sid = self.session_id
        payload = _check(self.http.get(f"/sessions/{sid}/next-batch"))
        if payload["state"] == "finished" and payload["batch_id"] is None:
            return None
        if payload["state"] != "awaiting_annotations":
            return payload  # no queries; the service already adapted
        records = self._answer(payload)
        ack = _check(self.http.post(
            f"/sessions/{sid}/batches/{payload['batch_id']}/annotations",
            json={"records": records}))
        return ack

    def run(self) -> list[dict]:
        """Complete the whole stream; returns the event history."""
        if self.session_id is None:
            self.create_session()
        while self.step() is not None:
            pass
        return _check(self.http.get(f"/sessions/{self.session_id}/metrics"))["events"]
