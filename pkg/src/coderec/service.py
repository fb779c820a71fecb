"""Minimal recommendation service over HTTP: /healthz and /recommend.

Requests are answered from an immutable snapshot (precomputed score matrix),
so concurrent reads need no locking.
"""

from __future__ import annotations

import json
import threading
from dataclasses import dataclass
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from urllib.parse import parse_qs, urlparse

import numpy as np

from .dataset import Dataset, DatasetSplit
from .evaluation import interacted_repos, rank_by_score


@dataclass
class ModelSnapshot:
    dataset: Dataset
    split: DatasetSplit
    scores: np.ndarray  # users x files
    model_hash: str

    def candidates_for(self, user: int, scope: str) -> np.ndarray:
        repos = interacted_repos(self.dataset, self.split, user)
        mask = np.isin(self.dataset.file_repo, sorted(repos))
        if scope == "cross":
            mask = ~mask
        candidates = np.nonzero(mask)[0]
        train_pos = {r.target.index for r in self.split.train
                     if r.behavior == "commit" and r.user.index == user}
        return candidates[~np.isin(candidates, sorted(train_pos))]

    def recommend(self, user: int, k: int, scope: str) -> list:
        ranked = rank_by_score(self.scores[user], self.candidates_for(user, scope))[:k]
        return [{
            "file": self.dataset.files[int(j)],
            "repo": self.dataset.repos[int(self.dataset.file_repo[int(j)])],
            "score": float(self.scores[user, int(j)]),
        } for j in ranked]


def make_snapshot(model, model_hash: str) -> ModelSnapshot:
    return ModelSnapshot(dataset=model.dataset, split=model.split,
                         scores=model.score_all(), model_hash=model_hash)


class _Handler(BaseHTTPRequestHandler):
    snapshot: ModelSnapshot = None  # set by serve()

    def log_message(self, *args):
        pass  # keep tests quiet

    def _send(self, status: int, payload: dict):
        body = json.dumps(payload).encode("utf-8")
        self.send_response(status)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(body)))
        self.end_headers()
        self.wfile.write(body)

    def do_GET(self):
        url = urlparse(self.path)
        if url.path == "/healthz":
            self._send(200, {"status": "ok", "model_hash": self.snapshot.model_hash})
            return
        if url.path != "/recommend":
            self._send(404, {"error": f"no such endpoint {url.path}"})
            return
        q = parse_qs(url.query)
        try:
            user = int(q["user"][0])
            k = int(q.get("k", ["10"])[0])
            scope = q.get("scope", ["intra"])[0]
        except (KeyError, ValueError):
            self._send(400, {"error": "expected integer query params user and k"})
            return
        if k <= 0:
            self._send(400, {"error": f"k must be positive, got {k}"})
            return
        if scope not in ("intra", "cross"):
            self._send(400, {"error": f"scope must be intra or cross, got {scope!r}"})
            return
        if not 0 <= user < self.snapshot.dataset.n_users:
            self._send(404, {"error": f"unknown user {user}"})
            return
        self._send(200, {"user": user, "scope": scope,
                         "items": self.snapshot.recommend(user, k, scope)})


def serve(snapshot: ModelSnapshot, port: int, host: str = "127.0.0.1") -> ThreadingHTTPServer:
    """Start the HTTP server on a background thread; caller owns shutdown."""
    handler = type("Handler", (_Handler,), {"snapshot": snapshot})
    server = ThreadingHTTPServer((host, port), handler)
    thread = threading.Thread(target=server.serve_forever, daemon=True)
    thread.start()
    return server
