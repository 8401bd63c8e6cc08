"""Mock black-box verification / recognition service and its client.

The service only ever returns confidences and verdicts, never embeddings or
distances. Images travel as base64 PNG, so they are quantized to 8 bits on
the wire.
"""

from __future__ import annotations

import json
import logging
import threading
import urllib.error
import urllib.request
from dataclasses import dataclass
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from typing import Sequence

import numpy as np

from .embedding import EmbeddedGallery, ReferenceSet
from .diffnet import EmbeddingNetwork
from .images import decode_png_b64, encode_png_b64

log = logging.getLogger(__name__)

THRESHOLD = 0.5
PROTOCOL_VERSION = "1"
VERSION_HEADER = "X-Protocol-Version"


class CalibrationError(ValueError):
    pass


class ServiceError(RuntimeError):
    """Error response returned by the service."""

    def __init__(self, code: str, message: str, status: int = 400):
        super().__init__(f"{code}: {message}")
        self.code = code
        self.message = message
        self.status = status


class TransportError(RuntimeError):
    pass


class ProtocolVersionError(RuntimeError):
    pass


@dataclass(frozen=True)
class MatchVerdict:
    confidence: float
    threshold: float = THRESHOLD
    matched: bool = False

    def __post_init__(self):
        if not 0.0 <= self.confidence <= 1.0:
            raise ValueError(f"confidence {self.confidence} outside [0, 1]")
        if self.matched != (self.confidence >= self.threshold):
            raise ValueError("matched flag disagrees with confidence and threshold")

    @classmethod
    def from_confidence(cls, confidence: float, threshold: float = THRESHOLD) -> "MatchVerdict":
        c = float(min(max(confidence, 0.0), 1.0))
        return cls(c, threshold, c >= threshold)

    def to_dict(self) -> dict:
        return {"confidence": self.confidence, "threshold": self.threshold, "matched": self.matched}


@dataclass(frozen=True)
class Calibration:
    d0: float
    d_max: float

    def __post_init__(self):
        if not 0.0 < self.d0 < self.d_max:
            raise CalibrationError(f"need 0 < d0 < d_max, got d0={self.d0}, d_max={self.d_max}")

    def to_dict(self) -> dict:
        return {"d0": self.d0, "d_max": self.d_max}

    @classmethod
    def from_dict(cls, d: dict) -> "Calibration":
        return cls(float(d["d0"]), float(d["d_max"]))


def confidence_from_distance(d: float, cal: Calibration) -> float:
    """Piecewise-linear: 1 at 0, 0.5 at ``d0``, 0 from ``d_max`` on."""
    if d < 0:
        raise ValueError("distance must be non-negative")
    if d <= cal.d0:
        return 1.0 - 0.5 * d / cal.d0
    if d < cal.d_max:
        return 0.5 * (cal.d_max - d) / (cal.d_max - cal.d0)
    return 0.0


def calibrate_distances(genuine: Sequence[float], impostor: Sequence[float]) -> Calibration:
    if len(genuine) == 0 or len(impostor) == 0:
        raise CalibrationError("need genuine and impostor distances")
    if np.mean(genuine) >= np.mean(impostor):
        raise CalibrationError("genuine pairs are not closer than impostor pairs on average")
    d0 = 0.5 * (float(np.mean(genuine)) + float(np.mean(impostor)))
    d_max = float(np.percentile(impostor, 95))
    if not 0.0 < d0 < d_max:
        raise CalibrationError(f"inseparable populations (d0={d0:.4g}, d_max={d_max:.4g})")
    return Calibration(d0, d_max)


def calibrate(net: EmbeddingNetwork, genuine_pairs, impostor_pairs) -> Calibration:
    """Fit the confidence knots from genuine and impostor image pairs."""
    def dists(pairs):
        pairs = list(pairs)
        if not pairs:
            return []
        a = net.forward_batch(np.stack([p[0] for p in pairs]))
        b = net.forward_batch(np.stack([p[1] for p in pairs]))
        return np.linalg.norm(a - b, axis=1)
    return calibrate_distances(dists(genuine_pairs), dists(impostor_pairs))


def calibration_pairs(items, max_pairs: int = 400, seed: int = 0):
    """Sample genuine and impostor pairs from labeled images."""
    rng = np.random.default_rng(seed)
    items = list(items)
    genuine, impostor = [], []
    for a in range(len(items)):
        for b in range(a + 1, len(items)):
            pair = (items[a].pixels, items[b].pixels)
            (genuine if items[a].label == items[b].label else impostor).append(pair)
    for pool in (genuine, impostor):
        if len(pool) > max_pairs:
            keep = np.sort(rng.choice(len(pool), max_pairs, replace=False))
            pool[:] = [pool[i] for i in keep]
    return genuine, impostor


class LocalVictim:
    """In-process victim: verification and centroid recognition on one network."""

    def __init__(self, net: EmbeddingNetwork, ref: ReferenceSet, cal: Calibration, name: str = "local"):
        self.net = net
        self.gallery = EmbeddedGallery(net, ref)
        self.cal = cal
        self.name = name

    def _embed(self, img):
        return self.net.forward_batch(np.asarray(img, dtype=np.float64)[None])[0]

    def verify(self, a, b) -> MatchVerdict:
        d = float(np.linalg.norm(self._embed(a) - self._embed(b)))
        return MatchVerdict.from_confidence(confidence_from_distance(d, self.cal))

    def recognize(self, img, top_n: int = 1) -> list[tuple]:
        n_labels = len(self.gallery.labels)
        if not 1 <= top_n <= n_labels:
            raise ValueError(f"top_n={top_n} outside [1, {n_labels}]")
        ranking = self.gallery.ranking(self._embed(img))[:top_n]
        return [(label, confidence_from_distance(d, self.cal)) for d, label in ranking]

    def predict(self, img):
        return self.recognize(img, 1)[0][0]

    def top_n(self, img, n: int) -> list:
        return [label for label, _ in self.recognize(img, n)]


# -- HTTP server ------------------------------------------------------------------

class _Handler(BaseHTTPRequestHandler):
    server_version = "MockVictim/1"

    def log_message(self, fmt, *args):
        log.debug("%s " + fmt, self.address_string(), *args)

    def _send(self, status: int, body: dict):
        data = json.dumps(body).encode("utf-8")
        self.send_response(status)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(data)))
        self.send_header(VERSION_HEADER, PROTOCOL_VERSION)
        self.end_headers()
        self.wfile.write(data)

    def _error(self, status, code, message):
        self._send(status, {"error": code, "message": message})

    def do_GET(self):
        if self.path != "/v1/health":
            return self._error(404, "not_found", f"no route {self.path}")
        self._send(200, {"status": "ok", "queries_served": self.server.state.served})

    def do_POST(self):
        state = self.server.state
        version = self.headers.get(VERSION_HEADER)
        if version is not None and version != PROTOCOL_VERSION:
            return self._error(400, "protocol_version", f"unsupported protocol version {version}")
        try:
            length = int(self.headers.get("Content-Length", "0"))
            body = json.loads(self.rfile.read(length) or b"null")
        except (ValueError, UnicodeDecodeError):
            return self._error(400, "bad_json", "request body is not valid JSON")
        if not isinstance(body, dict):
            return self._error(400, "bad_json", "request body must be a JSON object")
        try:
            if self.path == "/v1/verify":
                a = state.image(body, "image_a")
                b = state.image(body, "image_b")
                result = state.victim.verify(a, b).to_dict()
            elif self.path == "/v1/recognize":
                img = state.image(body, "image")
                n = body.get("top_n", 1)
                if not isinstance(n, int) or isinstance(n, bool):
                    raise ServiceError("bad_top_n", "top_n must be an integer")
                try:
                    cands = state.victim.recognize(img, n)
                except ValueError as exc:
                    raise ServiceError("bad_top_n", str(exc)) from None
                result = {"candidates": [{"label": str(lab), "confidence": c} for lab, c in cands]}
            else:
                return self._error(404, "not_found", f"no route {self.path}")
        except ServiceError as exc:
            return self._error(exc.status, exc.code, exc.message)
        state.count()
        self._send(200, result)


class _State:
    def __init__(self, victim: LocalVictim):
        self.victim = victim
        self._lock = threading.Lock()
        self._served = 0

    @property
    def served(self) -> int:
        with self._lock:
            return self._served

    def count(self):
        with self._lock:
            self._served += 1

    def image(self, body: dict, key: str) -> np.ndarray:
        if key not in body or not isinstance(body[key], str):
            raise ServiceError("missing_field", f"field {key!r} must be a base64 PNG string")
        try:
            img = decode_png_b64(body[key])
        except ValueError as exc:
            raise ServiceError("bad_image", str(exc)) from None
        if img.shape != self.victim.net.input_shape:
            raise ServiceError("bad_image_shape",
                               f"image shape {img.shape} != expected {self.victim.net.input_shape}")
        return img


class VictimService:
    """A running service; use as a context manager or call :meth:`close`."""

    def __init__(self, victim: LocalVictim, host: str = "127.0.0.1", port: int = 0):
        self.httpd = ThreadingHTTPServer((host, port), _Handler)
        self.httpd.daemon_threads = True
        self.httpd.state = _State(victim)
        self._thread: threading.Thread | None = None

    @property
    def url(self) -> str:
        host, port = self.httpd.server_address[:2]
        return f"http://{host}:{port}"

    @property
    def queries_served(self) -> int:
        return self.httpd.state.served

    def start(self) -> "VictimService":
        self._thread = threading.Thread(target=self.httpd.serve_forever, daemon=True)
        self._thread.start()
        return self

    def serve_forever(self):
        self.httpd.serve_forever()

    def close(self):
        self.httpd.shutdown()
        self.httpd.server_close()
        if self._thread is not None:
            self._thread.join()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def serve(net: EmbeddingNetwork, ref: ReferenceSet, cal: Calibration,
          host: str = "127.0.0.1", port: int = 0) -> VictimService:
    """Start a background service and return its handle."""
    return VictimService(LocalVictim(net, ref, cal), host, port).start()


# -- client -----------------------------------------------------------------------

class VictimClient:
    def __init__(self, url: str, timeout: float = 10.0, name: str | None = None):
        self.url = url.rstrip("/")
        self.timeout = timeout
        self.name = name or self.url

    def _request(self, method: str, path: str, body: dict | None = None) -> dict:
        data = None if body is None else json.dumps(body).encode("utf-8")
        req = urllib.request.Request(self.url + path, data=data, method=method)
        req.add_header(VERSION_HEADER, PROTOCOL_VERSION)
        if data is not None:
            req.add_header("Content-Type", "application/json")
        try:
            with urllib.request.urlopen(req, timeout=self.timeout) as resp:
                headers, payload = resp.headers, resp.read()
        except urllib.error.HTTPError as exc:
            payload = exc.read()
            try:
                err = json.loads(payload)
                raise ServiceError(err["error"], err.get("message", ""), exc.code) from None
            except (ValueError, KeyError, TypeError):
                raise TransportError(f"HTTP {exc.code} with unparseable body") from None
        except (urllib.error.URLError, OSError) as exc:
            raise TransportError(str(exc)) from exc
        version = headers.get(VERSION_HEADER)
        if version != PROTOCOL_VERSION:
            raise ProtocolVersionError(f"server speaks protocol {version!r}, expected {PROTOCOL_VERSION}")
        try:
            return json.loads(payload)
        except ValueError as exc:
            raise TransportError("response is not JSON") from exc

    def health(self) -> dict:
        return self._request("GET", "/v1/health")

    def verify(self, a, b) -> MatchVerdict:
        resp = self._request("POST", "/v1/verify",
                             {"image_a": encode_png_b64(a), "image_b": encode_png_b64(b)})
        try:
            return MatchVerdict(float(resp["confidence"]), float(resp["threshold"]), bool(resp["matched"]))
        except (KeyError, TypeError, ValueError) as exc:
            raise TransportError(f"invalid verdict payload: {exc}") from exc

    def recognize(self, img, top_n: int = 1) -> list[tuple]:
        resp = self._request("POST", "/v1/recognize", {"image": encode_png_b64(img), "top_n": top_n})
        return [(c["label"], float(c["confidence"])) for c in resp["candidates"]]

    def predict(self, img):
        return self.recognize(img, 1)[0][0]

    def top_n(self, img, n: int) -> list:
        return [label for label, _ in self.recognize(img, n)]


def query_verify(client: VictimClient, img_a, img_b) -> MatchVerdict:
    return client.verify(img_a, img_b)
