"""Mock model-serving HTTP endpoint backed by a synthetic oracle.

``POST /model/predict`` takes a multipart form with a PNG in field ``image`` and
answers ``{"status": "ok", "predictions": [{"probability": s}]}``.
``GET /health`` answers ``{"status": "ok"}``.
"""

from __future__ import annotations

import json
import logging
import random
import re
import signal
import socketserver
import threading
import time
from dataclasses import dataclass

from .imaging import decode_png
from .oracle import parse_oracle_spec
from .png import PngError

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class ServerConfig:
    host: str = "127.0.0.1"
    port: int = 5000
    oracle: str = "planted:base=0.97,trigger=255-255-0,w=0.5,delta=-0.95"
    latency: float = 0.0
    failure_rate: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.failure_rate <= 1.0:
            raise ValueError("failure_rate must lie in [0, 1]")
        if self.latency < 0:
            raise ValueError("latency must be non-negative")
        parse_oracle_spec(self.oracle)


def extract_form_file(content_type: str, body: bytes, field: str = "image") -> bytes | None:
    """Return the payload of multipart field ``field``, or None if absent."""
    ctype, _, params = content_type.partition(";")
    if ctype.strip().lower() != "multipart/form-data":
        return None
    boundary = None
    for param in params.split(";"):
        key, _, value = param.strip().partition("=")
        if key.lower() == "boundary":
            boundary = value.strip().strip('"')
    if not boundary:
        return None
    delimiter = b"--" + boundary.encode("latin-1")
    for part in body.split(delimiter)[1:]:
        if part.startswith(b"--"):
            break
        head, sep, payload = part.partition(b"\r\n\r\n")
        if not sep:
            continue
        for line in head.decode("latin-1").split("\r\n"):
            name, _, value = line.partition(":")
            if name.strip().lower() != "content-disposition":
                continue
            names = re.findall(r';\s*name="([^"]*)"', value) or re.findall(r";\s*name=([^;\s]+)", value)
            if names and names[0] == field:
                return payload[:-2] if payload.endswith(b"\r\n") else payload
    return None


_REASONS = {200: "OK", 400: "Bad Request", 404: "Not Found", 405: "Method Not Allowed",
            411: "Length Required", 413: "Payload Too Large", 503: "Service Unavailable"}
MAX_BODY = 16 * 1024 * 1024


class _BadRequest(Exception):
    pass


class _Handler(socketserver.StreamRequestHandler):
    """Small HTTP/1.1 keep-alive handler.

    The standard library handler parses headers through the email package,
    which dominates the cost of a request at this payload size.
    """

    server: "ModelServer"
    disable_nagle_algorithm = True

    def handle(self):
        while True:
            try:
                request = self._read_request()
            except _BadRequest as exc:
                self._reply(400, {"status": "error", "message": str(exc)}, close=True)
                return
            except (ConnectionError, TimeoutError):
                return
            if request is None:
                return
            method, path, headers, body = request
            close = headers.get("connection", "").lower() == "close"
            status, payload = self.server.dispatch(method, path, headers, body)
            self._reply(status, payload, close=close)
            if close:
                return

    def _read_request(self):
        line = self.rfile.readline(65537)
        while line in (b"\r\n", b"\n"):
            line = self.rfile.readline(65537)
        if not line:
            return None
        parts = line.decode("latin-1").split()
        if len(parts) != 3 or not parts[2].startswith("HTTP/"):
            raise _BadRequest(f"malformed request line {line[:80]!r}")
        method, path, _ = parts
        headers = {}
        while True:
            h = self.rfile.readline(65537)
            if not h:
                raise ConnectionError("connection closed inside headers")
            if h in (b"\r\n", b"\n"):
                break
            name, sep, value = h.decode("latin-1").partition(":")
            if not sep:
                raise _BadRequest(f"malformed header line {h[:80]!r}")
            headers[name.strip().lower()] = value.strip()
        if "chunked" in headers.get("transfer-encoding", "").lower():
            raise _BadRequest("chunked request bodies are not supported")
        try:
            length = int(headers.get("content-length", "0"))
        except ValueError:
            raise _BadRequest("invalid Content-Length") from None
        if length < 0 or length > MAX_BODY:
            raise _BadRequest("unacceptable Content-Length")
        body = self.rfile.read(length) if length else b""
        if len(body) != length:
            raise ConnectionError("connection closed inside body")
        return method, path, headers, body

    def _reply(self, status: int, payload: dict, close: bool = False) -> None:
        body = json.dumps(payload).encode()
        head = (
            f"HTTP/1.1 {status} {_REASONS.get(status, 'Error')}\r\n"
            "Content-Type: application/json\r\n"
            f"Content-Length: {len(body)}\r\n"
            + ("Connection: close\r\n" if close else "")
            + "\r\n"
        ).encode("latin-1")
        try:
            self.wfile.write(head + body)
        except (ConnectionError, TimeoutError):
            pass


class ModelServer(socketserver.ThreadingTCPServer):
    daemon_threads = True
    allow_reuse_address = True

    def __init__(self, config: ServerConfig):
        self.config = config
        self.oracle = parse_oracle_spec(config.oracle)
        self._rng = random.Random(config.seed)
        self._rng_lock = threading.Lock()
        self._thread: threading.Thread | None = None
        super().__init__((config.host, config.port), _Handler)

    def dispatch(self, method: str, path: str, headers: dict, body: bytes) -> tuple[int, dict]:
        path = path.split("?", 1)[0]
        if path == "/health":
            if method != "GET":
                return 405, {"status": "error", "message": "use GET"}
            return 200, {"status": "ok"}
        if path != "/model/predict":
            return 404, {"status": "error", "message": "not found"}
        if method != "POST":
            return 405, {"status": "error", "message": "use POST"}
        if self.config.latency:
            time.sleep(self.config.latency)
        if self.should_fail():
            return 503, {"status": "error", "message": "injected failure"}
        data = extract_form_file(headers.get("content-type", ""), body)
        if data is None:
            return 400, {"status": "error", "message": "missing multipart field 'image'"}
        try:
            image = decode_png(data)
        except PngError as exc:
            return 400, {"status": "error", "message": str(exc)}
        return 200, {"status": "ok", "predictions": [{"probability": self.oracle.score(image)}]}

    def should_fail(self) -> bool:
        if not self.config.failure_rate:
            return False
        with self._rng_lock:
            return self._rng.random() < self.config.failure_rate

    @property
    def url(self) -> str:
        host, port = self.server_address[:2]
        return f"http://{host}:{port}"

    @property
    def predict_url(self) -> str:
        return self.url + "/model/predict"

    def start(self) -> "ModelServer":
        self._thread = threading.Thread(
            target=self.serve_forever, kwargs={"poll_interval": 0.05}, daemon=True
        )
        self._thread.start()
        return self

    def stop(self) -> None:
        self.shutdown()
        self.server_close()
        if self._thread is not None:
            self._thread.join()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.stop()


def serve(config: ServerConfig) -> ModelServer:
    """Bind and start serving on a background thread; port 0 picks a free port."""
    return ModelServer(config).start()


def serve_forever(config: ServerConfig) -> None:
    """Blocking variant with graceful shutdown on SIGINT/SIGTERM."""
    server = ModelServer(config)
    stop = threading.Event()

    def _handle(signum, frame):
        stop.set()

    signal.signal(signal.SIGINT, _handle)
    signal.signal(signal.SIGTERM, _handle)
    server.start()
    log.info("serving %s on %s", config.oracle, server.predict_url)
    try:
        stop.wait()
    finally:
        server.stop()
