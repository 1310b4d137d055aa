"""Classifier oracles: anything with ``score(image) -> float`` in ``[0, 1]``.

A score of 1 means mitosis-like and 0 means normal-like.  The HTTP oracle talks
to a model-serving endpoint; the synthetic oracles stand in for it offline.
"""

from __future__ import annotations

import hashlib
import http.client
import json
import logging
import math
import os
import socket
import threading
import time
import urllib.parse
from collections import OrderedDict
from dataclasses import dataclass
from typing import Callable, Optional, Protocol

import numpy as np

from .imaging import RgbImage, encode_png

log = logging.getLogger(__name__)

DEFAULT_ENDPOINT = "http://localhost:5000/model/predict"
DEFAULT_FIELD_PATH = "predictions/0/probability"


class Oracle(Protocol):
    def score(self, image: RgbImage) -> float: ...


class OracleError(RuntimeError):
    """Base class for every oracle failure."""


class TransportError(OracleError):
    """The request never produced an HTTP response."""


class OracleTimeout(TransportError):
    pass


class ConnectionFailed(TransportError):
    pass


class HttpStatusError(OracleError):
    def __init__(self, status: int, body: str = ""):
        super().__init__(f"HTTP {status}: {body[:200]}")
        self.status = status
        self.body = body


class ResponseParseError(OracleError):
    """Body was not valid JSON."""


class MissingFieldError(OracleError):
    pass


class NonNumericScoreError(OracleError):
    pass


class ScoreRangeError(OracleError):
    pass


def check_score(value) -> float:
    value = float(value)
    if not 0.0 <= value <= 1.0:
        raise ScoreRangeError(f"score {value!r} outside [0, 1]")
    return value


def extract_field(payload, field_path: str):
    """Follow a slash-delimited path of object keys and list indices."""
    node = payload
    for part in [p for p in field_path.split("/") if p]:
        if isinstance(node, dict):
            if part not in node:
                raise MissingFieldError(f"key {part!r} missing along {field_path!r}")
            node = node[part]
        elif isinstance(node, list):
            try:
                node = node[int(part)]
            except (ValueError, IndexError):
                raise MissingFieldError(f"index {part!r} missing along {field_path!r}") from None
        else:
            raise MissingFieldError(f"cannot descend into {type(node).__name__} at {part!r}")
    return node


def parse_score(body: bytes | str, field_path: str = DEFAULT_FIELD_PATH) -> float:
    try:
        payload = json.loads(body)
    except (ValueError, UnicodeDecodeError) as exc:
        raise ResponseParseError(f"response is not JSON: {exc}") from None
    value = extract_field(payload, field_path)
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise NonNumericScoreError(f"value at {field_path!r} is {value!r}")
    if not math.isfinite(value):
        raise NonNumericScoreError(f"value at {field_path!r} is not finite")
    return check_score(value)


@dataclass
class OracleStats:
    total_queries: int = 0
    cache_hits: int = 0
    total_latency: float = 0.0
    purity_violations: int = 0


# -- synthetic oracles ---------------------------------------------------------


@dataclass(frozen=True)
class ConstantOracle:
    value: float

    def __post_init__(self):
        check_score(self.value)

    def score(self, image: RgbImage) -> float:
        return float(self.value)


@dataclass(frozen=True)
class PlantedOracle:
    """Score jumps by ``delta`` when some pixel comes close to ``trigger``.

    Closeness is ``max(0, 1 - L1(color, trigger) / (3 * 255 * width))``, maxed
    over all pixels, so the response surface has a smooth basin around the
    trigger colour that an optimiser can descend.
    """

    base: float = 0.97
    trigger: tuple[int, int, int] = (255, 255, 0)
    width: float = 0.5
    delta: float = -0.95

    def __post_init__(self):
        check_score(self.base)
        if not self.width > 0:
            raise ValueError("width must be positive")
        object.__setattr__(self, "trigger", tuple(int(c) for c in self.trigger))

    def proximity(self, image: RgbImage) -> float:
        dist = np.abs(image.pixels.astype(np.int32) - np.array(self.trigger, dtype=np.int32))
        nearest = int(dist.sum(axis=2).min())
        return max(0.0, 1.0 - nearest / (3 * 255 * self.width))

    def score(self, image: RgbImage) -> float:
        return min(1.0, max(0.0, self.base + self.delta * self.proximity(image)))


@dataclass(frozen=True)
class DarknessOracle:
    """Logistic function of mean pixel darkness; barely moved by one pixel."""

    threshold: float = 0.5
    steepness: float = 10.0

    def score(self, image: RgbImage) -> float:
        darkness = 1.0 - float(image.pixels.sum(axis=2, dtype=np.int64).mean()) / 765.0
        return 1.0 / (1.0 + math.exp(-self.steepness * (darkness - self.threshold)))


class FunctionOracle:
    """Wrap a plain ``image -> float`` callable, validating its range."""

    def __init__(self, fn: Callable[[RgbImage], float]):
        self.fn = fn

    def score(self, image: RgbImage) -> float:
        return check_score(self.fn(image))


def _parse_params(text: str) -> dict[str, str]:
    params = {}
    for item in filter(None, (t.strip() for t in text.split(","))):
        if "=" not in item:
            raise ValueError(f"expected key=value, got {item!r}")
        key, value = item.split("=", 1)
        params[key.strip()] = value.strip()
    return params


def parse_oracle_spec(spec: str):
    """Build a synthetic oracle from text such as
    ``planted:base=0.97,trigger=255-255-0,w=0.5,delta=-0.95``,
    ``darkness:threshold=0.5,steepness=10`` or ``constant:0.42``.
    """
    kind, _, rest = spec.partition(":")
    kind = kind.strip().lower()
    if kind == "constant":
        if rest and "=" not in rest:
            return ConstantOracle(float(rest))
        params = _parse_params(rest)
        return ConstantOracle(float(params.pop("value", 0.5)))
    params = _parse_params(rest)
    if kind == "planted":
        kwargs = {}
        if "base" in params:
            kwargs["base"] = float(params.pop("base"))
        if "trigger" in params:
            kwargs["trigger"] = tuple(int(c) for c in params.pop("trigger").split("-"))
        if "w" in params or "width" in params:
            kwargs["width"] = float(params.pop("w", None) or params.pop("width"))
        if "delta" in params:
            kwargs["delta"] = float(params.pop("delta"))
        oracle = PlantedOracle(**kwargs)
    elif kind == "darkness":
        oracle = DarknessOracle(
            threshold=float(params.pop("threshold", 0.5)),
            steepness=float(params.pop("steepness", 10.0)),
        )
    else:
        raise ValueError(f"unknown oracle kind {kind!r}")
    if params:
        raise ValueError(f"unknown {kind} parameters: {sorted(params)}")
    return oracle


# -- HTTP ----------------------------------------------------------------------


class HttpOracle:
    """POSTs the PNG-encoded image as multipart field ``image`` and reads the
    score at ``field_path`` in the JSON reply.

    Transport failures and 5xx/429 replies are retried with exponential
    backoff; anything that arrived but could not be parsed is not.  Each
    thread keeps its own persistent connection.
    """

    def __init__(
        self,
        endpoint: Optional[str] = None,
        field_path: Optional[str] = None,
        timeout: float = 30.0,
        retries: int = 2,
        backoff: float = 0.1,
        max_parallel: int = 4,
        form_field: str = "image",
        png_level: int = 0,
    ):
        self.endpoint = endpoint or os.environ.get("ONEPIXEL_ENDPOINT", DEFAULT_ENDPOINT)
        self.field_path = field_path or os.environ.get("ONEPIXEL_FIELD_PATH", DEFAULT_FIELD_PATH)
        url = urllib.parse.urlsplit(self.endpoint)
        if url.scheme not in ("http", "https") or not url.hostname:
            raise ValueError(f"unsupported endpoint {self.endpoint!r}")
        self._url = url
        self._path = (url.path or "/") + (f"?{url.query}" if url.query else "")
        self.timeout = timeout
        self.retries = retries
        self.backoff = backoff
        self.form_field = form_field
        self.png_level = png_level
        self.stats = OracleStats()
        self._slots = threading.BoundedSemaphore(max_parallel)
        self._local = threading.local()
        self._lock = threading.Lock()

    def _connection(self) -> http.client.HTTPConnection:
        conn = getattr(self._local, "conn", None)
        if conn is None:
            cls = http.client.HTTPSConnection if self._url.scheme == "https" else http.client.HTTPConnection
            conn = cls(self._url.hostname, self._url.port, timeout=self.timeout)
            self._local.conn = conn
        return conn

    def _drop_connection(self) -> None:
        conn = getattr(self._local, "conn", None)
        if conn is not None:
            conn.close()
            self._local.conn = None

    def score_bytes(self, image_bytes: bytes) -> float:
        start = time.perf_counter()
        attempt = 0
        try:
            while True:
                try:
                    with self._slots:
                        return self._post(image_bytes)
                except (TransportError, HttpStatusError) as exc:
                    retryable = isinstance(exc, TransportError) or (
                        exc.status >= 500 or exc.status == 429
                    )
                    if not retryable or attempt >= self.retries:
                        raise
                    delay = self.backoff * (2**attempt)
                    attempt += 1
                    log.debug("retry %d after %r (sleep %.3fs)", attempt, exc, delay)
                    time.sleep(delay)
        finally:
            with self._lock:
                self.stats.total_queries += 1
                self.stats.total_latency += time.perf_counter() - start

    def _post(self, image_bytes: bytes) -> float:
        body, content_type = multipart_body(self.form_field, image_bytes)
        headers = {"Content-Type": content_type, "Accept": "application/json"}
        conn = self._connection()
        try:
            conn.request("POST", self._path, body=body, headers=headers)
            resp = conn.getresponse()
            payload = resp.read()
        except (socket.timeout, TimeoutError) as exc:
            self._drop_connection()
            raise OracleTimeout(f"no response within {self.timeout}s: {exc}") from None
        except (OSError, http.client.HTTPException) as exc:
            self._drop_connection()
            raise ConnectionFailed(f"{self.endpoint}: {exc!r}") from None
        if resp.will_close:
            self._drop_connection()
        if resp.status >= 400:
            raise HttpStatusError(resp.status, payload.decode("utf-8", "replace"))
        return parse_score(payload, self.field_path)

    def score(self, image: RgbImage) -> float:
        return self.score_bytes(encode_png(image, self.png_level))


_BOUNDARY = "onepixel-form-boundary-7d1c4f"


def multipart_body(field: str, data: bytes, filename: str = "image.png") -> tuple[bytes, str]:
    head = (
        f"--{_BOUNDARY}\r\n"
        f'Content-Disposition: form-data; name="{field}"; filename="{filename}"\r\n'
        "Content-Type: image/png\r\n\r\n"
    ).encode()
    tail = f"\r\n--{_BOUNDARY}--\r\n".encode()
    return head + data + tail, f"multipart/form-data; boundary={_BOUNDARY}"


def http_score(
    endpoint: str,
    image_bytes: bytes,
    field_path: str = DEFAULT_FIELD_PATH,
    **kwargs,
) -> float:
    return HttpOracle(endpoint, field_path, **kwargs).score_bytes(image_bytes)


# -- caching -------------------------------------------------------------------


def image_key(image: RgbImage) -> bytes:
    h = hashlib.blake2b(digest_size=16)
    h.update(np.array(image.pixels.shape, dtype=np.int64).tobytes())
    h.update(image.pixels.tobytes())
    return h.digest()


class CachedOracle:
    """LRU memo in front of another oracle.

    With ``verify`` set, cache hits are re-queried and any disagreement with
    the stored score is counted in ``stats.purity_violations``.
    """

    def __init__(self, inner, capacity: int = 4096, verify: bool = False):
        if capacity < 1:
            raise ValueError("capacity must be at least 1")
        self.inner = inner
        self.capacity = capacity
        self.verify = verify
        self.stats = OracleStats()
        self._cache: OrderedDict[bytes, float] = OrderedDict()
        self._lock = threading.Lock()

    @property
    def inner_queries(self) -> int:
        return self.stats.total_queries - self.stats.cache_hits

    def score(self, image: RgbImage) -> float:
        key = image_key(image)
        with self._lock:
            self.stats.total_queries += 1
            if key in self._cache:
                self._cache.move_to_end(key)
                self.stats.cache_hits += 1
                cached = self._cache[key]
                hit = True
            else:
                hit = False
        if hit:
            if self.verify and self.inner.score(image) != cached:
                with self._lock:
                    self.stats.purity_violations += 1
                log.warning("oracle returned a different score for a cached image")
            return cached
        start = time.perf_counter()
        try:
            value = self.inner.score(image)
        finally:
            with self._lock:
                self.stats.total_latency += time.perf_counter() - start
        with self._lock:
            self._cache[key] = value
            self._cache.move_to_end(key)
            while len(self._cache) > self.capacity:
                self._cache.popitem(last=False)
        return value


def cached(inner, capacity: int = 4096, verify: bool = False) -> CachedOracle:
    return CachedOracle(inner, capacity, verify)


def planted_oracle(base_score=0.97, trigger_color=(255, 255, 0), color_width=0.5, effect=-0.95):
    return PlantedOracle(base_score, tuple(trigger_color), color_width, effect)
