"""Source-mask resolution: mask files, click points, or text phrases.

Click and phrase specs are delegated to an external promptable-segmentation
service over a minimal HTTP contract (multipart image + JSON spec in,
run-length-encoded mask out), so the heavy segmentation model never lives in
this process. A deterministic stub app is shipped for tests and offline use.
Responses are cached by (image digest, spec digest); repeated resolutions of
the same request make no network calls.
"""

from __future__ import annotations

import hashlib
import io
import json
import threading
import time
from dataclasses import dataclass, field

import httpx
import numpy as np
from fastapi import FastAPI, File, Form, UploadFile
from PIL import Image

from .errors import EmptyMaskError, SegmentationError
from .images import load_image, to_uint8
from .masks import SpatialMask


@dataclass(frozen=True)
class MaskSpec:
    """One of: a mask file path, click points (x, y, positive), or a text phrase."""

    kind: str  # "file" | "clicks" | "text"
    path: str | None = None
    clicks: tuple[tuple[int, int, bool], ...] = ()
    phrase: str | None = None

    def __post_init__(self):
        if self.kind == "file":
            if not self.path:
                raise ValueError("file mask spec needs a path")
        elif self.kind == "clicks":
            if not self.clicks:
                raise ValueError("clicks mask spec needs at least one click")
        elif self.kind == "text":
            if not self.phrase or not self.phrase.strip():
                raise ValueError("text mask spec needs a nonempty phrase")
        else:
            raise ValueError(f"unknown mask spec kind {self.kind!r}")

    @classmethod
    def from_file(cls, path) -> "MaskSpec":
        return cls(kind="file", path=str(path))

    @classmethod
    def from_clicks(cls, clicks) -> "MaskSpec":
        return cls(kind="clicks", clicks=tuple((int(x), int(y), bool(p)) for x, y, p in clicks))

    @classmethod
    def from_phrase(cls, phrase: str) -> "MaskSpec":
        return cls(kind="text", phrase=phrase)

    def digest(self) -> str:
        payload = {"kind": self.kind, "path": self.path, "clicks": list(self.clicks), "phrase": self.phrase}
        return hashlib.sha256(json.dumps(payload, sort_keys=True).encode()).hexdigest()

    def to_json(self) -> dict:
        return {"kind": self.kind, "path": self.path, "clicks": [list(c) for c in self.clicks], "phrase": self.phrase}

    @classmethod
    def from_json(cls, payload: dict) -> "MaskSpec":
        return cls(
            kind=payload["kind"],
            path=payload.get("path"),
            clicks=tuple((int(x), int(y), bool(p)) for x, y, p in payload.get("clicks") or ()),
            phrase=payload.get("phrase"),
        )


# ----------------------------------------------------------------- RLE codec


def encode_rle(bits: np.ndarray) -> dict:
    """Row-major run-length encoding; runs alternate 0s/1s starting with 0s."""
    flat = np.asarray(bits, dtype=bool).reshape(-1)
    counts: list[int] = []
    value = False
    run = 0
    for bit in flat:
        if bit == value:
            run += 1
        else:
            counts.append(run)
            value = bit
            run = 1
    counts.append(run)
    return {"size": list(np.asarray(bits).shape), "counts": counts}


def decode_rle(payload: dict) -> np.ndarray:
    h, w = payload["size"]
    flat = np.zeros(h * w, dtype=bool)
    pos = 0
    value = False
    for run in payload["counts"]:
        if value:
            flat[pos : pos + run] = True
        pos += run
        value = not value
    if pos != h * w:
        raise SegmentationError(f"RLE covers {pos} pixels, mask has {h * w}")
    return flat.reshape(h, w)


# -------------------------------------------------------------------- client


@dataclass
class SegmentationClient:
    """HTTP client for the promptable-segmentation service.

    Safe for concurrent use; the response cache is internally synchronized.
    ``client_factory`` lets tests swap in an in-process ASGI test client.
    """

    base_url: str = "http://127.0.0.1:8765"
    client_factory: "callable | None" = None
    retries: int = 2
    retry_wait_s: float = 0.2
    timeout_s: float = 30.0
    _cache: dict = field(default_factory=dict, repr=False)
    _lock: threading.Lock = field(default_factory=threading.Lock, repr=False)
    _call_count: int = 0

    def _client(self) -> httpx.Client:
        if self.client_factory is not None:
            return self.client_factory()
        return httpx.Client(base_url=self.base_url, timeout=self.timeout_s)

    def segment(self, image: np.ndarray, spec: MaskSpec) -> SpatialMask:
        key = (hashlib.sha256(to_uint8(image).tobytes()).hexdigest(), spec.digest())
        with self._lock:
            if key in self._cache:
                return self._cache[key]
        payload = self._request(image, spec)
        bits = decode_rle(payload)
        if not bits.any():
            raise EmptyMaskError("segmentation service returned an empty mask")
        mask = SpatialMask.from_binary(bits)
        with self._lock:
            self._cache[key] = mask
        return mask

    def _request(self, image: np.ndarray, spec: MaskSpec) -> dict:
        buf = io.BytesIO()
        Image.fromarray(to_uint8(image), "RGB").save(buf, format="PNG")
        files = {"image": ("image.png", buf.getvalue(), "image/png")}
        data = {"spec": json.dumps(spec.to_json())}
        last_error: Exception | None = None
        for attempt in range(self.retries + 1):
            try:
                with self._client() as client:
                    response = client.post("/segment", files=files, data=data)
                self._call_count += 1
                if response.status_code != 200:
                    raise SegmentationError(
                        f"segmentation service returned {response.status_code}: {response.text[:200]}"
                    )
                return response.json()
            except (httpx.TransportError, httpx.TimeoutException) as exc:
                last_error = exc
                if attempt < self.retries:
                    time.sleep(self.retry_wait_s)
        raise SegmentationError(f"segmentation service unreachable: {last_error}")


def resolve_mask(spec: MaskSpec, client: SegmentationClient | None = None, image=None) -> SpatialMask:
    """Resolve a mask spec to a full-resolution mask.

    File specs load bit-exact (nonzero pixel = 1) and must already match the
    image resolution; click/text specs need a configured segmentation client
    and the image itself.
    """
    if spec.kind == "file":
        mask = SpatialMask.from_png(spec.path)
        if image is not None:
            expected = load_image(image).shape[:2]
            if mask.resolution != expected:
                raise SegmentationError(
                    f"mask file resolution {mask.resolution} != image resolution {expected}"
                )
        return mask
    if client is None:
        raise SegmentationError(f"{spec.kind!r} mask spec requires a segmentation client")
    if image is None:
        raise SegmentationError(f"{spec.kind!r} mask spec requires the image")
    arr = load_image(image)
    if spec.kind == "clicks":
        h, w = arr.shape[:2]
        for x, y, _ in spec.clicks:
            if not (0 <= x < w and 0 <= y < h):
                raise SegmentationError(f"click ({x}, {y}) outside image bounds {w}x{h}")
    return client.segment(arr, spec)


# ---------------------------------------------------------------- stub app


def create_stub_segmentation_app():
    """Deterministic in-process stand-in for the segmentation service.

    Clicks produce a disk (radius = min(H, W) // 8) around each positive
    click, with negative-click disks punched out; phrases produce a centered
    box whose size is derived from the phrase hash. Fully deterministic, so
    recorded fixtures replay bit-exact.
    """
    app = FastAPI(title="segmentation-stub")

    @app.post("/segment")
    async def segment(image: UploadFile = File(...), spec: str = Form(...)):
        raw = await image.read()
        with Image.open(io.BytesIO(raw)) as img:
            w, h = img.size
        parsed = MaskSpec.from_json(json.loads(spec))
        bits = np.zeros((h, w), dtype=bool)
        rr, cc = np.mgrid[0:h, 0:w]
        if parsed.kind == "clicks":
            radius = max(min(h, w) // 8, 2)
            for x, y, positive in parsed.clicks:
                disk = (rr - y) ** 2 + (cc - x) ** 2 <= radius**2
                bits = bits | disk if positive else bits & ~disk
        else:
            digest = hashlib.sha256((parsed.phrase or "").lower().encode()).digest()
            frac = 0.25 + (digest[0] / 255.0) * 0.25
            bh, bw = max(int(h * frac), 1), max(int(w * frac), 1)
            top, left = (h - bh) // 2, (w - bw) // 2
            bits[top : top + bh, left : left + bw] = True
        payload = encode_rle(bits)
        payload["confidence"] = 0.9
        return payload

    return app


def stub_client() -> SegmentationClient:
    """Client wired to an in-process stub app; no sockets involved."""
    from fastapi.testclient import TestClient

    app = create_stub_segmentation_app()
    return SegmentationClient(base_url="http://segmentation-stub", client_factory=lambda: TestClient(app))
