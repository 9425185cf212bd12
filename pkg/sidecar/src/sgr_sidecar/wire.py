"""Canonical JSON wire encoding, mirrored from the client side.

Bodies are ``{"op": ..., "payload": ...}`` in, ``{"ok": true, "result": ...}``
or ``{"error": ..., "ok": false}`` out; JSON is sorted-key, compact, UTF-8.
Byte-level compatibility is pinned by the shared golden fixtures.
"""

from __future__ import annotations

import base64
import io
import json

import numpy as np
from PIL import Image

WIRE_OPS = ("embed_image", "embed_text", "visual_encode", "describe", "chat", "health")


class WireError(Exception):
    pass


def canonical_json_bytes(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=False).encode("utf-8")


def decode_request(body: bytes) -> tuple[str, dict]:
    try:
        doc = json.loads(body.decode("utf-8"))
        op, payload = doc["op"], doc["payload"]
    except (ValueError, KeyError, TypeError) as exc:
        raise WireError(f"malformed wire request: {exc!r}") from exc
    if op not in WIRE_OPS:
        raise WireError(f"unknown wire op {op!r}")
    return op, payload


def encode_response(result=None, error: str | None = None) -> bytes:
    if error is not None:
        return canonical_json_bytes({"error": error, "ok": False})
    return canonical_json_bytes({"ok": True, "result": result})


def png_b64_to_image(data: str) -> np.ndarray:
    raw = base64.b64decode(data.encode("ascii"))
    with Image.open(io.BytesIO(raw)) as img:
        return np.asarray(img.convert("RGB"), dtype=np.uint8)
