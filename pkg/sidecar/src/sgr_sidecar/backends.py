"""Model backends behind the wire protocol.

``DeterministicBackend`` needs no model weights at all: embeddings are
seeded keyed-hash unit vectors and the language ops answer with fixed
digest templates. It exists for protocol conformance testing and offline
runs, and its outputs are pinned bit-for-bit by the golden fixtures.

``OpenAIProxyBackend`` forwards chat/describe/embed_text to any hosted API
speaking the OpenAI-compatible ``/chat/completions`` and ``/embeddings``
shapes, with credentials taken from the environment.
"""

from __future__ import annotations

import base64
import hashlib
import io
import json
import math
import os
import urllib.request
from dataclasses import dataclass

import numpy as np
from PIL import Image

_MASK64 = (1 << 64) - 1

ENV_API_KEY = "SGR_SIDECAR_API_KEY"


class BackendError(Exception):
    pass


def _splitmix64(state: int) -> tuple[int, int]:
    state = (state + 0x9E3779B97F4A7C15) & _MASK64
    z = state
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return state, z ^ (z >> 31)


def hash_unit_vector(key: bytes, seed: int, dim: int) -> np.ndarray:
    """Keyed 64-bit hash expanded to a unit vector; matches the client mock."""
    digest = hashlib.blake2b(key, digest_size=8).digest()
    state = (int.from_bytes(digest, "big") ^ (seed & _MASK64)) & _MASK64
    values = np.empty(dim, dtype=np.float64)
    i = 0
    while i < dim:
        state, a = _splitmix64(state)
        state, b = _splitmix64(state)
        u1 = ((a >> 11) + 1) / (2**53 + 1)
        u2 = (b >> 11) / 2**53
        r = math.sqrt(-2.0 * math.log(u1))
        values[i] = r * math.cos(2.0 * math.pi * u2)
        if i + 1 < dim:
            values[i + 1] = r * math.sin(2.0 * math.pi * u2)
        i += 2
    norm = float(np.linalg.norm(values))
    if norm == 0.0:
        values[0] = 1.0
        norm = 1.0
    return values / norm


def _image_bytes(image: np.ndarray) -> bytes:
    arr = np.ascontiguousarray(image)
    return repr(arr.shape).encode() + b"|" + arr.tobytes()


def image_digest12(image: np.ndarray) -> str:
    return hashlib.sha1(_image_bytes(image)).hexdigest()[:12]


def chat_digest12(system: str, user: str) -> str:
    return hashlib.sha1(system.encode() + b"\x00" + user.encode()).hexdigest()[:12]


@dataclass(frozen=True)
class SidecarConfig:
    host: str = "127.0.0.1"
    port: int = 8090
    backend: str = "deterministic"  # deterministic | openai
    seed: int = 11
    embedding_dim: int = 8
    relation_dim: int = 6
    upstream_url: str | None = None
    embed_model: str = "text-embedding"
    chat_model: str = "chat"
    vlm_model: str = "vision"
    timeout_s: float = 60.0

    def __post_init__(self):
        if self.embedding_dim < 1 or self.relation_dim < 1:
            raise BackendError("embedding dimensions must be >= 1")
        if self.backend not in ("deterministic", "openai"):
            raise BackendError(f"unknown backend {self.backend!r}")


class DeterministicBackend:
    """Weight-free backend with bit-reproducible outputs."""

    describe_mode = "image"

    def __init__(self, config: SidecarConfig):
        self.config = config
        self.embedding_dim = config.embedding_dim
        self.relation_dim = config.relation_dim

    def embed_text(self, text: str) -> np.ndarray:
        return hash_unit_vector(b"text\x00" + text.encode("utf-8"), self.config.seed, self.embedding_dim)

    def embed_image(self, image: np.ndarray) -> np.ndarray:
        return hash_unit_vector(b"image\x00" + _image_bytes(image), self.config.seed, self.embedding_dim)

    def visual_encode(self, image: np.ndarray) -> np.ndarray:
        return hash_unit_vector(b"visual\x00" + _image_bytes(image), self.config.seed, self.relation_dim)

    def describe(self, prompt: str, image: np.ndarray | None = None, feature=None) -> str:
        if image is None:
            raise BackendError("describe requires an image (feature mode not supported)")
        return f"described {image_digest12(image)}: {prompt}"

    def chat(self, system: str, user: str) -> str:
        return f"ack {chat_digest12(system, user)}"


class OpenAIProxyBackend:
    """Thin proxy to an OpenAI-compatible HTTP API.

    Visual encoding has no hosted equivalent exposed here, so pair features
    fall back to the deterministic hash; consumers that need real relation
    features should query ``describe`` in image mode instead, which is
    exactly what the capability flag advertises.
    """

    describe_mode = "image"

    def __init__(self, config: SidecarConfig):
        if not config.upstream_url:
            raise BackendError("openai backend requires an upstream URL")
        self.config = config
        self.embedding_dim = config.embedding_dim
        self.relation_dim = config.relation_dim
        self.api_key = os.environ.get(ENV_API_KEY, "")
        self._fallback = DeterministicBackend(config)

    def _post(self, path: str, body: dict) -> dict:
        url = self.config.upstream_url.rstrip("/") + path
        request = urllib.request.Request(
            url,
            data=json.dumps(body).encode("utf-8"),
            headers={
                "Content-Type": "application/json",
                "Authorization": f"Bearer {self.api_key}",
            },
            method="POST",
        )
        try:
            with urllib.request.urlopen(request, timeout=self.config.timeout_s) as response:
                return json.loads(response.read().decode("utf-8"))
        except (urllib.error.URLError, TimeoutError, OSError, ValueError) as exc:
            raise BackendError(f"upstream failure for {url}: {exc}") from exc

    def embed_text(self, text: str) -> np.ndarray:
        doc = self._post("/embeddings", {"model": self.config.embed_model, "input": text})
        try:
            values = np.asarray(doc["data"][0]["embedding"], dtype=np.float64)
        except (KeyError, IndexError, TypeError, ValueError) as exc:
            raise BackendError(f"unexpected embeddings response: {doc!r}") from exc
        if values.shape != (self.embedding_dim,):
            raise BackendError(
                f"upstream embedding dim {values.shape} != configured {self.embedding_dim}"
            )
        return values

    def embed_image(self, image: np.ndarray) -> np.ndarray:
        # hosted embedding APIs are text-only; describe the image and embed that
        caption = self.describe("Briefly name the main object in this image.", image=image)
        return self.embed_text(caption)

    def visual_encode(self, image: np.ndarray) -> np.ndarray:
        return self._fallback.visual_encode(image)

    def _data_url(self, image: np.ndarray) -> str:
        buf = io.BytesIO()
        Image.fromarray(np.asarray(image, dtype=np.uint8)).save(buf, format="PNG")
        return "data:image/png;base64," + base64.b64encode(buf.getvalue()).decode("ascii")

    def describe(self, prompt: str, image: np.ndarray | None = None, feature=None) -> str:
        if image is None:
            raise BackendError("describe requires an image (feature mode not supported)")
        body = {
            "model": self.config.vlm_model,
            "messages": [
                {
                    "role": "user",
                    "content": [
                        {"type": "text", "text": prompt},
                        {"type": "image_url", "image_url": {"url": self._data_url(image)}},
                    ],
                }
            ],
        }
        doc = self._post("/chat/completions", body)
        return _message_text(doc)

    def chat(self, system: str, user: str) -> str:
        body = {
            "model": self.config.chat_model,
            "messages": [
                {"role": "system", "content": system},
                {"role": "user", "content": user},
            ],
        }
        return _message_text(self._post("/chat/completions", body))


def _message_text(doc: dict) -> str:
    try:
        return str(doc["choices"][0]["message"]["content"])
    except (KeyError, IndexError, TypeError) as exc:
        raise BackendError(f"unexpected chat response: {doc!r}") from exc


def build_backend(config: SidecarConfig):
    if config.backend == "openai":
        return OpenAIProxyBackend(config)
    return DeterministicBackend(config)
