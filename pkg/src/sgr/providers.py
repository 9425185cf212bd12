"""Model providers: image-text embedder, VLM visual encoder/descriptions, chat.

Every learned model sits behind the same duck-typed surface so the whole
system runs against deterministic mocks in tests and against a remote
process in production. Providers are immutable after construction and safe
to call from multiple threads.

Remote wire protocol (shared with any serving process): HTTP POST of a JSON
body ``{"op": ..., "payload": ...}`` to ``<endpoint>/<op>``, answered by
``{"ok": true, "result": ...}`` or ``{"ok": false, "error": ...}``. Images
travel as base64-encoded PNG. JSON is canonical: sorted keys, compact
separators, UTF-8.
"""

from __future__ import annotations

import base64
import hashlib
import io
import json
import math
import threading
import urllib.error
import urllib.request
from collections import Counter
from dataclasses import dataclass, field

import numpy as np
from PIL import Image

from .errors import ProviderError, TransportError

ENV_ENDPOINT = "SGR_PROVIDER_ENDPOINT"
ENV_TIMEOUT = "SGR_PROVIDER_TIMEOUT_S"

WIRE_OPS = ("embed_image", "embed_text", "visual_encode", "describe", "chat", "health")

DESCRIBE_FEATURE = "feature"
DESCRIBE_IMAGE = "image"

_MASK64 = (1 << 64) - 1


@dataclass(frozen=True)
class ProviderConfig:
    """How to construct a provider; ``seed`` only matters for mocks."""

    kind: str = "mock"  # "mock" | "remote"
    endpoint: str | None = None
    embedding_dim: int = 768
    relation_dim: int = 1024
    timeout_s: float = 30.0
    seed: int = 0
    max_retries: int = 2
    max_in_flight: int = 4
    describe_mode: str = DESCRIBE_FEATURE
    epsilon: float = 0.0
    chat_transcript: list | str | None = None
    describe_transcript: list | str | None = None

    def __post_init__(self):
        if self.kind not in ("mock", "remote"):
            raise ProviderError(f"unknown provider kind {self.kind!r}")
        if self.embedding_dim < 1 or self.relation_dim < 1:
            raise ProviderError("embedding dimensions must be >= 1")
        if self.kind == "remote" and not self.endpoint:
            raise ProviderError("remote provider requires an endpoint")


@dataclass
class ChatExchange:
    system_prompt: str
    user_prompt: str
    response: str


# ------------------------------------------------------- deterministic hashing


def _splitmix64(state: int) -> tuple[int, int]:
    state = (state + 0x9E3779B97F4A7C15) & _MASK64
    z = state
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return state, z ^ (z >> 31)


def _hash_unit_vector(key: bytes, seed: int, dim: int) -> np.ndarray:
    """Expand a keyed 64-bit hash into a unit vector of Gaussian-ish entries."""
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
    if norm == 0.0:  # unreachable in practice, but keep the contract total
        values[0] = 1.0
        norm = 1.0
    return values / norm


def feature_digest(vector) -> str:
    """Stable hex digest of a float vector, used to key describe transcripts."""
    arr = np.ascontiguousarray(np.asarray(vector, dtype=np.float64))
    return hashlib.sha1(arr.tobytes()).hexdigest()


def _image_bytes(image: np.ndarray) -> bytes:
    arr = np.ascontiguousarray(image)
    return repr(arr.shape).encode() + b"|" + arr.tobytes()


# -------------------------------------------------------------- scripted text


@dataclass
class ScriptEntry:
    """One scripted response; all specified ``*_contains`` patterns must match."""

    response: str
    system_contains: str | None = None
    user_contains: str | None = None
    prompt_contains: str | None = None
    feature_digest: str | None = None
    max_uses: int | None = None
    uses: int = field(default=0, compare=False)

    @classmethod
    def from_dict(cls, doc: dict) -> "ScriptEntry":
        allowed = {"response", "system_contains", "user_contains", "prompt_contains", "feature_digest", "max_uses"}
        unknown = set(doc) - allowed
        if unknown:
            raise ProviderError(f"transcript entry has unknown keys {sorted(unknown)}")
        return cls(**doc)


class ScriptedResponder:
    """Ordered transcript: the first matching entry with uses left answers."""

    def __init__(self, entries: list[ScriptEntry] | None, strict: bool = True):
        self.entries = list(entries or [])
        self.strict = strict

    def respond(self, *, system: str = "", user: str = "", prompt: str = "", digest: str = "") -> str:
        for entry in self.entries:
            if entry.max_uses is not None and entry.uses >= entry.max_uses:
                continue
            if entry.system_contains is not None and entry.system_contains not in system:
                continue
            if entry.user_contains is not None and entry.user_contains not in user:
                continue
            if entry.prompt_contains is not None and entry.prompt_contains not in prompt:
                continue
            if entry.feature_digest is not None and entry.feature_digest != digest:
                continue
            entry.uses += 1
            return entry.response
        if self.strict:
            raise ProviderError(
                "no transcript entry for request "
                f"(system={system[:60]!r}, user={user[:60]!r}, prompt={prompt[:60]!r})"
            )
        return ""


def load_transcript(source) -> list[ScriptEntry]:
    """Accepts an inline list of dicts or a path to a JSON file of them."""
    if source is None:
        return []
    if isinstance(source, (str,)):
        with open(source, "r", encoding="utf-8") as fh:
            source = json.load(fh)
    return [entry if isinstance(entry, ScriptEntry) else ScriptEntry.from_dict(entry) for entry in source]


# ------------------------------------------------------------------- the mock


class MockProvider:
    """Seeded, fully deterministic provider used by every test.

    Text embeds to a unit hash vector of the text. Images embed by looking
    for the most frequent exact palette color: a hit maps through
    ``color_labels`` to a label name whose anchor direction (by default the
    name's own text embedding) is returned, perturbed by ``epsilon`` times a
    per-image hash noise vector. Images without palette colors fall back to
    a content hash. ``describe`` and ``chat`` replay scripted transcripts.
    """

    def __init__(
        self,
        *,
        seed: int = 0,
        embedding_dim: int = 768,
        relation_dim: int = 1024,
        palette: dict[int, tuple[int, int, int]] | None = None,
        color_labels: dict[int, str] | None = None,
        anchors: dict[str, np.ndarray] | None = None,
        epsilon: float = 0.0,
        describe_mode: str = DESCRIBE_FEATURE,
        chat_script: list[ScriptEntry] | None = None,
        describe_script: list[ScriptEntry] | None = None,
        strict: bool = True,
    ):
        if embedding_dim < 2:
            raise ProviderError("mock embedder needs dim >= 2")
        if describe_mode not in (DESCRIBE_FEATURE, DESCRIBE_IMAGE):
            raise ProviderError(f"unknown describe_mode {describe_mode!r}")
        self.seed = seed
        self.embedding_dim = embedding_dim
        self.relation_dim = relation_dim
        self.palette = dict(palette or {})
        self.color_labels = dict(color_labels or {})
        self.epsilon = float(epsilon)
        self.describe_mode = describe_mode
        self._anchors = {k: np.asarray(v, dtype=np.float64) for k, v in (anchors or {}).items()}
        self._chat = ScriptedResponder(chat_script, strict=strict)
        self._describe = ScriptedResponder(describe_script, strict=strict)
        self._text_cache: dict[str, np.ndarray] = {}
        self.calls: Counter = Counter()

    # embeddings

    def embed_text(self, text: str) -> np.ndarray:
        self.calls["embed_text"] += 1
        cached = self._text_cache.get(text)
        if cached is None:
            cached = _hash_unit_vector(b"text\x00" + text.encode("utf-8"), self.seed, self.embedding_dim)
            self._text_cache[text] = cached
        return cached.copy()

    def _anchor(self, name: str) -> np.ndarray:
        direction = self._anchors.get(name)
        if direction is None:
            direction = self.embed_text(name)
            self.calls["embed_text"] -= 1  # internal lookup, not a caller embed
        return direction

    def _dominant_label(self, image: np.ndarray) -> int | None:
        if image.ndim != 3 or image.shape[2] != 3 or not self.palette:
            return None
        best_label, best_count = None, 0
        for label in sorted(self.palette):
            color = np.asarray(self.palette[label], dtype=np.uint8)
            count = int(np.sum(np.all(image == color, axis=-1)))
            if count > best_count:
                best_label, best_count = label, count
        return best_label

    def embed_image(self, image: np.ndarray) -> np.ndarray:
        self.calls["embed_image"] += 1
        image = np.asarray(image, dtype=np.uint8)
        label = self._dominant_label(image)
        if label is None or label not in self.color_labels:
            return _hash_unit_vector(b"image\x00" + _image_bytes(image), self.seed, self.embedding_dim)
        anchor = self._anchor(self.color_labels[label])
        if self.epsilon == 0.0:
            vec = anchor.copy()
        else:
            noise = _hash_unit_vector(
                b"imgnoise\x00" + _image_bytes(image), self.seed, self.embedding_dim
            )
            vec = anchor + self.epsilon * noise
        return vec / np.linalg.norm(vec)

    def visual_encode(self, image: np.ndarray) -> np.ndarray:
        self.calls["visual_encode"] += 1
        image = np.asarray(image, dtype=np.uint8)
        return _hash_unit_vector(b"visual\x00" + _image_bytes(image), self.seed, self.relation_dim)

    # language

    def describe(self, prompt: str, feature=None, image=None) -> str:
        self.calls["describe"] += 1
        if feature is None and image is None:
            raise ProviderError("describe needs a relation feature or a pair image")
        digest = ""
        if feature is not None:
            digest = feature_digest(feature)
        elif image is not None:
            digest = hashlib.sha1(_image_bytes(np.asarray(image, dtype=np.uint8))).hexdigest()
        return self._describe.respond(prompt=prompt, digest=digest)

    def chat(self, system: str, user: str) -> str:
        self.calls["chat"] += 1
        return self._chat.respond(system=system, user=user)


# ------------------------------------------------------------- wire protocol


def canonical_json_bytes(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=False).encode("utf-8")


def encode_request(op: str, payload: dict) -> bytes:
    if op not in WIRE_OPS:
        raise ProviderError(f"unknown wire op {op!r}")
    return canonical_json_bytes({"op": op, "payload": payload})


def decode_request(body: bytes) -> tuple[str, dict]:
    try:
        doc = json.loads(body.decode("utf-8"))
        op, payload = doc["op"], doc["payload"]
    except (ValueError, KeyError, TypeError) as exc:
        raise ProviderError(f"malformed wire request: {exc!r}") from exc
    if op not in WIRE_OPS:
        raise ProviderError(f"unknown wire op {op!r}")
    return op, payload


def encode_response(result=None, error: str | None = None) -> bytes:
    if error is not None:
        return canonical_json_bytes({"error": error, "ok": False})
    return canonical_json_bytes({"ok": True, "result": result})


def decode_response(body: bytes):
    try:
        doc = json.loads(body.decode("utf-8"))
    except ValueError as exc:
        raise ProviderError(f"malformed wire response: {exc!r}") from exc
    if not isinstance(doc, dict) or "ok" not in doc:
        raise ProviderError("wire response missing 'ok' field")
    if not doc["ok"]:
        raise ProviderError(f"provider error: {doc.get('error', 'unknown')}")
    return doc.get("result")


def image_to_png_b64(image: np.ndarray) -> str:
    buf = io.BytesIO()
    Image.fromarray(np.asarray(image, dtype=np.uint8)).save(buf, format="PNG")
    return base64.b64encode(buf.getvalue()).decode("ascii")


def png_b64_to_image(data: str) -> np.ndarray:
    raw = base64.b64decode(data.encode("ascii"))
    with Image.open(io.BytesIO(raw)) as img:
        return np.asarray(img.convert("RGB"), dtype=np.uint8)


# ------------------------------------------------------------- remote client


class RemoteProvider:
    """Wire-protocol client; capabilities come from the serving process.

    ``/health`` is queried eagerly so a dead endpoint fails construction
    with a transport diagnostic instead of surfacing mid-pipeline.
    """

    def __init__(
        self, endpoint: str, timeout_s: float = 30.0, max_retries: int = 2, max_in_flight: int = 4
    ):
        self.endpoint = endpoint.rstrip("/")
        self.timeout_s = float(timeout_s)
        self.max_retries = int(max_retries)
        self._in_flight = threading.BoundedSemaphore(max(1, int(max_in_flight)))
        self._text_cache: dict[str, np.ndarray] = {}
        health = self._call("health", {})
        try:
            self.embedding_dim = int(health["embedding_dim"])
            self.relation_dim = int(health["relation_dim"])
            self.describe_mode = str(health["describe_mode"])
        except (KeyError, TypeError, ValueError) as exc:
            raise ProviderError(f"health response missing capabilities: {health!r}") from exc

    def _call(self, op: str, payload: dict):
        body = encode_request(op, payload)
        url = f"{self.endpoint}/{op}"
        attempts = 0
        last_error = None
        with self._in_flight:  # bound concurrent requests against the endpoint
            while attempts <= self.max_retries:
                attempts += 1
                request = urllib.request.Request(
                    url, data=body, headers={"Content-Type": "application/json"}, method="POST"
                )
                try:
                    with urllib.request.urlopen(request, timeout=self.timeout_s) as response:
                        return decode_response(response.read())
                except urllib.error.HTTPError as exc:
                    last_error = f"HTTP {exc.code} from {url}"
                except (urllib.error.URLError, TimeoutError, ConnectionError, OSError) as exc:
                    last_error = f"transport failure for {url}: {exc}"
        raise TransportError(last_error or f"unreachable endpoint {url}", attempts=attempts)

    def _vector(self, result, dim: int) -> np.ndarray:
        try:
            arr = np.asarray(result["values"], dtype=np.float64)
        except (KeyError, TypeError, ValueError) as exc:
            raise ProviderError(f"embedding response malformed: {result!r}") from exc
        if arr.shape != (dim,):
            raise ProviderError(f"provider returned dim {arr.shape}, expected ({dim},)")
        if not np.all(np.isfinite(arr)):
            raise ProviderError("provider returned non-finite embedding values")
        return arr

    def embed_text(self, text: str) -> np.ndarray:
        cached = self._text_cache.get(text)
        if cached is None:
            cached = self._vector(self._call("embed_text", {"text": text}), self.embedding_dim)
            self._text_cache[text] = cached
        return cached.copy()

    def embed_image(self, image: np.ndarray) -> np.ndarray:
        payload = {"image_png_b64": image_to_png_b64(image)}
        return self._vector(self._call("embed_image", payload), self.embedding_dim)

    def visual_encode(self, image: np.ndarray) -> np.ndarray:
        payload = {"image_png_b64": image_to_png_b64(image)}
        return self._vector(self._call("visual_encode", payload), self.relation_dim)

    def describe(self, prompt: str, feature=None, image=None) -> str:
        if feature is None and image is None:
            raise ProviderError("describe needs a relation feature or a pair image")
        payload: dict = {"prompt": prompt}
        if feature is not None:
            payload["feature"] = [float(v) for v in np.asarray(feature, dtype=np.float64)]
        if image is not None:
            payload["image_png_b64"] = image_to_png_b64(image)
        result = self._call("describe", payload)
        return str(result["text"])

    def chat(self, system: str, user: str) -> str:
        result = self._call("chat", {"system": system, "user": user})
        return str(result["text"])


def build_provider(
    config: ProviderConfig,
    *,
    palette: dict[int, tuple[int, int, int]] | None = None,
    color_labels: dict[int, str] | None = None,
    anchors: dict[str, np.ndarray] | None = None,
):
    """Construct the provider named by the config (mock transcripts included)."""
    if config.kind == "remote":
        return RemoteProvider(
            config.endpoint, config.timeout_s, config.max_retries, config.max_in_flight
        )
    return MockProvider(
        seed=config.seed,
        embedding_dim=config.embedding_dim,
        relation_dim=config.relation_dim,
        palette=palette,
        color_labels=color_labels,
        anchors=anchors,
        epsilon=config.epsilon,
        describe_mode=config.describe_mode,
        chat_script=load_transcript(config.chat_transcript),
        describe_script=load_transcript(config.describe_transcript),
    )
