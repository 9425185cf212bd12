#!/usr/bin/env python3
"""Regenerate the golden wire-protocol fixtures.

The fixtures pin the byte-level request/response contract between the
remote-provider client and any serving process. Embedding responses follow
the deterministic hash scheme of the mock provider; describe/chat responses
follow the reference templates below, which a serving process's
deterministic backend must reproduce:

    describe -> "described <digest12>: <prompt>"
                digest12 = sha1(repr(shape) + b"|" + rgb_array_bytes)[:12]
    chat     -> "ack <digest12>"
                digest12 = sha1(system + b"\\x00" + user)[:12]

Run from the repository root:  python3 scripts/generate_wire_golden.py
"""

import hashlib
import json
import sys
from pathlib import Path

import numpy as np

sys.path.insert(0, str(Path(__file__).resolve().parents[1] / "src"))

from sgr.providers import (  # noqa: E402
    MockProvider,
    canonical_json_bytes,
    encode_request,
    encode_response,
    image_to_png_b64,
    png_b64_to_image,
)

SEED = 11
EMBEDDING_DIM = 8
RELATION_DIM = 6
DESCRIBE_MODE = "image"


def image_digest12(image: np.ndarray) -> str:
    raw = repr(image.shape).encode() + b"|" + np.ascontiguousarray(image).tobytes()
    return hashlib.sha1(raw).hexdigest()[:12]


def chat_digest12(system: str, user: str) -> str:
    return hashlib.sha1(system.encode() + b"\x00" + user.encode()).hexdigest()[:12]


def sample_image(tag: int) -> np.ndarray:
    img = np.zeros((5, 7, 3), dtype=np.uint8)
    img[tag % 5, :, 0] = 255
    img[:, tag % 7, 2] = 128
    return img


def main() -> None:
    provider = MockProvider(seed=SEED, embedding_dim=EMBEDDING_DIM, relation_dim=RELATION_DIM)
    exchanges = []

    def add(op: str, payload: dict, result=None, error=None):
        exchanges.append(
            {
                "op": op,
                "payload": payload,
                "request": encode_request(op, payload).decode("utf-8"),
                "response": encode_response(result=result, error=error).decode("utf-8"),
            }
        )

    add(
        "health",
        {},
        result={
            "embedding_dim": EMBEDDING_DIM,
            "relation_dim": RELATION_DIM,
            "describe_mode": DESCRIBE_MODE,
        },
    )
    for text in ("chair", "trash can", "a photo of a plant"):
        add("embed_text", {"text": text}, result={"values": [float(v) for v in provider.embed_text(text)]})
    for tag in (0, 3):
        img = sample_image(tag)
        b64 = image_to_png_b64(img)
        decoded = png_b64_to_image(b64)
        add(
            "embed_image",
            {"image_png_b64": b64},
            result={"values": [float(v) for v in provider.embed_image(decoded)]},
        )
        add(
            "visual_encode",
            {"image_png_b64": b64},
            result={"values": [float(v) for v in provider.visual_encode(decoded)]},
        )
    pair_img = sample_image(5)
    pair_b64 = image_to_png_b64(pair_img)
    prompt = "Is the chair blocking the door? Focus only on the objects that have a red and green bounding box."
    add(
        "describe",
        {"prompt": prompt, "image_png_b64": pair_b64},
        result={"text": f"described {image_digest12(png_b64_to_image(pair_b64))}: {prompt}"},
    )
    add(
        "describe",
        {"prompt": "feature mode attempt", "feature": [0.0, 0.25, -1.0, 0.5, 0.125, 2.0]},
        error="describe requires an image (feature mode not supported)",
    )
    system = "You decide whether a robot subtask should be executed."
    user = "Subtask: move the chair\nScene description: the chair blocks the door"
    add("chat", {"system": system, "user": user}, result={"text": f"ack {chat_digest12(system, user)}"})

    doc = {
        "seed": SEED,
        "embedding_dim": EMBEDDING_DIM,
        "relation_dim": RELATION_DIM,
        "describe_mode": DESCRIBE_MODE,
        "reference_semantics": {
            "embeddings": "splitmix64 keyed-hash unit vectors (see provider mock)",
            "describe": "described <sha1(repr(shape)+b'|'+rgb_bytes)[:12]>: <prompt>",
            "chat": "ack <sha1(system + 0x00 + user)[:12]>",
        },
        "exchanges": exchanges,
    }
    out = Path(__file__).resolve().parents[1] / "fixtures" / "wire_protocol" / "golden_exchanges.json"
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n", encoding="utf-8")
    print(f"wrote {out} ({len(exchanges)} exchanges)")


if __name__ == "__main__":
    main()
