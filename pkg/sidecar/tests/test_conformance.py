"""Protocol conformance against the shared golden fixtures.

Every golden request must produce a byte-identical response from the
deterministic backend, pinning both the JSON canonicalization and the
numeric outputs.
"""

import json
import sys
import urllib.request
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).resolve().parents[1] / "src"))

from sgr_sidecar.backends import DeterministicBackend, SidecarConfig  # noqa: E402
from sgr_sidecar.server import SidecarServer, handle_op  # noqa: E402
from sgr_sidecar.wire import decode_request  # noqa: E402

GOLDEN_PATH = (
    Path(__file__).resolve().parents[2] / "fixtures" / "wire_protocol" / "golden_exchanges.json"
)


@pytest.fixture(scope="module")
def golden():
    return json.loads(GOLDEN_PATH.read_text(encoding="utf-8"))


@pytest.fixture(scope="module")
def backend(golden):
    config = SidecarConfig(
        seed=golden["seed"],
        embedding_dim=golden["embedding_dim"],
        relation_dim=golden["relation_dim"],
    )
    return DeterministicBackend(config)


def test_golden_exchanges_byte_for_byte(golden, backend):
    for exchange in golden["exchanges"]:
        op, payload = decode_request(exchange["request"].encode("utf-8"))
        body = handle_op(backend, op, payload)
        assert body == exchange["response"].encode("utf-8"), f"{op} response diverged"


def test_golden_exchanges_over_http(golden):
    config = SidecarConfig(
        port=0,
        seed=golden["seed"],
        embedding_dim=golden["embedding_dim"],
        relation_dim=golden["relation_dim"],
    )
    with SidecarServer(config) as server:
        for exchange in golden["exchanges"]:
            request = urllib.request.Request(
                f"{server.endpoint}/{exchange['op']}",
                data=exchange["request"].encode("utf-8"),
                headers={"Content-Type": "application/json"},
                method="POST",
            )
            with urllib.request.urlopen(request, timeout=5.0) as response:
                body = response.read()
            assert body == exchange["response"].encode("utf-8"), exchange["op"]


def test_health_reports_configured_dims(golden):
    config = SidecarConfig(port=0, embedding_dim=32, relation_dim=48)
    with SidecarServer(config) as server:
        with urllib.request.urlopen(f"{server.endpoint}/health", timeout=5.0) as response:
            doc = json.loads(response.read())
    assert doc["ok"] is True
    assert doc["result"]["embedding_dim"] == 32
    assert doc["result"]["relation_dim"] == 48
    assert doc["result"]["describe_mode"] == "image"


def test_repeated_embed_text_identical(backend):
    first = handle_op(backend, "embed_text", {"text": "chair"})
    second = handle_op(backend, "embed_text", {"text": "chair"})
    assert first == second
    assert json.loads(first)["ok"] is True
