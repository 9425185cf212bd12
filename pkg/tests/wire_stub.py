"""Minimal in-test HTTP server exposing any provider over the wire protocol.

Used to exercise the remote client and to generate the golden protocol
fixtures shared with serving processes.
"""

from __future__ import annotations

import threading
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

import numpy as np

from sgr.errors import ProviderError
from sgr.providers import decode_request, encode_response, png_b64_to_image


def handle_wire_op(provider, op: str, payload: dict) -> bytes:
    """Dispatch one decoded wire request against a provider; returns body bytes."""
    try:
        if op == "health":
            result = {
                "embedding_dim": provider.embedding_dim,
                "relation_dim": provider.relation_dim,
                "describe_mode": provider.describe_mode,
            }
        elif op == "embed_text":
            result = {"values": [float(v) for v in provider.embed_text(payload["text"])]}
        elif op == "embed_image":
            image = png_b64_to_image(payload["image_png_b64"])
            result = {"values": [float(v) for v in provider.embed_image(image)]}
        elif op == "visual_encode":
            image = png_b64_to_image(payload["image_png_b64"])
            result = {"values": [float(v) for v in provider.visual_encode(image)]}
        elif op == "describe":
            feature = payload.get("feature")
            image = payload.get("image_png_b64")
            result = {
                "text": provider.describe(
                    payload["prompt"],
                    feature=None if feature is None else np.asarray(feature, dtype=np.float64),
                    image=None if image is None else png_b64_to_image(image),
                )
            }
        elif op == "chat":
            result = {"text": provider.chat(payload["system"], payload["user"])}
        else:
            return encode_response(error=f"unknown op {op!r}")
        return encode_response(result=result)
    except (ProviderError, KeyError, ValueError) as exc:
        return encode_response(error=str(exc))


class WireStubServer:
    """Threaded HTTP server answering the provider wire protocol."""

    def __init__(self, provider):
        stub = self

        class Handler(BaseHTTPRequestHandler):
            def log_message(self, *args):
                pass

            def _respond(self, body: bytes, status: int = 200):
                self.send_response(status)
                self.send_header("Content-Type", "application/json")
                self.send_header("Content-Length", str(len(body)))
                self.end_headers()
                self.wfile.write(body)

            def do_POST(self):
                length = int(self.headers.get("Content-Length", "0"))
                raw = self.rfile.read(length)
                try:
                    op, payload = decode_request(raw)
                except ProviderError as exc:
                    self._respond(encode_response(error=str(exc)))
                    return
                if op != self.path.strip("/"):
                    self._respond(encode_response(error="op/path mismatch"))
                    return
                self._respond(handle_wire_op(stub.provider, op, payload))

            def do_GET(self):
                if self.path.strip("/") == "health":
                    self._respond(handle_wire_op(stub.provider, "health", {}))
                else:
                    self._respond(encode_response(error="unknown path"), status=404)

        self.provider = provider
        self._server = ThreadingHTTPServer(("127.0.0.1", 0), Handler)
        self._thread = threading.Thread(target=self._server.serve_forever, daemon=True)

    @property
    def endpoint(self) -> str:
        host, port = self._server.server_address
        return f"http://{host}:{port}"

    def __enter__(self):
        self._thread.start()
        return self

    def __exit__(self, *exc):
        self._server.shutdown()
        self._server.server_close()
        return False
