"""HTTP server for the provider wire protocol.

Requests are handled concurrently; backend calls go through a lock when the
backend declares itself non-thread-safe. A backend construction failure
aborts startup with a nonzero exit, before the port is bound.
"""

from __future__ import annotations

import argparse
import sys
import threading
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

import numpy as np

from .backends import BackendError, SidecarConfig, build_backend
from .wire import WireError, decode_request, encode_response, png_b64_to_image


def handle_op(backend, op: str, payload: dict, lock: threading.Lock | None = None) -> bytes:
    """Dispatch one decoded request; always returns a wire response body."""
    try:
        if op == "health":
            result = {
                "embedding_dim": backend.embedding_dim,
                "relation_dim": backend.relation_dim,
                "describe_mode": backend.describe_mode,
            }
            return encode_response(result=result)
        if lock is not None:
            lock.acquire()
        try:
            if op == "embed_text":
                values = backend.embed_text(str(payload["text"]))
                result = {"values": [float(v) for v in values]}
            elif op == "embed_image":
                values = backend.embed_image(png_b64_to_image(payload["image_png_b64"]))
                result = {"values": [float(v) for v in values]}
            elif op == "visual_encode":
                values = backend.visual_encode(png_b64_to_image(payload["image_png_b64"]))
                result = {"values": [float(v) for v in values]}
            elif op == "describe":
                image = payload.get("image_png_b64")
                feature = payload.get("feature")
                text = backend.describe(
                    str(payload["prompt"]),
                    image=None if image is None else png_b64_to_image(image),
                    feature=None if feature is None else np.asarray(feature, dtype=np.float64),
                )
                result = {"text": text}
            elif op == "chat":
                result = {"text": backend.chat(str(payload["system"]), str(payload["user"]))}
            else:
                return encode_response(error=f"unknown op {op!r}")
        finally:
            if lock is not None:
                lock.release()
        return encode_response(result=result)
    except (BackendError, KeyError, ValueError, TypeError) as exc:
        message = str(exc) if str(exc) else repr(exc)
        return encode_response(error=message)


class SidecarServer:
    def __init__(self, config: SidecarConfig, serialize_backend: bool = False):
        backend = build_backend(config)  # raises before binding on bad config
        lock = threading.Lock() if serialize_backend else None
        server = self

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
                except WireError as exc:
                    self._respond(encode_response(error=str(exc)))
                    return
                if op != self.path.strip("/"):
                    self._respond(encode_response(error="op/path mismatch"))
                    return
                self._respond(handle_op(server.backend, op, payload, server.lock))

            def do_GET(self):
                if self.path.strip("/") == "health":
                    self._respond(handle_op(server.backend, "health", {}))
                else:
                    self._respond(encode_response(error="unknown path"), status=404)

        self.backend = backend
        self.lock = lock
        self.config = config
        self._httpd = ThreadingHTTPServer((config.host, config.port), Handler)
        self._thread: threading.Thread | None = None

    @property
    def endpoint(self) -> str:
        host, port = self._httpd.server_address
        return f"http://{host}:{port}"

    def start(self) -> None:
        self._thread = threading.Thread(target=self._httpd.serve_forever, daemon=True)
        self._thread.start()

    def serve_forever(self) -> None:
        self._httpd.serve_forever()

    def shutdown(self) -> None:
        self._httpd.shutdown()
        self._httpd.server_close()

    def __enter__(self):
        self.start()
        return self

    def __exit__(self, *exc):
        self.shutdown()
        return False


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(prog="sgr-sidecar", description=__doc__)
    parser.add_argument("--host", default="127.0.0.1")
    parser.add_argument("--port", type=int, default=8090)
    parser.add_argument("--backend", choices=("deterministic", "openai"), default="deterministic")
    parser.add_argument("--seed", type=int, default=11)
    parser.add_argument("--embedding-dim", type=int, default=8)
    parser.add_argument("--relation-dim", type=int, default=6)
    parser.add_argument("--upstream-url", default=None)
    parser.add_argument("--embed-model", default="text-embedding")
    parser.add_argument("--chat-model", default="chat")
    parser.add_argument("--vlm-model", default="vision")
    parser.add_argument("--serialize-backend", action="store_true",
                        help="serialize backend calls for non-thread-safe models")
    args = parser.parse_args(argv)
    config = SidecarConfig(
        host=args.host,
        port=args.port,
        backend=args.backend,
        seed=args.seed,
        embedding_dim=args.embedding_dim,
        relation_dim=args.relation_dim,
        upstream_url=args.upstream_url,
        embed_model=args.embed_model,
        chat_model=args.chat_model,
        vlm_model=args.vlm_model,
    )
    try:
        server = SidecarServer(config, serialize_backend=args.serialize_backend)
    except BackendError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    print(f"sgr-sidecar serving {config.backend} backend at {server.endpoint}")
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        server.shutdown()
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
