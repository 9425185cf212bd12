"""Serving process for the scene-graph provider wire protocol.

Exposes ``/embed_image``, ``/embed_text``, ``/visual_encode``, ``/describe``,
``/chat`` and ``/health`` over HTTP with canonical-JSON bodies, backed either
by a fully deterministic backend (for tests and offline runs) or by proxies
to hosted model APIs. The main artifact talks to this process only through
the wire protocol; neither package imports the other.
"""

__version__ = "0.1.0"
