"""Hierarchical open-vocabulary 3D scene graphs with relation-aware reasoning.

The package splits into a construction side (datasets -> voxel grid ->
objects/places/rooms in a five-layer graph, with fused open-vocabulary
features and pairwise relation features) and a reasoning side (task
parsing, graph grounding, subtask evaluation). All learned models sit
behind provider interfaces with deterministic mocks.
"""

__version__ = "0.1.0"

from .graph import SceneGraph

__all__ = ["SceneGraph", "__version__"]
