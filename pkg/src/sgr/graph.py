"""Five-layer hierarchical scene graph.

Layers, bottom to top: 1 mesh vertices, 2 objects, 3 places, 4 rooms,
5 building. Inter-layer edges are containment (child in layer n, parent in
layer n+1) and form a forest. Intra-layer relation edges connect pairs of
object nodes and carry a fused relation feature.

Concurrency: a single pipeline thread mutates the graph; readers take a
consistent copy via :meth:`SceneGraph.snapshot` at cycle boundaries.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import json

import numpy as np

from .errors import GraphError, SerializationError
from .fusion import running_average

FORMAT_VERSION = 1

LAYER_MESH = 1
LAYER_OBJECT = 2
LAYER_PLACE = 3
LAYER_ROOM = 4
LAYER_BUILDING = 5
ALL_LAYERS = (LAYER_MESH, LAYER_OBJECT, LAYER_PLACE, LAYER_ROOM, LAYER_BUILDING)


def _vec(values, dim: int, what: str) -> np.ndarray:
    arr = np.asarray(values, dtype=np.float64)
    if arr.shape != (dim,):
        raise GraphError(f"{what} must have shape ({dim},), got {arr.shape}")
    return arr


@dataclass
class MeshVertex:
    """Layer-1 node: a surface point with color and semantic label.

    The transient fields hold per-cycle annotations and must be cleared by
    the time an update cycle finishes.
    """

    position: np.ndarray
    color: tuple[int, int, int]
    label: int
    transient_feature: np.ndarray | None = None
    transient_relation_id: int | None = None

    def __post_init__(self):
        self.position = _vec(self.position, 3, "position")
        self.color = tuple(int(c) for c in self.color)


@dataclass
class ObjectNode:
    """Layer-2 node: centroid, axis-aligned bbox, label and fused feature.

    ``feature`` stays the exact mean of all per-cycle fused features;
    ``update_count`` is how many have been folded in (0 means no feature
    yet). ``object_id`` is the frame-local detection index from the most
    recent cycle in which the object was observed, or None otherwise; it is
    the key used to attach relation observations.
    """

    centroid: np.ndarray
    bbox: np.ndarray  # (6,) min corner then max corner
    label: int
    feature: np.ndarray | None = None
    update_count: int = 0
    object_id: int | None = None

    def __post_init__(self):
        self.centroid = _vec(self.centroid, 3, "centroid")
        self.bbox = _vec(self.bbox, 6, "bbox")
        if self.feature is not None:
            self.feature = np.asarray(self.feature, dtype=np.float64)


@dataclass
class RelationEdge:
    """Intra-layer edge between two objects carrying a fused relation feature."""

    endpoints: tuple[int, int]
    feature: np.ndarray
    update_count: int = 1

    def __post_init__(self):
        self.endpoints = (int(self.endpoints[0]), int(self.endpoints[1]))
        self.feature = np.asarray(self.feature, dtype=np.float64)


@dataclass
class PlaceNode:
    """Layer-3 node: a point of sparsified free space; neighbors are traversable."""

    centroid: np.ndarray
    neighbors: set[int] = field(default_factory=set)

    def __post_init__(self):
        self.centroid = _vec(self.centroid, 3, "centroid")
        self.neighbors = set(int(n) for n in self.neighbors)


@dataclass
class RoomNode:
    """Layer-4 node: room centroid, clustered view embeddings, free-cell extent."""

    centroid: np.ndarray
    feature_clusters: list[np.ndarray] = field(default_factory=list)
    extent: set[tuple[int, int]] = field(default_factory=set)

    def __post_init__(self):
        self.centroid = _vec(self.centroid, 3, "centroid")
        self.feature_clusters = [np.asarray(c, dtype=np.float64) for c in self.feature_clusters]
        self.extent = set((int(a), int(b)) for a, b in self.extent)

    def contains_cell(self, cell: tuple[int, int]) -> bool:
        return (int(cell[0]), int(cell[1])) in self.extent


@dataclass
class BuildingNode:
    """Layer-5 node: a single root holding the building centroid."""

    centroid: np.ndarray

    def __post_init__(self):
        self.centroid = _vec(self.centroid, 3, "centroid")


LAYER_TYPES = {
    LAYER_MESH: MeshVertex,
    LAYER_OBJECT: ObjectNode,
    LAYER_PLACE: PlaceNode,
    LAYER_ROOM: RoomNode,
    LAYER_BUILDING: BuildingNode,
}
LAYER_NAMES = {1: "mesh", 2: "objects", 3: "places", 4: "rooms", 5: "building"}


def _edge_key(i: int, j: int) -> tuple[int, int]:
    return (i, j) if i < j else (j, i)


class SceneGraph:
    """Node store plus containment and relation edges.

    Node ids are handed out by a monotonic counter and never reused; when
    two objects merge, the absorbed id is recorded in a forwarding table so
    stale references still resolve.
    """

    def __init__(self):
        self.layers: dict[int, dict[int, object]] = {n: {} for n in ALL_LAYERS}
        self.relation_edges: dict[tuple[int, int], RelationEdge] = {}
        self.next_node_id = 0
        self._layer_of: dict[int, int] = {}
        self._parent: dict[int, int] = {}
        self._forwarding: dict[int, int] = {}

    # ------------------------------------------------------------------ nodes

    def add_node(self, layer: int, node) -> int:
        if layer not in LAYER_TYPES:
            raise GraphError(f"layer {layer} is not one of {sorted(LAYER_TYPES)}")
        expected = LAYER_TYPES[layer]
        if type(node) is not expected:
            raise GraphError(
                f"type/layer mismatch: layer {layer} holds {expected.__name__}, "
                f"got {type(node).__name__}"
            )
        node_id = self.next_node_id
        self.next_node_id += 1
        self.layers[layer][node_id] = node
        self._layer_of[node_id] = layer
        return node_id

    def resolve_id(self, node_id: int) -> int:
        """Follow merge forwarding until a live (or final) id is reached."""
        seen = set()
        while node_id in self._forwarding and node_id not in seen:
            seen.add(node_id)
            node_id = self._forwarding[node_id]
        return node_id

    def has_node(self, node_id: int) -> bool:
        return node_id in self._layer_of

    def layer_of(self, node_id: int) -> int:
        try:
            return self._layer_of[node_id]
        except KeyError:
            raise GraphError(f"unknown node id {node_id}") from None

    def node(self, node_id: int):
        node_id = self.resolve_id(node_id)
        layer = self.layer_of(node_id)
        return self.layers[layer][node_id]

    def nodes(self, layer: int) -> dict[int, object]:
        if layer not in self.layers:
            raise GraphError(f"layer {layer} is not one of {sorted(LAYER_TYPES)}")
        return self.layers[layer]

    def node_ids(self, layer: int) -> list[int]:
        return sorted(self.layers[layer])

    def remove_node(self, node_id: int) -> None:
        layer = self.layer_of(node_id)
        del self.layers[layer][node_id]
        del self._layer_of[node_id]
        self._parent.pop(node_id, None)
        for child in [c for c, p in self._parent.items() if p == node_id]:
            del self._parent[child]
        for key in [k for k in self.relation_edges if node_id in k]:
            del self.relation_edges[key]
        if layer == LAYER_PLACE:
            for place in self.layers[LAYER_PLACE].values():
                place.neighbors.discard(node_id)

    # ------------------------------------------------------------ containment

    def set_parent(self, child: int, parent: int) -> None:
        child_layer = self.layer_of(child)
        parent_layer = self.layer_of(parent)
        if parent_layer != child_layer + 1:
            raise GraphError(
                f"containment must link adjacent layers: node {child} (layer "
                f"{child_layer}) cannot have parent {parent} (layer {parent_layer})"
            )
        self._parent[child] = parent

    def parent_of(self, child: int) -> int | None:
        return self._parent.get(child)

    def children_of(self, parent: int) -> list[int]:
        return sorted(c for c, p in self._parent.items() if p == parent)

    def interlayer_edges(self) -> list[tuple[int, int]]:
        return sorted(self._parent.items())

    # -------------------------------------------------------------- relations

    def upsert_relation(self, i: int, j: int, observed) -> RelationEdge:
        """Create or update the relation edge between two object nodes.

        An existing edge folds ``observed`` into its running-mean feature
        and increments its count; otherwise a fresh edge starts at count 1.
        """
        if i == j:
            raise GraphError(f"relation endpoints must differ, got {i} twice")
        for nid in (i, j):
            if self.layer_of(nid) != LAYER_OBJECT:
                raise GraphError(f"relation endpoint {nid} is not an object node")
        key = _edge_key(i, j)
        edge = self.relation_edges.get(key)
        if edge is None:
            edge = RelationEdge(endpoints=key, feature=observed, update_count=1)
            self.relation_edges[key] = edge
        else:
            edge.feature, edge.update_count = running_average(
                edge.feature, edge.update_count, observed
            )
        return edge

    def relation_between(self, i: int, j: int) -> RelationEdge | None:
        return self.relation_edges.get(_edge_key(i, j))

    def merge_objects(self, survivor: int, merged: int) -> None:
        """Fuse object ``merged`` into ``survivor``.

        Features combine count-weighted so the survivor stays the mean of
        the union of observations; relation edges re-key to the survivor,
        and a forwarding entry keeps the stale id resolvable.
        """
        if survivor == merged:
            raise GraphError("cannot merge a node into itself")
        surv = self.node(survivor)
        gone = self.node(merged)
        if not (isinstance(surv, ObjectNode) and isinstance(gone, ObjectNode)):
            raise GraphError("merge_objects only applies to object nodes")
        total = surv.update_count + gone.update_count
        if total > 0:
            parts = []
            if surv.feature is not None:
                parts.append(surv.update_count * surv.feature)
            if gone.feature is not None:
                parts.append(gone.update_count * gone.feature)
            surv.feature = sum(parts) / total
            surv.update_count = total
        lo = np.minimum(surv.bbox[:3], gone.bbox[:3])
        hi = np.maximum(surv.bbox[3:], gone.bbox[3:])
        surv.bbox = np.concatenate([lo, hi])
        surv.centroid = np.clip(surv.centroid, lo, hi)
        for key in [k for k in self.relation_edges if merged in k]:
            edge = self.relation_edges.pop(key)
            other = key[0] if key[1] == merged else key[1]
            if other == survivor:
                continue  # self-relation after merge is dropped
            new_key = _edge_key(survivor, other)
            existing = self.relation_edges.get(new_key)
            if existing is None:
                edge.endpoints = new_key
                self.relation_edges[new_key] = edge
            else:
                n = existing.update_count + edge.update_count
                existing.feature = (
                    existing.update_count * existing.feature + edge.update_count * edge.feature
                ) / n
                existing.update_count = n
        del self.layers[LAYER_OBJECT][merged]
        del self._layer_of[merged]
        self._parent.pop(merged, None)
        self._forwarding[merged] = survivor

    # ------------------------------------------------------------- validation

    def validate(self) -> list[str]:
        """Check every structural invariant; returns human-readable violations."""
        problems: list[str] = []
        if set(self.layers) != set(ALL_LAYERS):
            problems.append(f"layer indices are {sorted(self.layers)}, expected {list(ALL_LAYERS)}")
        seen: dict[int, int] = {}
        for layer, nodes in self.layers.items():
            for nid, node in nodes.items():
                if nid in seen:
                    problems.append(f"node {nid} appears in layers {seen[nid]} and {layer}")
                seen[nid] = layer
                if type(node) is not LAYER_TYPES.get(layer):
                    problems.append(f"node {nid} in layer {layer} has type {type(node).__name__}")
        for child, parent in self._parent.items():
            if child not in self._layer_of:
                problems.append(f"containment edge references missing child {child}")
                continue
            if parent not in self._layer_of:
                problems.append(f"containment edge references missing parent {parent}")
                continue
            if self._layer_of[parent] != self._layer_of[child] + 1:
                problems.append(
                    f"containment edge {child}->{parent} spans layers "
                    f"{self._layer_of[child]}->{self._layer_of[parent]}"
                )
        for key, edge in self.relation_edges.items():
            a, b = key
            if a == b:
                problems.append(f"relation edge {key} connects a node to itself")
            for nid in key:
                if nid not in self._layer_of:
                    problems.append(f"relation edge {key} references missing node {nid}")
                elif self._layer_of[nid] != LAYER_OBJECT:
                    problems.append(f"relation edge {key} endpoint {nid} is not an object")
            if edge.update_count < 1:
                problems.append(f"relation edge {key} has update_count {edge.update_count}")
        for nid, vertex in self.layers[LAYER_MESH].items():
            if vertex.transient_feature is not None or vertex.transient_relation_id is not None:
                problems.append(f"mesh vertex {nid} still carries transient annotations")
        object_ids: dict[int, int] = {}
        for nid, obj in self.layers[LAYER_OBJECT].items():
            if np.any(obj.bbox[:3] > obj.bbox[3:] + 1e-9):
                problems.append(f"object {nid} bbox min exceeds max")
            if np.any(obj.centroid < obj.bbox[:3] - 1e-9) or np.any(
                obj.centroid > obj.bbox[3:] + 1e-9
            ):
                problems.append(f"object {nid} centroid lies outside its bbox")
            if obj.update_count < 0:
                problems.append(f"object {nid} has negative update_count")
            if (obj.feature is None) != (obj.update_count == 0):
                problems.append(f"object {nid} feature/update_count disagree")
            if obj.object_id is not None:
                if obj.object_id in object_ids:
                    problems.append(
                        f"objects {object_ids[obj.object_id]} and {nid} share object_id "
                        f"{obj.object_id}"
                    )
                object_ids[obj.object_id] = nid
        for nid, place in self.layers[LAYER_PLACE].items():
            for other in place.neighbors:
                if other not in self.layers[LAYER_PLACE]:
                    problems.append(f"place {nid} neighbor {other} is not a live place")
                elif nid not in self.layers[LAYER_PLACE][other].neighbors:
                    problems.append(f"place neighbor relation {nid}<->{other} is asymmetric")
        for nid, room in self.layers[LAYER_ROOM].items():
            dims = {c.shape for c in room.feature_clusters}
            if len(dims) > 1:
                problems.append(f"room {nid} feature clusters have mixed dims {dims}")
        if self.layers[LAYER_ROOM] and len(self.layers[LAYER_BUILDING]) != 1:
            problems.append(
                f"{len(self.layers[LAYER_BUILDING])} building nodes with rooms present, expected 1"
            )
        return problems

    # ---------------------------------------------------------- serialization

    def _node_record(self, layer: int, nid: int, node) -> dict:
        rec: dict = {"id": nid}
        if layer == LAYER_MESH:
            rec.update(
                position=[float(v) for v in node.position],
                color=list(node.color),
                label=int(node.label),
            )
            if node.transient_feature is not None:
                rec["transient_feature"] = [float(v) for v in node.transient_feature]
            if node.transient_relation_id is not None:
                rec["transient_relation_id"] = int(node.transient_relation_id)
        elif layer == LAYER_OBJECT:
            rec.update(
                centroid=[float(v) for v in node.centroid],
                bbox=[float(v) for v in node.bbox],
                label=int(node.label),
                feature=None if node.feature is None else [float(v) for v in node.feature],
                update_count=int(node.update_count),
                object_id=None if node.object_id is None else int(node.object_id),
            )
        elif layer == LAYER_PLACE:
            rec.update(
                centroid=[float(v) for v in node.centroid],
                neighbors=sorted(int(n) for n in node.neighbors),
            )
        elif layer == LAYER_ROOM:
            rec.update(
                centroid=[float(v) for v in node.centroid],
                feature_clusters=[[float(v) for v in c] for c in node.feature_clusters],
                extent=sorted([int(a), int(b)] for a, b in node.extent),
            )
        else:
            rec.update(centroid=[float(v) for v in node.centroid])
        return rec

    def to_canonical_dict(self) -> dict:
        return {
            "format_version": FORMAT_VERSION,
            "next_node_id": self.next_node_id,
            "forwarding": {str(k): v for k, v in sorted(self._forwarding.items())},
            "layers": {
                str(layer): [
                    self._node_record(layer, nid, self.layers[layer][nid])
                    for nid in sorted(self.layers[layer])
                ]
                for layer in ALL_LAYERS
            },
            "parents": [[c, p] for c, p in sorted(self._parent.items())],
            "relations": [
                {
                    "a": key[0],
                    "b": key[1],
                    "feature": [float(v) for v in edge.feature],
                    "update_count": int(edge.update_count),
                }
                for key, edge in sorted(self.relation_edges.items())
            ],
        }

    def serialize(self) -> bytes:
        """Canonical UTF-8 text: sorted ids, shortest round-trip decimals."""
        text = json.dumps(
            self.to_canonical_dict(),
            sort_keys=True,
            separators=(",", ":"),
            ensure_ascii=False,
            allow_nan=False,
        )
        return (text + "\n").encode("utf-8")

    @classmethod
    def deserialize(cls, data: bytes) -> "SceneGraph":
        try:
            doc = json.loads(data.decode("utf-8"))
        except UnicodeDecodeError as exc:
            raise SerializationError(f"graph text is not UTF-8: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise SerializationError(f"graph text is not valid JSON: {exc.msg}", exc.pos) from exc
        if not isinstance(doc, dict):
            raise SerializationError("top-level value must be an object")
        expected_keys = {"format_version", "next_node_id", "forwarding", "layers", "parents", "relations"}
        if set(doc) != expected_keys:
            raise SerializationError(
                f"unexpected schema keys: {sorted(set(doc) ^ expected_keys)}"
            )
        if doc["format_version"] != FORMAT_VERSION:
            raise SerializationError(f"unsupported format_version {doc['format_version']!r}")
        graph = cls()
        try:
            for layer in ALL_LAYERS:
                for rec in doc["layers"][str(layer)]:
                    nid = int(rec["id"])
                    node = _node_from_record(layer, rec)
                    graph.layers[layer][nid] = node
                    graph._layer_of[nid] = layer
            graph.next_node_id = int(doc["next_node_id"])
            graph._forwarding = {int(k): int(v) for k, v in doc["forwarding"].items()}
            for child, parent in doc["parents"]:
                graph._parent[int(child)] = int(parent)
            for rel in doc["relations"]:
                key = (int(rel["a"]), int(rel["b"]))
                graph.relation_edges[key] = RelationEdge(
                    endpoints=key,
                    feature=rel["feature"],
                    update_count=int(rel["update_count"]),
                )
        except (KeyError, TypeError, ValueError) as exc:
            raise SerializationError(f"malformed graph record: {exc!r}") from exc
        return graph

    def snapshot(self) -> "SceneGraph":
        """Deep, independent copy safe to hand to reader threads."""
        return SceneGraph.deserialize(self.serialize())

    def __eq__(self, other) -> bool:
        if not isinstance(other, SceneGraph):
            return NotImplemented
        return self.serialize() == other.serialize()

    # ------------------------------------------------------------------ DOT

    def export_dot(self, options: "DotOptions | None" = None) -> str:
        """Graphviz rendering: one cluster per layer, dashed relation edges."""
        opts = options or DotOptions()
        lines = ["digraph scene_graph {", f"  rankdir={opts.rankdir};", "  node [shape=box];"]
        for layer in ALL_LAYERS:
            lines.append(f"  subgraph cluster_layer{layer} {{")
            lines.append(f'    label="L{layer} {LAYER_NAMES[layer]}";')
            for nid in sorted(self.layers[layer]):
                label = f"{LAYER_NAMES[layer][0]}{nid}"
                node = self.layers[layer][nid]
                if opts.show_semantic_labels and isinstance(node, ObjectNode):
                    label += f"\\nlabel={node.label}"
                lines.append(f'    n{nid} [label="{label}"];')
            lines.append("  }")
        for child, parent in sorted(self._parent.items()):
            lines.append(f"  n{child} -> n{parent};")
        for (a, b), edge in sorted(self.relation_edges.items()):
            attrs = "style=dashed, dir=none"
            if opts.show_relation_counts:
                attrs += f', label="n={edge.update_count}"'
            lines.append(f"  n{a} -> n{b} [{attrs}];")
        lines.append("}")
        return "\n".join(lines) + "\n"


@dataclass(frozen=True)
class DotOptions:
    rankdir: str = "BT"
    show_semantic_labels: bool = False
    show_relation_counts: bool = False


def _node_from_record(layer: int, rec: dict):
    if layer == LAYER_MESH:
        return MeshVertex(
            position=rec["position"],
            color=tuple(rec["color"]),
            label=int(rec["label"]),
            transient_feature=rec.get("transient_feature"),
            transient_relation_id=rec.get("transient_relation_id"),
        )
    if layer == LAYER_OBJECT:
        return ObjectNode(
            centroid=rec["centroid"],
            bbox=rec["bbox"],
            label=int(rec["label"]),
            feature=rec["feature"],
            update_count=int(rec["update_count"]),
            object_id=None if rec["object_id"] is None else int(rec["object_id"]),
        )
    if layer == LAYER_PLACE:
        return PlaceNode(centroid=rec["centroid"], neighbors=set(rec["neighbors"]))
    if layer == LAYER_ROOM:
        return RoomNode(
            centroid=rec["centroid"],
            feature_clusters=rec["feature_clusters"],
            extent=set((a, b) for a, b in rec["extent"]),
        )
    return BuildingNode(centroid=rec["centroid"])
