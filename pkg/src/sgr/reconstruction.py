"""Object clustering, incremental object fusion, place extraction, rooms.

This is a deliberately simple substrate: occupied-voxel centers play the
role of surface vertices, a 2D free-space slab stands in for a full 3D
distance field, and rooms come from eroding that slab until doorways close.
"""

from __future__ import annotations

import math
from collections import Counter, deque
from dataclasses import dataclass, field

import numpy as np

from .fusion import average_features, running_average
from .graph import (
    LAYER_BUILDING,
    LAYER_OBJECT,
    LAYER_PLACE,
    LAYER_ROOM,
    BuildingNode,
    ObjectNode,
    PlaceNode,
    RoomNode,
    SceneGraph,
)
from .voxel import SemanticVoxelGrid

NEIGHBORS_26 = [
    (dx, dy, dz)
    for dx in (-1, 0, 1)
    for dy in (-1, 0, 1)
    for dz in (-1, 0, 1)
    if (dx, dy, dz) != (0, 0, 0)
]
NEIGHBORS_8 = [(dx, dy) for dx in (-1, 0, 1) for dy in (-1, 0, 1) if (dx, dy) != (0, 0)]


# ------------------------------------------------------------------ clustering


@dataclass
class Cluster:
    """Connected component of same-label occupied voxels."""

    label: int
    members: list[tuple[int, int, int]]
    centroid: np.ndarray
    bbox: np.ndarray  # (6,) over member voxel centers
    feature_indices: list[int] = field(default_factory=list)
    relation_ids: list[int] = field(default_factory=list)

    def majority_relation_id(self) -> int | None:
        if not self.relation_ids:
            return None
        counts = Counter(self.relation_ids)
        best = max(counts.items(), key=lambda kv: (kv[1], -kv[0]))
        return best[0]


@dataclass
class ClusterSet:
    clusters: list[Cluster]

    def __len__(self) -> int:
        return len(self.clusters)


def cluster_objects(grid: SemanticVoxelGrid, min_cluster_voxels: int = 5) -> ClusterSet:
    """26-connected components of labeled voxels sharing one label."""
    labeled = {key: cell for key, cell in grid.cells.items() if cell.label is not None}
    visited: set[tuple[int, int, int]] = set()
    clusters: list[Cluster] = []
    for seed in sorted(labeled):
        if seed in visited:
            continue
        label = labeled[seed].label
        members = []
        queue = deque([seed])
        visited.add(seed)
        while queue:
            key = queue.popleft()
            members.append(key)
            for dx, dy, dz in NEIGHBORS_26:
                nk = (key[0] + dx, key[1] + dy, key[2] + dz)
                if nk in visited:
                    continue
                cell = labeled.get(nk)
                if cell is not None and cell.label == label:
                    visited.add(nk)
                    queue.append(nk)
        if len(members) < min_cluster_voxels:
            continue
        members.sort()
        centers = np.array([grid.center(m) for m in members])
        centroid = centers.mean(axis=0)
        bbox = np.concatenate([centers.min(axis=0), centers.max(axis=0)])
        feature_indices = []
        relation_ids = []
        for m in members:
            cell = grid.cells[m]
            if cell.transient_feature_index is not None:
                feature_indices.append(cell.transient_feature_index)
            if cell.transient_relation_id is not None:
                relation_ids.append(cell.transient_relation_id)
        clusters.append(
            Cluster(
                label=label,
                members=members,
                centroid=centroid,
                bbox=bbox,
                feature_indices=feature_indices,
                relation_ids=relation_ids,
            )
        )
    clusters.sort(key=lambda c: c.members[0])
    return ClusterSet(clusters)


def bbox_iou_3d(a: np.ndarray, b: np.ndarray, pad: float = 0.0) -> float:
    """IoU of two axis-aligned boxes, each inflated by ``pad`` per side.

    Padding by half a voxel turns center-derived boxes (which collapse to
    zero thickness for flat clusters) back into occupied extents.
    """
    a_lo, a_hi = a[:3] - pad, a[3:] + pad
    b_lo, b_hi = b[:3] - pad, b[3:] + pad
    inter = np.maximum(0.0, np.minimum(a_hi, b_hi) - np.maximum(a_lo, b_lo))
    inter_vol = float(np.prod(inter))
    vol_a = float(np.prod(a_hi - a_lo))
    vol_b = float(np.prod(b_hi - b_lo))
    union = vol_a + vol_b - inter_vol
    if union <= 0:
        return 0.0
    return inter_vol / union


@dataclass
class FusionStats:
    created: list[int] = field(default_factory=list)
    updated: list[int] = field(default_factory=list)
    merges: list[tuple[int, int]] = field(default_factory=list)  # (absorbed, survivor)


def fuse_or_create_objects(
    graph: SceneGraph,
    cluster_set: ClusterSet,
    grid: SemanticVoxelGrid,
    *,
    merge_iou: float = 0.25,
) -> FusionStats:
    """Match clusters against existing objects and update or create nodes.

    A cluster matches same-label objects whose padded-bbox IoU reaches
    ``merge_iou``; the best match absorbs the others (they grew together),
    takes the cluster's geometry, folds the cluster's mesh feature into its
    running mean when one exists, and refreshes its frame-local object_id.
    Object ids of nodes not observed this cycle are cleared so stale ids
    can never key a relation observation. Unmatched clusters become new
    nodes; objects that were not re-observed are retained untouched.
    """
    stats = FusionStats()
    pad = grid.voxel_size / 2.0
    for node in graph.nodes(LAYER_OBJECT).values():
        node.object_id = None
    consumed: set[int] = set()
    for cluster in cluster_set.clusters:
        feature = None
        if cluster.feature_indices:
            if grid.frame_features is None:
                raise ValueError("clusters carry feature indices but the grid has no frame features")
            feature = average_features([grid.frame_features[i] for i in cluster.feature_indices])
        matches = []
        for nid in graph.node_ids(LAYER_OBJECT):
            if nid in consumed:
                continue
            node = graph.nodes(LAYER_OBJECT)[nid]
            if node.label != cluster.label:
                continue
            iou = bbox_iou_3d(node.bbox, cluster.bbox, pad=pad)
            if iou >= merge_iou:
                matches.append((iou, nid))
        if matches:
            matches.sort(key=lambda t: (-t[0], t[1]))
            best = matches[0][1]
            for _, other in matches[1:]:
                graph.merge_objects(best, other)
                consumed.add(other)
                stats.merges.append((other, best))
            node = graph.nodes(LAYER_OBJECT)[best]
            node.centroid = cluster.centroid.copy()
            node.bbox = cluster.bbox.copy()
            if feature is not None:
                node.feature, node.update_count = running_average(
                    node.feature, node.update_count, feature
                )
            node.object_id = cluster.majority_relation_id()
            consumed.add(best)
            stats.updated.append(best)
        else:
            node = ObjectNode(
                centroid=cluster.centroid.copy(),
                bbox=cluster.bbox.copy(),
                label=cluster.label,
                feature=None if feature is None else feature.copy(),
                update_count=0 if feature is None else 1,
                object_id=cluster.majority_relation_id(),
            )
            nid = graph.add_node(LAYER_OBJECT, node)
            consumed.add(nid)
            stats.created.append(nid)
    return stats


# ----------------------------------------------------------- distance transform


_EDT_INF = 1e18


def _edt_1d_squared(f: np.ndarray) -> np.ndarray:
    """Lower-envelope pass of the exact squared Euclidean distance transform."""
    n = len(f)
    d = np.empty(n)
    v = np.zeros(n, dtype=np.int64)
    z = np.empty(n + 1)
    k = 0
    z[0], z[1] = -math.inf, math.inf
    for q in range(1, n):
        s = ((f[q] + q * q) - (f[v[k]] + v[k] * v[k])) / (2 * q - 2 * v[k])
        while s <= z[k]:
            k -= 1
            s = ((f[q] + q * q) - (f[v[k]] + v[k] * v[k])) / (2 * q - 2 * v[k])
        k += 1
        v[k] = q
        z[k] = s
        z[k + 1] = math.inf
    k = 0
    for q in range(n):
        while z[k + 1] < q:
            k += 1
        d[q] = (q - v[k]) ** 2 + f[v[k]]
    return d


def distance_transform(free: np.ndarray) -> np.ndarray:
    """Exact Euclidean distance (in cells) from each cell to non-free space.

    Cells outside the array count as non-free, so the mask is processed
    with an implicit blocked border.
    """
    free = np.asarray(free, dtype=bool)
    padded = np.pad(free, 1, constant_values=False)
    f = np.where(padded, _EDT_INF, 0.0)
    for col in range(f.shape[1]):
        f[:, col] = _edt_1d_squared(f[:, col])
    for row in range(f.shape[0]):
        f[row, :] = _edt_1d_squared(f[row, :])
    return np.sqrt(f[1:-1, 1:-1])


# --------------------------------------------------------------------- places


@dataclass
class PlaceCandidate:
    cell: tuple[int, int]  # (ix, iy) grid cell
    centroid: np.ndarray  # world xyz
    clearance_m: float


def _line_of_sight(free: np.ndarray, origin: tuple[int, int], a, b) -> bool:
    """True when the straight segment between two cells stays in free space."""
    ax, ay = a[0] - origin[0], a[1] - origin[1]
    bx, by = b[0] - origin[0], b[1] - origin[1]
    steps = max(1, int(4 * max(abs(bx - ax), abs(by - ay))))
    for i in range(steps + 1):
        t = i / steps
        x = ax + t * (bx - ax)
        y = ay + t * (by - ay)
        ix, iy = int(round(x)), int(round(y))
        if not (0 <= iy < free.shape[0] and 0 <= ix < free.shape[1]) or not free[iy, ix]:
            return False
    return True


def extract_places(
    grid: SemanticVoxelGrid,
    *,
    z_min: float = 0.1,
    z_max: float = 1.8,
    min_separation_m: float = 0.8,
    neighbor_k: int = 4,
) -> tuple[list[PlaceCandidate], list[tuple[int, int]]]:
    """Pick well-cleared free-space cells and connect mutually-near ones.

    Ridge cells (local maxima of the free-space distance transform,
    plateaus included) are greedily thinned to ``min_separation_m``; edges
    join places that appear in each other's ``neighbor_k`` nearest sets and
    whose connecting segment stays in free space. Returned edge indices
    refer to the candidate list, which is ordered by decreasing clearance.
    """
    slab = grid.occupancy_slab(z_min, z_max)
    if slab is None:
        return [], []
    free, (ox, oy) = slab
    if not free.any():
        return [], []
    dist = distance_transform(free)
    h, w = free.shape
    candidates = []
    for iy in range(h):
        for ix in range(w):
            if not free[iy, ix] or dist[iy, ix] < 1.0:
                continue
            is_max = True
            for dx, dy in NEIGHBORS_8:
                ny, nx = iy + dy, ix + dx
                if 0 <= ny < h and 0 <= nx < w and dist[ny, nx] > dist[iy, ix]:
                    is_max = False
                    break
            if is_max:
                candidates.append((-dist[iy, ix], ix, iy))
    candidates.sort()
    min_sep_cells = min_separation_m / grid.voxel_size
    chosen: list[tuple[int, int]] = []
    clearances: list[float] = []
    for neg_d, ix, iy in candidates:
        if all((ix - cx) ** 2 + (iy - cy) ** 2 >= min_sep_cells**2 for cx, cy in chosen):
            chosen.append((ix, iy))
            clearances.append(-neg_d)
    z_mid = (z_min + z_max) / 2.0
    places = [
        PlaceCandidate(
            cell=(ox + ix, oy + iy),
            centroid=np.array(
                [(ox + ix + 0.5) * grid.voxel_size, (oy + iy + 0.5) * grid.voxel_size, z_mid]
            ),
            clearance_m=clearance * grid.voxel_size,
        )
        for (ix, iy), clearance in zip(chosen, clearances)
    ]
    edges: list[tuple[int, int]] = []
    if len(places) > 1:
        pts = np.array([p.cell for p in places], dtype=np.float64)
        d2 = np.sum((pts[:, None, :] - pts[None, :, :]) ** 2, axis=-1)
        np.fill_diagonal(d2, np.inf)
        k = min(neighbor_k, len(places) - 1)
        nearest = [set(np.argsort(d2[i], kind="stable")[:k].tolist()) for i in range(len(places))]
        for i in range(len(places)):
            for j in range(i + 1, len(places)):
                if j in nearest[i] and i in nearest[j]:
                    if _line_of_sight(free, (ox, oy), places[i].cell, places[j].cell):
                        edges.append((i, j))
    return places, edges


def update_places(
    graph: SceneGraph,
    grid: SemanticVoxelGrid,
    *,
    z_min: float,
    z_max: float,
    min_separation_m: float,
    neighbor_k: int,
) -> list[int]:
    """Replace the place layer from the current grid and re-parent objects."""
    candidates, edges = extract_places(
        grid, z_min=z_min, z_max=z_max, min_separation_m=min_separation_m, neighbor_k=neighbor_k
    )
    for nid in graph.node_ids(LAYER_PLACE):
        graph.remove_node(nid)
    ids = [graph.add_node(LAYER_PLACE, PlaceNode(centroid=c.centroid)) for c in candidates]
    for i, j in edges:
        graph.nodes(LAYER_PLACE)[ids[i]].neighbors.add(ids[j])
        graph.nodes(LAYER_PLACE)[ids[j]].neighbors.add(ids[i])
    if ids:
        place_pts = np.array([candidates[i].centroid for i in range(len(ids))])
        for oid in graph.node_ids(LAYER_OBJECT):
            obj = graph.nodes(LAYER_OBJECT)[oid]
            dists = np.linalg.norm(place_pts - obj.centroid, axis=1)
            graph.set_parent(oid, ids[int(np.argmin(dists))])
    return ids


# ---------------------------------------------------------------------- rooms


@dataclass
class RoomRegion:
    cells: set[tuple[int, int]]  # (ix, iy) grid cells
    centroid: np.ndarray


def room_regions(
    grid: SemanticVoxelGrid, *, z_min: float, z_max: float, door_radius_m: float
) -> list[RoomRegion]:
    """Erode free space by the door radius; surviving components are rooms."""
    slab = grid.occupancy_slab(z_min, z_max)
    if slab is None:
        return []
    free, (ox, oy) = slab
    dist = distance_transform(free)
    radius_cells = door_radius_m / grid.voxel_size
    survivors = free & (dist > radius_cells + 1e-9)
    h, w = survivors.shape
    seen = np.zeros_like(survivors)
    regions: list[RoomRegion] = []
    z_mid = (z_min + z_max) / 2.0
    for iy in range(h):
        for ix in range(w):
            if not survivors[iy, ix] or seen[iy, ix]:
                continue
            component = []
            queue = deque([(ix, iy)])
            seen[iy, ix] = True
            while queue:
                cx, cy = queue.popleft()
                component.append((cx, cy))
                for dx, dy in NEIGHBORS_8:
                    nx, ny = cx + dx, cy + dy
                    if 0 <= ny < h and 0 <= nx < w and survivors[ny, nx] and not seen[ny, nx]:
                        seen[ny, nx] = True
                        queue.append((nx, ny))
            cells = {(ox + cx, oy + cy) for cx, cy in component}
            arr = np.array(sorted(cells), dtype=np.float64)
            centroid = np.array(
                [
                    (arr[:, 0].mean() + 0.5) * grid.voxel_size,
                    (arr[:, 1].mean() + 0.5) * grid.voxel_size,
                    z_mid,
                ]
            )
            regions.append(RoomRegion(cells=cells, centroid=centroid))
    regions.sort(key=lambda r: min(r.cells))
    return regions


def detect_rooms(
    graph: SceneGraph,
    grid: SemanticVoxelGrid,
    *,
    z_min: float,
    z_max: float,
    door_radius_m: float,
) -> list[int]:
    """Replace the room layer, parent places to rooms, maintain the building.

    Places landing on an eroded cell attach to the nearest room centroid.
    The single building node is created once rooms exist and keeps its id
    across re-detections; its centroid is the mean of room centroids.
    """
    regions = room_regions(grid, z_min=z_min, z_max=z_max, door_radius_m=door_radius_m)
    for nid in graph.node_ids(LAYER_ROOM):
        graph.remove_node(nid)
    room_ids = [
        graph.add_node(LAYER_ROOM, RoomNode(centroid=r.centroid, extent=r.cells))
        for r in regions
    ]
    if not room_ids:
        return []
    cell_to_room = {}
    for rid, region in zip(room_ids, regions):
        for cell in region.cells:
            cell_to_room[cell] = rid
    centroids = np.array([r.centroid for r in regions])
    for pid in graph.node_ids(LAYER_PLACE):
        place = graph.nodes(LAYER_PLACE)[pid]
        cell = grid.cell_2d(place.centroid)
        rid = cell_to_room.get(cell)
        if rid is None:
            dists = np.linalg.norm(centroids[:, :2] - place.centroid[:2], axis=1)
            rid = room_ids[int(np.argmin(dists))]
        graph.set_parent(pid, rid)
    buildings = graph.node_ids(LAYER_BUILDING)
    building_centroid = centroids.mean(axis=0)
    if buildings:
        bid = buildings[0]
        graph.nodes(LAYER_BUILDING)[bid].centroid = building_centroid
    else:
        bid = graph.add_node(LAYER_BUILDING, BuildingNode(centroid=building_centroid))
    for rid in room_ids:
        graph.set_parent(rid, bid)
    return room_ids
