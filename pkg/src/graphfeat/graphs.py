"""Weighted radius graphs over patches, propagation matrices, and value labels."""

from __future__ import annotations

import heapq
from collections import deque
from dataclasses import dataclass

import numpy as np

from .patching import Patch

DEGREE_FLOOR = 1e-8
DEFAULT_RADIUS_MULTIPLIER = 2.5


@dataclass
class PatchGraph:
    """Node features plus the symmetric distance-weighted adjacency of a patch.

    Edge j-k exists iff the local distance d is below `radius_used`, with
    weight radius/(radius + d); the diagonal is zero. `degree` holds the
    floored row sums.
    """

    node_features: np.ndarray
    adjacency: np.ndarray
    degree: np.ndarray
    radius_used: float

    @property
    def num_nodes(self) -> int:
        return self.node_features.shape[0]


@dataclass
class ValueLabels:
    """Per-node saliency targets in [0, 1]; the keypoint node is valued 1."""

    values: np.ndarray
    keypoint_index: int


def _local_average_resolution(positions: np.ndarray) -> float:
    d2 = np.sum((positions[:, None, :] - positions[None, :, :]) ** 2, axis=2)
    np.fill_diagonal(d2, np.inf)
    return float(np.sqrt(d2.min(axis=1)).mean())


def build_graph(patch: Patch, radius: float | None = None,
                radius_multiplier: float = DEFAULT_RADIUS_MULTIPLIER) -> PatchGraph:
    """Build the weighted radius graph of a patch in its local frame.

    When `radius` is omitted it is `radius_multiplier` times the patch's
    average local point spacing.
    """
    if patch.local_points is None:
        raise ValueError("patch must be in its local frame (see to_local_frame)")
    features = patch.local_points
    positions = features[:, :3]
    n = len(positions)
    if radius is None:
        if n < 2:
            raise ValueError("cannot derive a radius from a single-point patch")
        radius = radius_multiplier * _local_average_resolution(positions)
    if radius <= 0:
        raise ValueError("radius must be > 0")
    diff = positions[:, None, :] - positions[None, :, :]
    dist = np.sqrt(np.sum(diff * diff, axis=2))
    adjacency = np.where(dist < radius, radius / (radius + dist), 0.0)
    np.fill_diagonal(adjacency, 0.0)
    if not np.any(adjacency > 0):
        raise ValueError(f"graph has no edges: radius {radius} too small for patch")
    # Summing each row in sorted order keeps degrees bit-identical under any
    # node permutation (same multiset of addends, same summation order).
    degree = np.maximum(np.sort(adjacency, axis=1).sum(axis=1), DEGREE_FLOOR)
    return PatchGraph(node_features=features.copy(), adjacency=adjacency,
                      degree=degree, radius_used=float(radius))


def propagation_matrix(graph: PatchGraph) -> np.ndarray:
    """Symmetrically normalized adjacency D^(-1/2) A D^(-1/2)."""
    inv_sqrt = 1.0 / np.sqrt(graph.degree)
    return graph.adjacency * np.outer(inv_sqrt, inv_sqrt)


def shortest_hops(graph: PatchGraph, target: int) -> np.ndarray:
    """Unweighted BFS hop counts to `target`; unreachable nodes get inf."""
    n = graph.num_nodes
    if not 0 <= target < n:
        raise ValueError(f"target {target} out of range [0, {n})")
    hops = np.full(n, np.inf)
    hops[target] = 0.0
    queue = deque([target])
    adj = graph.adjacency > 0
    while queue:
        node = queue.popleft()
        for nbr in np.flatnonzero(adj[node]):
            if np.isinf(hops[nbr]):
                hops[nbr] = hops[node] + 1
                queue.append(int(nbr))
    return hops


def geodesic_distances(graph: PatchGraph, target: int) -> np.ndarray:
    """Dijkstra distances to `target` using local edge lengths (ablation path)."""
    n = graph.num_nodes
    if not 0 <= target < n:
        raise ValueError(f"target {target} out of range [0, {n})")
    positions = graph.node_features[:, :3]
    dist = np.full(n, np.inf)
    dist[target] = 0.0
    heap = [(0.0, target)]
    adj = graph.adjacency > 0
    while heap:
        d, node = heapq.heappop(heap)
        if d > dist[node]:
            continue
        for nbr in np.flatnonzero(adj[node]):
            step = float(np.linalg.norm(positions[node] - positions[nbr]))
            cand = d + step
            if cand < dist[nbr]:
                dist[nbr] = cand
                heapq.heappush(heap, (cand, int(nbr)))
    return dist


def label_values(graph: PatchGraph, keypoint: int, weighted: bool = False) -> ValueLabels:
    """Value targets 1/(1 + distance-to-keypoint); unreachable nodes get 0.

    Distance is the BFS hop count by default; `weighted=True` switches to
    geodesic edge lengths.
    """
    dist = geodesic_distances(graph, keypoint) if weighted else shortest_hops(graph, keypoint)
    values = 1.0 / (1.0 + dist)
    return ValueLabels(values=values, keypoint_index=keypoint)
