"""Skeleton-graph adjacency construction and normalization.

A graph is given as a node count plus a list of undirected (i, j) edges.
Builders return dense float matrices; the symmetric degree normalization
used by every graph convolution lives in ``normalize_aggregator``.
"""

from __future__ import annotations

import numpy as np


def _check_edges(num_nodes: int, edges) -> list[tuple[int, int]]:
    if num_nodes < 1:
        raise ValueError(f"graph needs at least one node, got {num_nodes}")
    out = []
    for e in edges:
        i, j = int(e[0]), int(e[1])
        if not (0 <= i < num_nodes and 0 <= j < num_nodes) or i == j:
            raise ValueError(f"bad edge ({i}, {j}) for {num_nodes} nodes")
        out.append((i, j))
    return out


def hop_distances(num_nodes: int, edges) -> np.ndarray:
    """All-pairs shortest hop counts by BFS; -1 where unreachable."""
    edges = _check_edges(num_nodes, edges)
    neighbors: list[list[int]] = [[] for _ in range(num_nodes)]
    for i, j in edges:
        neighbors[i].append(j)
        neighbors[j].append(i)
    dist = np.full((num_nodes, num_nodes), -1, dtype=np.int64)
    for s in range(num_nodes):
        dist[s, s] = 0
        frontier = [s]
        d = 0
        while frontier:
            d += 1
            nxt = []
            for u in frontier:
                for v in neighbors[u]:
                    if dist[s, v] < 0:
                        dist[s, v] = d
                        nxt.append(v)
            frontier = nxt
    return dist


def natural_adjacency(num_nodes: int, edges, self_loops: bool = True) -> np.ndarray:
    """Binary adjacency of the physical bone structure."""
    edges = _check_edges(num_nodes, edges)
    a = np.zeros((num_nodes, num_nodes))
    for i, j in edges:
        a[i, j] = 1.0
        a[j, i] = 1.0
    if self_loops:
        np.fill_diagonal(a, 1.0)
    return a


def k_adjacency(num_nodes: int, edges, k: int) -> np.ndarray:
    """Relation matrix of exact hop distance k, with self connections.

    Entry (i, j) is 1 when the shortest path between i and j has exactly k
    edges, or when i == j; otherwise 0. k = 0 gives the identity.
    """
    if k < 0:
        raise ValueError(f"hop distance must be non-negative, got {k}")
    dist = hop_distances(num_nodes, edges)
    a = (dist == k).astype(np.float64)
    np.fill_diagonal(a, 1.0)
    return a


def multi_scale_adjacency(num_nodes: int, edges, num_scales: int) -> list[np.ndarray]:
    """The disentangled hop-scale set: k_adjacency(k) for k = 0..num_scales.

    Scale 0 is the pure self map; each further scale reaches exactly k
    hops. num_scales = 4 yields 5 matrices.
    """
    if num_scales < 1:
        raise ValueError(f"need at least one scale, got {num_scales}")
    return [k_adjacency(num_nodes, edges, k) for k in range(num_scales + 1)]


def full_adjacency(num_nodes: int) -> np.ndarray:
    """All-ones adjacency: every node attends to every node."""
    if num_nodes < 1:
        raise ValueError(f"graph needs at least one node, got {num_nodes}")
    return np.ones((num_nodes, num_nodes))


def normalize_aggregator(a: np.ndarray, mask: np.ndarray | None = None) -> np.ndarray:
    """Symmetric degree normalization D^-1/2 (A + M) D^-1/2.

    Degrees come from A alone; the optional learned mask M is added after
    so it perturbs edge weights without shifting the normalization.
    Zero-degree rows map to zero rather than dividing by zero.
    """
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ValueError(f"adjacency must be square, got {a.shape}")
    if mask is not None:
        mask = np.asarray(mask, dtype=np.float64)
        if mask.shape != a.shape:
            raise ValueError(f"mask shape {mask.shape} != adjacency {a.shape}")
    deg = a.sum(axis=1)
    inv_sqrt = np.zeros_like(deg)
    nz = deg > 0
    inv_sqrt[nz] = 1.0 / np.sqrt(deg[nz])
    m = a if mask is None else a + mask
    return inv_sqrt[:, None] * m * inv_sqrt[None, :]


def tile_st_adjacency(a: np.ndarray, tau: int) -> np.ndarray:
    """Tile a (V, V) relation into the (tau*V, tau*V) block matrix whose
    every block is the input, joining each node to its relation partners
    in all tau frames of a temporal window."""
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ValueError(f"adjacency must be square, got {a.shape}")
    if tau < 1:
        raise ValueError(f"window size must be >= 1, got {tau}")
    return np.tile(a, (tau, tau))
