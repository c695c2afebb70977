"""Road-network structure: adjacency, k-hop neighborhoods, spectral embeddings.

A road graph is undirected and weighted. Tokens for a node are built from its
k-hop neighborhood (breadth-first, nearest hops first), and every node carries
a positional embedding made of eigenvectors of the symmetrically normalized
graph Laplacian.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field

import numpy as np

from .errors import DataError, InputError


@dataclass(frozen=True)
class KHopSpec:
    """Neighborhood request: hop radius `k` and a hard cap on neighbor count."""

    k: int
    max_neighbors: int

    def __post_init__(self):
        if self.k < 0:
            raise InputError(f"hop radius must be >= 0, got {self.k}")
        if self.max_neighbors < 1:
            raise InputError(f"max_neighbors must be >= 1, got {self.max_neighbors}")


@dataclass(frozen=True)
class RoadGraph:
    """Undirected weighted graph over `num_nodes` sensors.

    The adjacency matrix is symmetric with a zero diagonal and non-negative
    weights; `degrees` caches its row sums.
    """

    num_nodes: int
    adjacency: np.ndarray
    degrees: np.ndarray = field(init=False)

    def __post_init__(self):
        adj = np.asarray(self.adjacency, dtype=np.float64)
        if adj.shape != (self.num_nodes, self.num_nodes):
            raise InputError(
                f"adjacency shape {adj.shape} does not match num_nodes={self.num_nodes}"
            )
        if not np.allclose(adj, adj.T, atol=1e-12, rtol=0.0):
            raise InputError("adjacency must be symmetric")
        if np.any(np.diag(adj) != 0.0):
            raise InputError("adjacency diagonal must be zero (no self-loops)")
        if np.any(adj < 0.0):
            raise InputError("edge weights must be non-negative")
        adj = 0.5 * (adj + adj.T)
        adj.setflags(write=False)
        object.__setattr__(self, "adjacency", adj)
        deg = adj.sum(axis=1)
        deg.setflags(write=False)
        object.__setattr__(self, "degrees", deg)

    @classmethod
    def from_edges(
        cls, num_nodes: int, edges: list[tuple[int, int]] | list[tuple[int, int, float]]
    ) -> "RoadGraph":
        adj = np.zeros((num_nodes, num_nodes), dtype=np.float64)
        for edge in edges:
            src, dst = int(edge[0]), int(edge[1])
            weight = float(edge[2]) if len(edge) > 2 else 1.0
            if not (0 <= src < num_nodes and 0 <= dst < num_nodes):
                raise InputError(f"edge ({src},{dst}) out of range for {num_nodes} nodes")
            if src == dst:
                raise InputError(f"self-loop on node {src} is not allowed")
            adj[src, dst] = weight
            adj[dst, src] = weight
        return cls(num_nodes, adj)

    def neighbors(self, v: int) -> np.ndarray:
        """Indices adjacent to `v` (positive-weight edges), ascending."""
        return np.flatnonzero(self.adjacency[v] > 0.0)


@dataclass(frozen=True)
class LaplacianPE:
    """Spectral positional embeddings: one k_pe-dim row per node.

    `eigenvalues` holds the k_pe selected eigenvalues in ascending order;
    columns of `embeddings` are the matching sign-fixed eigenvectors (zero
    columns where the graph had fewer informative modes than requested).
    """

    embeddings: np.ndarray
    eigenvalues: np.ndarray


def khop_neighborhood(graph: RoadGraph, v: int, spec: KHopSpec) -> list[int]:
    """Nodes within `spec.k` hops of `v`, ordered (hop asc, index asc).

    `v` itself is first (hop 0). The list is truncated to
    `spec.max_neighbors` entries after ordering.
    """
    if not (0 <= v < graph.num_nodes):
        raise InputError(f"node {v} out of range for {graph.num_nodes} nodes")
    hops = np.full(graph.num_nodes, -1, dtype=np.int64)
    hops[v] = 0
    queue = deque([v])
    while queue:
        u = queue.popleft()
        if hops[u] == spec.k:
            continue
        for w in graph.neighbors(u):
            if hops[w] < 0:
                hops[w] = hops[u] + 1
                queue.append(w)
    reached = np.flatnonzero(hops >= 0)
    order = np.lexsort((reached, hops[reached]))  # hop major, index minor
    return [int(u) for u in reached[order][: spec.max_neighbors]]


def normalized_laplacian(graph: RoadGraph) -> np.ndarray:
    """D^{-1/2} (D - A) D^{-1/2}, with isolated nodes mapped to zero rows."""
    deg = graph.degrees
    inv_sqrt = np.zeros_like(deg)
    positive = deg > 0.0
    inv_sqrt[positive] = 1.0 / np.sqrt(deg[positive])
    lap = np.diag(deg) - graph.adjacency
    lap = inv_sqrt[:, None] * lap * inv_sqrt[None, :]
    return 0.5 * (lap + lap.T)


def component_count(graph: RoadGraph) -> int:
    """Number of connected components (isolated nodes count as their own)."""
    seen = np.zeros(graph.num_nodes, dtype=bool)
    count = 0
    for start in range(graph.num_nodes):
        if seen[start]:
            continue
        count += 1
        queue = deque([start])
        seen[start] = True
        while queue:
            u = queue.popleft()
            for w in graph.neighbors(u):
                if not seen[w]:
                    seen[w] = True
                    queue.append(w)
    return count


def laplacian_pe(graph: RoadGraph, k_pe: int) -> LaplacianPE:
    """Eigenvector embeddings of the normalized Laplacian.

    Takes the k_pe smallest-eigenvalue eigenvectors after skipping the one
    trivial zero mode per connected component; pads with zero columns when
    the graph has fewer informative modes than requested. Each kept column
    is sign-fixed so its largest-magnitude entry (ties: lowest node index)
    is non-negative.
    """
    if k_pe < 0:
        raise InputError(f"k_pe must be >= 0, got {k_pe}")
    n = graph.num_nodes
    lap = normalized_laplacian(graph)
    evals, evecs = np.linalg.eigh(lap)
    skip = component_count(graph)
    avail = max(0, n - skip)
    take = min(k_pe, avail)
    cols = evecs[:, skip : skip + take].copy()
    vals = evals[skip : skip + take].copy()
    for j in range(take):
        anchor = int(np.argmax(np.abs(cols[:, j])))
        if cols[anchor, j] < 0.0:
            cols[:, j] = -cols[:, j]
    embeddings = np.zeros((n, k_pe), dtype=np.float64)
    embeddings[:, :take] = cols
    eigenvalues = np.zeros(k_pe, dtype=np.float64)
    eigenvalues[:take] = vals
    if take < k_pe and take > 0:
        eigenvalues[take:] = vals[-1]  # repeat so ascending order survives padding
    return LaplacianPE(embeddings=embeddings, eigenvalues=eigenvalues)


def read_edge_list(path, num_nodes: int | None = None) -> RoadGraph:
    """Load "src,dst[,weight]" lines (0-based) into a symmetric RoadGraph.

    Blank lines and lines starting with '#' are skipped. When `num_nodes` is
    None the node count is max index + 1.
    """
    edges: list[tuple[int, int, float]] = []
    max_index = -1
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split(",")
            if len(parts) not in (2, 3):
                raise DataError(f"{path}:{lineno}: expected 'src,dst[,weight]', got {line!r}")
            try:
                src, dst = int(parts[0]), int(parts[1])
                weight = float(parts[2]) if len(parts) == 3 else 1.0
            except ValueError as exc:
                raise DataError(f"{path}:{lineno}: {exc}") from None
            if src < 0 or dst < 0:
                raise DataError(f"{path}:{lineno}: negative node index")
            if src == dst:
                raise DataError(f"{path}:{lineno}: self-loop on node {src}")
            if weight < 0.0:
                raise DataError(f"{path}:{lineno}: negative weight {weight}")
            if num_nodes is not None and (src >= num_nodes or dst >= num_nodes):
                raise DataError(
                    f"{path}:{lineno}: edge ({src},{dst}) out of range for {num_nodes} nodes"
                )
            edges.append((src, dst, weight))
            max_index = max(max_index, src, dst)
    n = num_nodes if num_nodes is not None else max_index + 1
    if n <= 0:
        raise DataError(f"{path}: no nodes found")
    return RoadGraph.from_edges(n, edges)
