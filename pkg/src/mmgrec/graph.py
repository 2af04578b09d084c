"""User-item bipartite graph and light (linear, normalized) propagation."""
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .errors import ShapeError
from .linalg import spmm_normalized

MAX_LAYERS = 4


@dataclass(frozen=True)
class BipartiteGraph:
    """CSR adjacency over ``n_users + n_items`` nodes, users first.

    Every interaction contributes the two directed edges user->item and
    item->user. ``norm_coeff[e]`` is ``1/sqrt(deg(v) deg(u))`` for the edge
    stored at position ``e`` of ``neighbors``.
    """

    n_users: int
    n_items: int
    offsets: np.ndarray
    neighbors: np.ndarray
    degree: np.ndarray
    norm_coeff: np.ndarray
    operator: sp.csr_matrix = field(repr=False, compare=False)

    @property
    def n_nodes(self) -> int:
        return self.n_users + self.n_items

    @property
    def n_edges(self) -> int:
        return int(self.neighbors.size)

    def neighbors_of(self, node: int) -> np.ndarray:
        return self.neighbors[self.offsets[node]:self.offsets[node + 1]]

    def dense(self) -> np.ndarray:
        return self.operator.toarray()


def build_graph(users, items, n_users: int, n_items: int) -> BipartiteGraph:
    """Build the normalized bipartite graph from training (user, item) pairs.

    Pairs are assumed to be unique.
    """
    users = np.asarray(users, dtype=np.int64).reshape(-1)
    items = np.asarray(items, dtype=np.int64).reshape(-1)
    if users.shape != items.shape:
        raise ShapeError("users and items must have equal length")
    if users.size and (users.min() < 0 or users.max() >= n_users):
        raise ShapeError(f"user index out of range [0, {n_users})")
    if items.size and (items.min() < 0 or items.max() >= n_items):
        raise ShapeError(f"item index out of range [0, {n_items})")

    n = n_users + n_items
    src = np.concatenate([users, items + n_users])
    dst = np.concatenate([items + n_users, users])
    order = np.lexsort((dst, src))
    src, dst = src[order], dst[order]

    degree = np.bincount(src, minlength=n).astype(np.int64)
    offsets = np.zeros(n + 1, dtype=np.int64)
    np.cumsum(degree, out=offsets[1:])
    # Every stored edge has both endpoints with degree >= 1.
    coeff = 1.0 / np.sqrt(degree[src].astype(np.float64) * degree[dst])

    op = sp.csr_matrix((coeff, dst, offsets), shape=(n, n))
    return BipartiteGraph(n_users, n_items, offsets, dst, degree, coeff, op)


def propagate(graph: BipartiteGraph, layer0: np.ndarray, n_layers: int = 2) -> list[np.ndarray]:
    """Return ``[layer0, layer1, ..., layerL]``; callers use the last entry."""
    if not 0 <= n_layers <= MAX_LAYERS:
        raise ValueError(f"n_layers must be in [0, {MAX_LAYERS}]")
    layer0 = np.asarray(layer0, dtype=np.float64)
    if layer0.ndim != 2 or layer0.shape[0] != graph.n_nodes:
        raise ShapeError(f"layer0 must have {graph.n_nodes} rows, got shape {layer0.shape}")
    layers = [layer0]
    for _ in range(n_layers):
        layers.append(spmm_normalized(graph, layers[-1]))
    return layers


def propagate_adjoint(graph: BipartiteGraph, grad_out: np.ndarray, n_layers: int = 2) -> np.ndarray:
    """Pull a gradient w.r.t. the final layer back to layer 0.

    The normalized adjacency is symmetric, so the adjoint is the same
    operator applied ``n_layers`` times.
    """
    grad_out = np.asarray(grad_out, dtype=np.float64)
    if grad_out.ndim != 2 or grad_out.shape[0] != graph.n_nodes:
        raise ShapeError(f"grad_out must have {graph.n_nodes} rows, got shape {grad_out.shape}")
    return propagate(graph, grad_out, n_layers)[-1]
