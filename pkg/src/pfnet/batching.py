"""Disjoint-union batching of graphs and the normalized shift operator."""
from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np
import scipy.sparse as sp

from .grid import PFGraph


def shift_operator(edges: np.ndarray, n: int) -> sp.csr_matrix:
    """``D^-1/2 A D^-1/2`` for the undirected 0/1 adjacency of ``edges``."""
    edges = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
    a = sp.coo_matrix((np.ones(2 * len(edges)),
                       (np.concatenate([edges[:, 0], edges[:, 1]]),
                        np.concatenate([edges[:, 1], edges[:, 0]]))), shape=(n, n)).tocsr()
    a.data[:] = 1.0  # parallel entries collapse to one
    deg = np.asarray(a.sum(axis=1)).ravel()
    if np.any(deg == 0):
        raise ValueError("shift operator undefined for isolated nodes")
    d = sp.diags(1.0 / np.sqrt(deg))
    return (d @ a @ d).tocsr()


@dataclass(eq=False)
class GraphBatch:
    """Several graphs stacked as one block-diagonal graph.

    ``src``/``dst`` hold both orientations of every line; ``edge_attr`` rows
    follow the same directed order.
    """

    x: np.ndarray
    mask: np.ndarray
    edge_attr: np.ndarray
    src: np.ndarray
    dst: np.ndarray
    S: sp.csr_matrix
    sizes: np.ndarray
    y: np.ndarray | None = None

    @property
    def n(self) -> int:
        return self.x.shape[0]

    @property
    def n_graphs(self) -> int:
        return len(self.sizes)

    @property
    def offsets(self) -> np.ndarray:
        return np.concatenate([[0], np.cumsum(self.sizes)])


def _directed(edges, offset=0):
    e = np.asarray(edges, dtype=np.int64) + offset
    return np.concatenate([e[:, 1], e[:, 0]]), np.concatenate([e[:, 0], e[:, 1]])


@lru_cache(maxsize=64)
def _tiled_topology(edges_bytes: bytes, n: int, copies: int):
    edges = np.frombuffer(edges_bytes, dtype=np.int64).reshape(-1, 2)
    src, dst = _directed(edges)
    offs = (np.arange(copies) * n)[:, None]
    S = sp.block_diag([shift_operator(edges, n)] * copies, format="csr")
    return (src[None] + offs).ravel(), (dst[None] + offs).ravel(), S


def batch_arrays(x, y, edge_attr, edges, mask) -> GraphBatch:
    """Batch ``B`` samples sharing one topology (``x``: ``B x N x 4``)."""
    B, n, _ = x.shape
    src, dst, S = _tiled_topology(np.ascontiguousarray(edges, dtype=np.int64).tobytes(), n, B)
    ea = np.concatenate([edge_attr, edge_attr], axis=1)
    return GraphBatch(
        x=x.reshape(B * n, -1), mask=np.tile(mask, (B, 1)), edge_attr=ea.reshape(-1, ea.shape[-1]),
        src=src, dst=dst, S=S, sizes=np.full(B, n), y=None if y is None else y.reshape(B * n, -1))


def collate(graphs: list[PFGraph]) -> GraphBatch:
    """Block-diagonal union of arbitrary graphs (node counts may differ)."""
    srcs, dsts, offset = [], [], 0
    for g in graphs:
        s, d = _directed(g.edges, offset)
        srcs.append(s)
        dsts.append(d)
        offset += g.n
    ys = [g.y for g in graphs]
    return GraphBatch(
        x=np.concatenate([g.x for g in graphs]),
        mask=np.concatenate([g.mask for g in graphs]),
        edge_attr=np.concatenate([np.concatenate([g.edge_attr, g.edge_attr]) for g in graphs]),
        src=np.concatenate(srcs), dst=np.concatenate(dsts),
        S=sp.block_diag([shift_operator(g.edges, g.n) for g in graphs], format="csr"),
        sizes=np.array([g.n for g in graphs]),
        y=None if any(v is None for v in ys) else np.concatenate(ys))
