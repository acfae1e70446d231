"""Input checks shared by the estimators and the harness."""
from __future__ import annotations

import numpy as np

from .dataset import Dataset
from .grid import MASK_PATTERNS, PFGraph

_LEGAL = np.array(list(MASK_PATTERNS.values()))


def check_mask(mask) -> np.ndarray:
    mask = np.asarray(mask, dtype=float)
    if mask.ndim != 2 or mask.shape[1] != 4:
        raise ValueError(f"mask must be N x 4, got shape {mask.shape}")
    legal = (mask[:, None, :] == _LEGAL[None]).all(axis=2).any(axis=1)
    if not legal.all():
        bad = np.flatnonzero(~legal)[:5]
        raise ValueError(f"mask rows {bad.tolist()} are not PQ/PV/slack patterns")
    return mask


def check_graph(graph: PFGraph, labeled: bool = False) -> PFGraph:
    if not isinstance(graph, PFGraph):
        raise TypeError(f"expected PFGraph, got {type(graph).__name__}")
    n = graph.n
    if graph.x.shape != (n, 4):
        raise ValueError(f"x must be N x 4, got {graph.x.shape}")
    check_mask(graph.mask)
    if graph.mask.shape[0] != n:
        raise ValueError("mask and x disagree on node count")
    if np.any(graph.x[graph.mask == 1] != 0):
        raise ValueError("unknown slots of x must be zero")
    edges = np.asarray(graph.edges)
    if edges.ndim != 2 or edges.shape[1] != 2 or edges.min(initial=0) < 0 or edges.max(initial=0) >= n:
        raise ValueError("edges must be E x 2 node indices")
    if graph.edge_attr.shape != (edges.shape[0], 2):
        raise ValueError(f"edge_attr must be E x 2, got {graph.edge_attr.shape}")
    if not np.all(np.isfinite(graph.x)) or not np.all(np.isfinite(graph.edge_attr)):
        raise ValueError("graph features must be finite")
    if labeled and (graph.y is None or graph.y.shape != (n, 4)):
        raise ValueError("graph needs N x 4 labels y")
    return graph


def check_dataset(ds) -> Dataset:
    if not isinstance(ds, Dataset):
        raise TypeError(f"expected Dataset, got {type(ds).__name__}")
    check_mask(ds.mask)
    S, n, _ = ds.x.shape
    if ds.y.shape != (S, n, 4) or ds.edge_attr.shape != (S, ds.n_edges, 2):
        raise ValueError("dataset arrays disagree in shape")
    for name in ("train", "val", "test"):
        lo, hi = ds.splits[name]
        if not 0 <= lo <= hi <= S:
            raise ValueError(f"split {name} range {lo}:{hi} outside 0:{S}")
    return ds


def check_datasets(X) -> list[Dataset]:
    if isinstance(X, Dataset):
        return [check_dataset(X)]
    items = list(X)
    if not items:
        raise ValueError("no datasets given")
    return [check_dataset(d) for d in items]
