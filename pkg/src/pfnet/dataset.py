"""Scenario generation, normalization statistics and the binary dataset container.

Scenario ``k`` of a dataset seeded with ``s`` draws from
``numpy.random.Generator(PCG64(SeedSequence([s, k, attempt])))``, where
``attempt`` counts resamples after a non-converged solve. The sample at a given
index therefore does not depend on ``count`` or on the number of workers.
"""
from __future__ import annotations

import hashlib
import logging
import os
import struct
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .grid import GridCase, PFGraph, case_to_graph, simplify_case
from .solve import SolverConfig, newton_raphson

__all__ = [
    "PerturbSpec", "NormStats", "Dataset", "DatasetError", "perturb_case", "generate_dataset",
    "compute_norm", "normalize", "denormalize", "save_dataset", "load_dataset",
    "topology_fingerprint", "split_sizes",
]

log = logging.getLogger(__name__)

MAX_ATTEMPTS_PER_SAMPLE = 10


class DatasetError(RuntimeError):
    pass


@dataclass(frozen=True)
class PerturbSpec:
    line_scale_lo: float = 0.8
    line_scale_hi: float = 1.2
    gen_vm_lo: float = 1.00
    gen_vm_hi: float = 1.05
    gen_p_sigma_frac: float = 0.1
    load_sigma_frac: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if not self.line_scale_lo < self.line_scale_hi:
            raise ValueError("line_scale_lo must be < line_scale_hi")
        if not self.gen_vm_lo < self.gen_vm_hi:
            raise ValueError("gen_vm_lo must be < gen_vm_hi")
        if self.gen_p_sigma_frac < 0 or self.load_sigma_frac < 0:
            raise ValueError("sigma fractions must be non-negative")


def scenario_rng(seed: int, index: int, attempt: int = 0) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, index, attempt])))


def perturb_case(base: GridCase, spec: PerturbSpec, rng: np.random.Generator) -> GridCase:
    """Randomize line impedances, generator setpoints and loads.

    Draw order: branch (r, x) scales, one voltage setpoint per generator bus,
    non-slack generator active power, then bus loads (P, Q).
    """
    nb = len(base.branches)
    scale = rng.uniform(spec.line_scale_lo, spec.line_scale_hi, size=(nb, 2))
    branches = [replace(br, r=br.r * s[0], x=br.x * s[1]) for br, s in zip(base.branches, scale)]

    gen_buses = sorted({g.bus for g in base.gens})
    vm_draw = dict(zip(gen_buses, rng.uniform(spec.gen_vm_lo, spec.gen_vm_hi, size=len(gen_buses))))
    slack = base.slack
    p_nom = np.array([g.p_set for g in base.gens])
    p_new = rng.normal(p_nom, spec.gen_p_sigma_frac * np.abs(p_nom))
    gens = [replace(g, vm_set=float(vm_draw[g.bus]), p_set=g.p_set if g.bus == slack else float(pn))
            for g, pn in zip(base.gens, p_new)]

    pd = np.array([b.p_demand for b in base.buses])
    qd = np.array([b.q_demand for b in base.buses])
    pd_new = rng.normal(pd, spec.load_sigma_frac * np.abs(pd))
    qd_new = rng.normal(qd, spec.load_sigma_frac * np.abs(qd))
    buses = [replace(b, p_demand=float(p), q_demand=float(q), vm=vm_draw.get(i, b.vm))
             for i, (b, p, q) in enumerate(zip(base.buses, pd_new, qd_new))]
    return GridCase(base.base_mva, buses, branches, gens, name=base.name)


@dataclass(frozen=True)
class NormStats:
    mean: np.ndarray
    std: np.ndarray
    edge_mean: np.ndarray
    edge_std: np.ndarray

    def as_vector(self) -> np.ndarray:
        return np.concatenate([self.mean, self.std, self.edge_mean, self.edge_std]).astype("<f8")

    @classmethod
    def from_vector(cls, v) -> "NormStats":
        v = np.asarray(v, dtype=float)
        return cls(v[0:4].copy(), v[4:8].copy(), v[8:10].copy(), v[10:12].copy())

    def __eq__(self, other):
        return isinstance(other, NormStats) and np.array_equal(self.as_vector(), other.as_vector())

    __hash__ = None


def _clamped_std(values, axis=0):
    std = values.std(axis=axis)
    return np.where(std > 0, std, 1.0)


def compute_norm(x: np.ndarray, mask: np.ndarray, edge_attr: np.ndarray) -> NormStats:
    """Channel statistics over the *known* entries of ``x`` (shape ``S x N x 4``)."""
    known = np.broadcast_to(mask == 0, x.shape)
    mean = np.zeros(4)
    std = np.ones(4)
    for c in range(4):
        vals = x[..., c][known[..., c]]
        if vals.size:
            mean[c] = vals.mean()
            s = vals.std()
            std[c] = s if s > 0 else 1.0
    e = edge_attr.reshape(-1, edge_attr.shape[-1])
    return NormStats(mean, std, e.mean(axis=0), _clamped_std(e))


def normalize(graph: PFGraph, norm: NormStats) -> PFGraph:
    x = np.where(graph.mask == 1, 0.0, (graph.x - norm.mean) / norm.std)
    y = None if graph.y is None else (graph.y - norm.mean) / norm.std
    e = (graph.edge_attr - norm.edge_mean) / norm.edge_std
    return graph.with_(x=x, y=y, edge_attr=e)


def denormalize(graph: PFGraph, norm: NormStats) -> PFGraph:
    x = np.where(graph.mask == 1, 0.0, graph.x * norm.std + norm.mean)
    y = None if graph.y is None else graph.y * norm.std + norm.mean
    e = graph.edge_attr * norm.edge_std + norm.edge_mean
    return graph.with_(x=x, y=y, edge_attr=e)


def topology_fingerprint(edges: np.ndarray, mask: np.ndarray) -> str:
    h = hashlib.sha256()
    h.update(np.ascontiguousarray(edges, dtype="<i8").tobytes())
    h.update(np.ascontiguousarray(mask, dtype="<f8").tobytes())
    return h.hexdigest()


def split_sizes(count: int, fractions) -> tuple[int, int, int]:
    """Floor the validation and test shares; training takes the remainder."""
    f_train, f_val, f_test = fractions
    if min(fractions) < 0 or abs(f_train + f_val + f_test - 1.0) > 1e-9:
        raise ValueError(f"split fractions must be non-negative and sum to 1, got {fractions}")
    n_val = int(np.floor(f_val * count + 1e-9))
    n_test = int(np.floor(f_test * count + 1e-9))
    return count - n_val - n_test, n_val, n_test


@dataclass(eq=False)
class Dataset:
    """Samples of one topology, stored unnormalized.

    ``x``/``y`` are ``S x N x 4``, ``edge_attr`` is ``S x E x 2``; ``edges`` and
    ``mask`` are shared by every sample.
    """

    x: np.ndarray
    y: np.ndarray
    edge_attr: np.ndarray
    edges: np.ndarray
    mask: np.ndarray
    norm: NormStats
    splits: dict[str, tuple[int, int]]
    base_mva: float = 100.0
    name: str = "case"

    def __len__(self):
        return self.x.shape[0]

    @property
    def n_nodes(self) -> int:
        return self.x.shape[1]

    @property
    def n_edges(self) -> int:
        return self.edges.shape[0]

    @property
    def fingerprint(self) -> str:
        return topology_fingerprint(self.edges, self.mask)

    def indices(self, split: str) -> np.ndarray:
        lo, hi = self.splits[split]
        return np.arange(lo, hi)

    def graph(self, k: int) -> PFGraph:
        return PFGraph(x=self.x[k], mask=self.mask, edges=self.edges, edge_attr=self.edge_attr[k],
                       y=self.y[k], base_mva=self.base_mva)

    @property
    def graphs(self) -> list[PFGraph]:
        return [self.graph(k) for k in range(len(self))]

    def subset(self, split: str) -> list[PFGraph]:
        return [self.graph(k) for k in self.indices(split)]

    def normalized_arrays(self, norm: NormStats | None = None):
        """``(x, y, edge_attr)`` normalized with ``norm`` (default: own stats)."""
        norm = norm or self.norm
        x = np.where(self.mask == 1, 0.0, (self.x - norm.mean) / norm.std)
        y = (self.y - norm.mean) / norm.std
        e = (self.edge_attr - norm.edge_mean) / norm.edge_std
        return x, y, e


def _solve_index(args):
    base, spec, k, cfg = args
    for attempt in range(MAX_ATTEMPTS_PER_SAMPLE):
        case = simplify_case(perturb_case(base, spec, scenario_rng(spec.seed, k, attempt)))
        sol = newton_raphson(case, cfg)
        if sol.converged:
            g = case_to_graph(case, sol)
            return k, attempt, g.x, g.y, g.edge_attr, g.edges, g.mask
    return k, MAX_ATTEMPTS_PER_SAMPLE, None, None, None, None, None


def _workers(requested):
    cap = int(os.environ.get("PFNET_THREADS", 0) or 0)
    n = requested if requested is not None else (cap or 1)
    return max(1, min(n, cap) if cap else n)


def generate_dataset(base: GridCase, spec: PerturbSpec, count: int, splits=(0.5, 0.2, 0.3),
                     solver: SolverConfig | None = None, workers: int | None = None) -> Dataset:
    """Perturb, simplify and solve ``count`` scenarios of ``base``.

    Non-converged scenarios are redrawn (at most ten attempts per index).
    Normalization statistics come from the training split only.
    """
    if count < 1:
        raise ValueError("count must be >= 1")
    sizes = split_sizes(count, splits)
    cfg = solver or SolverConfig()
    jobs = [(base, spec, k, cfg) for k in range(count)]
    n_workers = _workers(workers)
    if n_workers > 1 and count > 1:
        with ProcessPoolExecutor(max_workers=n_workers) as pool:
            results = list(pool.map(_solve_index, jobs, chunksize=max(1, count // (4 * n_workers))))
    else:
        results = [_solve_index(j) for j in jobs]

    results.sort(key=lambda r: r[0])
    resampled = 0
    for k, attempts, x, *_ in results:
        if x is None:
            raise DatasetError(f"scenario {k}: no convergent draw in {MAX_ATTEMPTS_PER_SAMPLE} attempts")
        resampled += attempts
    if resampled:
        log.info("resampled %d non-convergent scenarios", resampled)

    edges, mask = results[0][5], results[0][6]
    X = np.stack([r[2] for r in results])
    Y = np.stack([r[3] for r in results])
    E = np.stack([r[4] for r in results])
    n_train, n_val, n_test = sizes
    split_map = {"train": (0, n_train), "val": (n_train, n_train + n_val),
                 "test": (n_train + n_val, count)}
    train = slice(0, n_train) if n_train else slice(0, count)
    norm = compute_norm(X[train], mask, E[train])
    return Dataset(X, Y, E, edges, mask, norm, split_map, base_mva=base.base_mva, name=base.name)


# --------------------------------------------------------------------------
# binary container

_MAGIC = b"PFNETDS\x00"
_VERSION = 1
_LAYOUT = b"x:vm,va,p,q;edge:r,x;f8le"
_HEADER = struct.Struct("<8sIIIQdH")


def save_dataset(ds: Dataset, path: str | Path) -> None:
    name = ds.name.encode()
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(_MAGIC, _VERSION, ds.n_nodes, ds.n_edges, len(ds), ds.base_mva, len(_LAYOUT)))
        fh.write(_LAYOUT)
        fh.write(struct.pack("<H", len(name)) + name)
        fh.write(np.ascontiguousarray(ds.edges, dtype="<i8").tobytes())
        fh.write(np.ascontiguousarray(ds.mask, dtype="<f8").tobytes())
        fh.write(ds.norm.as_vector().tobytes())
        bounds = [ds.splits[s][i] for s in ("train", "val", "test") for i in (0, 1)]
        fh.write(np.array(bounds, dtype="<i8").tobytes())
        for k in range(len(ds)):
            fh.write(np.ascontiguousarray(ds.x[k], dtype="<f8").tobytes())
            fh.write(np.ascontiguousarray(ds.y[k], dtype="<f8").tobytes())
            fh.write(np.ascontiguousarray(ds.edge_attr[k], dtype="<f8").tobytes())


def load_dataset(path: str | Path) -> Dataset:
    buf = Path(path).read_bytes()
    try:
        magic, version, n, e, s, base, lay_len = _HEADER.unpack_from(buf, 0)
    except struct.error:
        raise DatasetError(f"{path}: truncated header") from None
    if magic != _MAGIC:
        raise DatasetError(f"{path}: not a dataset file")
    if version != _VERSION:
        raise DatasetError(f"{path}: unsupported dataset version {version}")
    off = _HEADER.size
    layout = buf[off:off + lay_len]
    if layout != _LAYOUT:
        raise DatasetError(f"{path}: unknown feature layout {layout!r}")
    off += lay_len
    (name_len,) = struct.unpack_from("<H", buf, off)
    off += 2
    name = buf[off:off + name_len].decode()
    off += name_len

    def take(count, dtype):
        nonlocal off
        arr = np.frombuffer(buf, dtype=dtype, count=count, offset=off)
        off += arr.nbytes
        return arr

    edges = take(2 * e, "<i8").reshape(e, 2).astype(np.int64)
    mask = take(4 * n, "<f8").reshape(n, 4).astype(float)
    norm = NormStats.from_vector(take(12, "<f8"))
    b = take(6, "<i8")
    splits = {"train": (int(b[0]), int(b[1])), "val": (int(b[2]), int(b[3])), "test": (int(b[4]), int(b[5]))}
    per = 4 * n + 4 * n + 2 * e
    if len(buf) - off != per * s * 8:
        raise DatasetError(f"{path}: expected {s} samples, payload size mismatch")
    block = take(per * s, "<f8").reshape(s, per).astype(float)
    X = block[:, :4 * n].reshape(s, n, 4).copy()
    Y = block[:, 4 * n:8 * n].reshape(s, n, 4).copy()
    E = block[:, 8 * n:].reshape(s, e, 2).copy()
    return Dataset(X, Y, E, edges, mask, norm, splits, base_mva=float(base), name=name)
