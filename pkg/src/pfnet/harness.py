"""Training, evaluation and the timing/hop/ablation/scale studies."""
from __future__ import annotations

import csv
import io
import logging
import time
from collections import deque
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import losses
from .autodiff import Tensor
from .batching import batch_arrays, collate
from .checkpoint import Checkpoint, CheckpointError
from .dataset import Dataset, normalize
from .estimator import GCNRegressor, GraphRegressor, MLPRegressor, PowerFlowNetRegressor
from .grid import Branch, Bus, BusKind, Generator, GridCase, PFGraph, case_to_graph, simplify_case
from .nn import PRESETS, param_count
from .solve import SolverConfig, dc_power_flow, newton_raphson
from .validation import check_datasets

log = logging.getLogger(__name__)

METRICS_SCHEMA = "pfnet-metrics/1"
TIMING_SCHEMA = "pfnet-timing/1"
TABLE_SCHEMA = "pfnet-table/1"
REFERENCE_PARAMS = {"small": 32_000, "medium": 357_000, "large": 7_375_000}
CHANNEL_UNITS = {"vm": "p.u.", "va": "deg", "p": "MW", "q": "Mvar"}
ESTIMATORS = {"pfnet": PowerFlowNetRegressor, "gcn": GCNRegressor, "mlp": MLPRegressor}


@dataclass
class TrainConfig:
    epochs: int = 300
    batch_size: int = 128
    lr: float = 1e-3
    weight_decay: float = 0.01
    loss: str = "mse"
    w: float = 0.5
    tau: float = 0.02
    seed: int = 0
    early_stop_patience: int = 100

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")

    def estimator_params(self) -> dict:
        return dict(epochs=self.epochs, batch_size=self.batch_size, lr=self.lr,
                    weight_decay=self.weight_decay, loss=self.loss, w=self.w, tau=self.tau,
                    seed=self.seed, patience=self.early_stop_patience)


@dataclass
class EvalReport:
    masked_l2: float
    mse: float
    physical: float
    denorm_errors: dict
    wall_time_per_sample: float
    n_samples: int
    split: str = "test"

    def to_dict(self):
        return asdict(self)


@dataclass
class HopStudyResult:
    ks: list[int]
    node_loss: np.ndarray       # N x len(ks), central-node masked L2
    full_loss: np.ndarray       # N, same metric on the whole graph
    coverage: np.ndarray        # N x len(ks), subgraph node counts
    diameter: int
    extra: dict = field(default_factory=dict)

    def mean_loss(self) -> np.ndarray:
        return self.node_loss.mean(axis=0)

    def to_dict(self):
        return {"ks": self.ks, "diameter": self.diameter, "mean_loss": self.mean_loss().tolist(),
                "full_loss": float(self.full_loss.mean()), "node_loss": self.node_loss.tolist(),
                "coverage": self.coverage.tolist(),
                "mean_coverage": self.coverage.mean(axis=0).tolist()}


# -- training ------------------------------------------------------------------

def train(datasets, model="small", train_cfg: TrainConfig | None = None, arch="pfnet",
          metrics_path=None, **model_kw) -> GraphRegressor:
    """Fit a model and optionally write its epoch curves as CSV."""
    cfg = train_cfg or TrainConfig()
    est = ESTIMATORS[arch](model=model, **model_kw, **cfg.estimator_params())
    est.fit(datasets)
    if metrics_path is not None:
        Path(metrics_path).write_text(metrics_csv(est.history_))
    return est


def metrics_csv(history) -> str:
    buf = io.StringIO()
    buf.write(f"# {METRICS_SCHEMA}\n")
    w = csv.writer(buf, lineterminator="\n")
    cols = ["epoch", "train_loss", "val_masked_l2", "val_mse", "elapsed_s"]
    w.writerow(cols)
    for row in history:
        w.writerow([row[c] if c == "epoch" else repr(float(row[c])) for c in cols])
    return buf.getvalue()


def as_estimator(model) -> GraphRegressor:
    if isinstance(model, Checkpoint):
        return GraphRegressor.from_checkpoint(model)
    return model


# -- evaluation ----------------------------------------------------------------

def score_predictions(ds: Dataset, pred_pu: np.ndarray, split="test", norm=None,
                      seconds: float = 0.0) -> EvalReport:
    """Metrics of per-unit predictions ``S x N x 4`` against the labels of ``split``.

    Masked L2 and MSE are measured after normalizing with ``norm`` (default the
    dataset's own statistics). The physical loss uses the prediction with its
    known slots replaced by the inputs, i.e. the state the model would deliver.
    """
    norm = norm or ds.norm
    idx = ds.indices(split)
    y = ds.y[idx]
    pred_pu = np.asarray(pred_pu, dtype=float)
    if pred_pu.shape != y.shape:
        raise ValueError(f"predictions have shape {pred_pu.shape}, expected {y.shape}")
    mask = np.broadcast_to(ds.mask, y.shape)
    diff = (pred_pu - y) / norm.std
    n_unknown = mask.sum()
    masked = float(np.sum((diff * mask) ** 2) / n_unknown) if n_unknown else 0.0
    mse = float(np.sum(diff ** 2) / (len(idx) * ds.n_nodes)) if len(idx) else 0.0

    delivered = np.where(mask == 1, pred_pu, ds.x[idx])
    physical = physical_loss(ds, delivered, idx)

    abs_err = np.abs(pred_pu - y)
    scale = [1.0, 180.0 / np.pi, ds.base_mva, ds.base_mva]
    errors = {}
    for c, name in enumerate(CHANNEL_UNITS):
        vals = abs_err[..., c][mask[..., c] == 1] * scale[c]
        errors[name] = {"mean": float(vals.mean()) if vals.size else 0.0,
                        "std": float(vals.std()) if vals.size else 0.0,
                        "unit": CHANNEL_UNITS[name]}
    per_sample = 1000.0 * seconds / len(idx) if len(idx) else 0.0
    return EvalReport(masked_l2=masked, mse=mse, physical=physical, denorm_errors=errors,
                      wall_time_per_sample=per_sample, n_samples=int(len(idx)), split=split)


def physical_loss(ds: Dataset, state_pu: np.ndarray, idx=None, chunk=512) -> float:
    """Mean per-node squared power imbalance of per-unit states ``S x N x 4``."""
    idx = np.arange(len(ds)) if idx is None else np.asarray(idx)
    total = 0.0
    for i in range(0, len(idx), chunk):
        sl = idx[i:i + chunk]
        st = state_pu[i:i + chunk]
        b = batch_arrays(st, None, ds.edge_attr[sl], ds.edges, ds.mask)
        val = losses.physical(Tensor(b.x), b.src, b.dst, b.edge_attr).data
        total += float(val) * b.n
    n = len(idx) * ds.n_nodes
    return total / n if n else 0.0


def evaluate(model, ds: Dataset, split="test") -> EvalReport:
    """Score a fitted estimator or checkpoint on one split."""
    est = as_estimator(model)
    if ds.fingerprint not in est.fingerprints_:
        raise CheckpointError(f"dataset topology {ds.fingerprint[:12]} was not seen in training")
    idx = ds.indices(split)
    t0 = time.perf_counter()
    pred = est.predict(ds, idx)
    seconds = time.perf_counter() - t0
    return score_predictions(ds, pred, split, norm=est.norm_, seconds=seconds)


def graph_to_case(graph: PFGraph, name="graph") -> GridCase:
    """Rebuild a solvable case from a graph's known inputs and line impedances."""
    mask = graph.mask
    x = graph.x
    buses, gens = [], []
    for i in range(graph.n):
        pattern = tuple(mask[i])
        if pattern == (1.0, 1.0, 0.0, 0.0):
            buses.append(Bus(i + 1, BusKind.PQ, x[i, 2], x[i, 3], 1.0, 0.0))
        elif pattern == (0.0, 1.0, 0.0, 1.0):
            buses.append(Bus(i + 1, BusKind.PV, 0.0, 0.0, x[i, 0], 0.0))
            gens.append(Generator(i, -x[i, 2], x[i, 0]))
        else:
            buses.append(Bus(i + 1, BusKind.SLACK, 0.0, 0.0, x[i, 0], x[i, 1]))
            gens.append(Generator(i, 0.0, x[i, 0]))
    branches = [Branch(int(a), int(b), float(r), float(xx))
                for (a, b), (r, xx) in zip(graph.edges, graph.edge_attr)]
    return GridCase(graph.base_mva, buses, branches, gens, name=name)


def dcpf_predictions(ds: Dataset, idx) -> np.ndarray:
    """DC power flow solutions laid out like model predictions (known slots from inputs)."""
    out = np.empty((len(idx), ds.n_nodes, 4))
    for row, k in enumerate(idx):
        g = ds.graph(k)
        sol = dc_power_flow(graph_to_case(g))
        pred = np.column_stack([sol.vm, sol.va, sol.p, sol.q])
        out[row] = np.where(ds.mask == 1, pred, g.x)
    return out


def evaluate_dcpf(ds: Dataset, split="test") -> EvalReport:
    idx = ds.indices(split)
    t0 = time.perf_counter()
    pred = dcpf_predictions(ds, idx)
    return score_predictions(ds, pred, split, seconds=time.perf_counter() - t0)


# -- timing ----------------------------------------------------------------------

def _time(fn, repeats):
    fn()  # warm-up
    out = np.empty(repeats)
    for i in range(repeats):
        t0 = time.perf_counter()
        fn()
        out[i] = time.perf_counter() - t0
    return out * 1000.0


def bench(case: GridCase, model, n_repeats=100, simplify=True) -> list[dict]:
    """Median and IQR (ms) of single-sample NR, DC power flow and model forward."""
    if n_repeats < 1:
        raise ValueError("n_repeats must be >= 1")
    est = as_estimator(model)
    if simplify:
        case = simplify_case(case)
    sol = newton_raphson(case, SolverConfig())
    graph = normalize(case_to_graph(case, sol), est.norm_)
    batch = collate([graph])
    runs = {
        "nr": lambda: newton_raphson(case),
        "dcpf": lambda: dc_power_flow(case),
        "model": lambda: est.model_.infer(batch),
    }
    rows = []
    with threadpool_limits(1):
        for method, fn in runs.items():
            ms = _time(fn, n_repeats)
            q1, med, q3 = np.percentile(ms, [25, 50, 75])
            rows.append({"case": case.name, "n_bus": case.n_bus, "method": method,
                         "median_ms": float(med), "iqr_ms": float(q3 - q1), "repeats": n_repeats})
    return rows


def table_csv(rows, schema=TABLE_SCHEMA) -> str:
    buf = io.StringIO()
    buf.write(f"# {schema}\n")
    if rows:
        w = csv.DictWriter(buf, fieldnames=list(rows[0]), lineterminator="\n")
        w.writeheader()
        w.writerows(rows)
    return buf.getvalue()


# -- hop study -------------------------------------------------------------------

def _adjacency(edges, n):
    adj = [[] for _ in range(n)]
    for a, b in edges:
        adj[a].append(b)
        adj[b].append(a)
    return adj


def hop_distances(edges, n, source) -> np.ndarray:
    adj = _adjacency(edges, n)
    dist = np.full(n, -1)
    dist[source] = 0
    queue = deque([source])
    while queue:
        u = queue.popleft()
        for v in adj[u]:
            if dist[v] < 0:
                dist[v] = dist[u] + 1
                queue.append(v)
    return dist


def diameter(edges, n) -> int:
    return int(max(hop_distances(edges, n, s).max() for s in range(n)))


def induced_subgraph(edges, nodes):
    """Edges among ``nodes`` (sorted), renumbered; returns (local edges, edge positions)."""
    nodes = np.sort(np.asarray(nodes))
    local = np.full(max(int(np.max(edges, initial=0)), int(nodes.max())) + 1, -1)
    local[nodes] = np.arange(len(nodes))
    keep = np.flatnonzero((local[edges[:, 0]] >= 0) & (local[edges[:, 1]] >= 0))
    return local[edges[keep]], keep


def _central_loss(pred, y, mask):
    sq = ((pred - y) * mask) ** 2
    return sq.sum(axis=-1) / mask.sum(axis=-1)


def hop_study(model, ds: Dataset, k_range=None, split="test", max_samples=None) -> HopStudyResult:
    """Central-node masked L2 on k-hop induced subgraphs, per node and per k."""
    est = as_estimator(model)
    n = ds.n_nodes
    diam = diameter(ds.edges, n)
    ks = list(range(1, diam + 1)) if k_range is None else [int(k) for k in k_range]
    if any(k < 1 for k in ks):
        raise ValueError("hop counts must be >= 1")
    idx = ds.indices(split)
    if max_samples is not None:
        idx = idx[:max_samples]
    x, y, e = ds.normalized_arrays(est.norm_)
    x, y, e = x[idx], y[idx], e[idx]

    def run(nodes, centre):
        sub_edges, keep = induced_subgraph(ds.edges, nodes)
        b = batch_arrays(x[:, nodes], y[:, nodes], e[:, keep], sub_edges, ds.mask[nodes])
        pred = est.model_.infer(b).reshape(len(idx), len(nodes), 4)
        c = int(np.searchsorted(nodes, centre))
        return float(_central_loss(pred[:, c], y[:, centre], ds.mask[centre]).mean())

    everything = np.arange(n)
    full = np.array([run(everything, c) for c in range(n)])
    node_loss = np.empty((n, len(ks)))
    coverage = np.empty((n, len(ks)), dtype=int)
    for c in range(n):
        dist = hop_distances(ds.edges, n, c)
        for j, k in enumerate(ks):
            nodes = np.flatnonzero((dist >= 0) & (dist <= k))
            coverage[c, j] = len(nodes)
            node_loss[c, j] = full[c] if len(nodes) == n else run(nodes, c)
    return HopStudyResult(ks=ks, node_loss=node_loss, full_loss=full, coverage=coverage,
                          diameter=diam)


# -- ablation and scale studies ----------------------------------------------------

ABLATION_VARIANTS = {
    "full": dict(variant="full"),
    "one_layer": dict(variant="full", n_layers=1),
    "no_mp": dict(variant="no_mp"),
    "one_layer_no_mp": dict(variant="no_mp", n_layers=1),
}


def ablation(ds: Dataset, variants=tuple(ABLATION_VARIANTS), seeds=(0, 1, 2), model="small",
             train_cfg: TrainConfig | None = None, split="test") -> list[dict]:
    """Train each component variant on every seed; one row per (variant, seed)."""
    unknown = set(variants) - set(ABLATION_VARIANTS)
    if unknown:
        raise ValueError(f"unknown ablation variants {sorted(unknown)}")
    base = train_cfg or TrainConfig()
    rows = []
    for variant in variants:
        for seed in seeds:
            cfg = TrainConfig(**{**asdict(base), "seed": seed})
            est = train(ds, model=model, train_cfg=cfg, **ABLATION_VARIANTS[variant])
            rep = evaluate(est, ds, split)
            rows.append({"variant": variant, "seed": seed, "masked_l2": rep.masked_l2,
                         "mse": rep.mse, "n_params": est.model_.n_params(),
                         "best_epoch": est.best_epoch_})
            log.info("ablation %s seed %d: %.5g", variant, seed, rep.masked_l2)
    return rows


def summarize(rows, key) -> list[dict]:
    """Mean and std of ``masked_l2`` grouped by the ``key`` columns."""
    groups: dict[tuple, list[float]] = {}
    for r in rows:
        groups.setdefault(tuple(r[k] for k in key), []).append(r["masked_l2"])
    return [{**dict(zip(key, g)), "mean": float(np.mean(v)), "std": float(np.std(v)), "n": len(v)}
            for g, v in groups.items()]


def scale_study(datasets, sizes=("small", "medium", "large"), loss_names=("mse", "physical", "mixed"),
                seeds=(0,), train_cfg: TrainConfig | None = None, split="test") -> list[dict]:
    """Masked L2 for every (size, loss) pair, with parameter counts next to the reference ones."""
    datasets = check_datasets(datasets)
    base = train_cfg or TrainConfig()
    rows = []
    for size in sizes:
        if size not in PRESETS:
            raise ValueError(f"unknown model size {size!r}")
        for loss in loss_names:
            for seed in seeds:
                cfg = TrainConfig(**{**asdict(base), "seed": seed, "loss": loss})
                est = train(datasets, model=size, train_cfg=cfg)
                for ds in datasets:
                    rep = evaluate(est, ds, split)
                    rows.append({"dataset": ds.name, "size": size, "loss": loss, "seed": seed,
                                 "masked_l2": rep.masked_l2,
                                 "n_params": param_count(est.model_.params),
                                 "reference_params": REFERENCE_PARAMS[size]})
    return rows
