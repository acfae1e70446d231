"""Scikit-learn style estimators wrapping the graph models.

``fit`` takes a :class:`~pfnet.dataset.Dataset` (or a list of them for
multi-topology training) and ``predict`` returns per-unit (Vm, theta, P, Q)
for every node of every sample.
"""
from __future__ import annotations

import logging
import time

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_is_fitted

from . import losses
from .autodiff import AdamW, AdamWState, Tensor
from .batching import batch_arrays, collate
from .checkpoint import Checkpoint
from .dataset import Dataset, NormStats, compute_norm, normalize
from .grid import PFGraph
from .nn import PRESETS, ModelConfig, build_model
from .validation import check_datasets, check_graph

log = logging.getLogger(__name__)

LOSSES = ("mse", "physical", "mixed", "masked")
EVAL_BATCH = 512


class TrainingError(FloatingPointError):
    pass


def pooled_norm(datasets: list[Dataset]) -> NormStats:
    """Normalization stats from the union of the datasets' training splits."""
    if len(datasets) == 1:
        return datasets[0].norm
    xs, masks, es = [], [], []
    for ds in datasets:
        idx = ds.indices("train")
        xs.append(ds.x[idx].reshape(-1, 4))
        masks.append(np.tile(ds.mask, (len(idx), 1)))
        es.append(ds.edge_attr[idx].reshape(-1, 2))
    return compute_norm(np.concatenate(xs)[None], np.concatenate(masks), np.concatenate(es))


class _Prepared:
    """A dataset's normalized arrays, kept alongside the raw per-unit edge data."""

    def __init__(self, ds: Dataset, norm: NormStats):
        self.ds = ds
        self.x, self.y, self.e = ds.normalized_arrays(norm)

    def batch(self, idx):
        b = batch_arrays(self.x[idx], self.y[idx], self.e[idx], self.ds.edges, self.ds.mask)
        raw = self.ds.edge_attr[idx]
        b.edge_attr_pu = np.concatenate([raw, raw], axis=1).reshape(-1, 2)
        return b


class GraphRegressor(RegressorMixin, BaseEstimator):
    """Shared training loop; subclasses pick the architecture."""

    arch = "pfnet"

    def __init__(self, model="small", n_layers=None, hidden=None, tag_order=3, dropout=0.2,
                 variant="full", loss="mse", w=0.5, tau=0.02, lr=1e-3, weight_decay=0.01,
                 batch_size=128, epochs=300, patience=100, seed=0, verbose=0):
        self.model = model
        self.n_layers = n_layers
        self.hidden = hidden
        self.tag_order = tag_order
        self.dropout = dropout
        self.variant = variant
        self.loss = loss
        self.w = w
        self.tau = tau
        self.lr = lr
        self.weight_decay = weight_decay
        self.batch_size = batch_size
        self.epochs = epochs
        self.patience = patience
        self.seed = seed
        self.verbose = verbose

    # -- configuration -------------------------------------------------------

    def model_config(self, n_nodes=None) -> ModelConfig:
        base = dict(PRESETS.get(self.model, {})) if self.model else {}
        if self.model and self.model not in PRESETS:
            raise ValueError(f"unknown model size {self.model!r}; choose from {sorted(PRESETS)}")
        if self.n_layers is not None:
            base["n_layers"] = self.n_layers
        if self.hidden is not None:
            base["hidden"] = self.hidden
        return ModelConfig(tag_order=self.tag_order, dropout=self.dropout, variant=self.variant,
                           arch=self.arch, n_nodes=n_nodes if self.arch == "mlp" else None, **base)

    def _check_params(self):
        if self.loss not in LOSSES:
            raise ValueError(f"loss must be one of {LOSSES}, got {self.loss!r}")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")
        if not 0 <= self.w <= 1:
            raise ValueError("w must be in [0, 1]")

    # -- training ------------------------------------------------------------

    def _batch_loss(self, pred: Tensor, batch, norm):
        if self.loss == "mse":
            return losses.mse(batch.y, pred)
        if self.loss == "masked":
            return losses.masked_l2(batch.y, pred, batch.mask)
        phys = losses.physical(losses.denormalize_tensor(pred, norm), batch.src, batch.dst,
                               batch.edge_attr_pu)
        if self.loss == "physical":
            return phys
        return losses.mixed(batch.y, pred, phys, self.w, self.tau)

    def fit(self, X, y=None):
        """Train on the ``train`` split(s), keeping the best-validation weights."""
        self._check_params()
        datasets = check_datasets(X)
        sizes = {ds.n_nodes for ds in datasets}
        if self.arch == "mlp" and len(sizes) > 1:
            raise ValueError("the MLP baseline needs a single graph size")
        cfg = self.model_config(n_nodes=datasets[0].n_nodes)
        self.norm_ = pooled_norm(datasets)
        self.fingerprints_ = [ds.fingerprint for ds in datasets]
        self.base_mva_ = datasets[0].base_mva
        self.model_ = build_model(cfg, seed=self.seed)
        opt = AdamW(self.model_.params, lr=self.lr, weight_decay=self.weight_decay)
        prepared = [_Prepared(ds, self.norm_) for ds in datasets]

        best = np.inf
        best_params = None
        since_best = 0
        self.history_ = []
        self.best_epoch_ = 0
        t0 = time.perf_counter()
        for epoch in range(1, self.epochs + 1):
            rng = np.random.default_rng([self.seed, epoch])
            schedule = []
            for d, prep in enumerate(prepared):
                idx = rng.permutation(prep.ds.indices("train"))
                schedule += [(d, idx[i:i + self.batch_size]) for i in range(0, len(idx), self.batch_size)]
            if len(prepared) > 1:
                schedule = [schedule[i] for i in rng.permutation(len(schedule))]
            total, weight = 0.0, 0
            for b_i, (d, idx) in enumerate(schedule):
                batch = prepared[d].batch(idx)
                pred = self.model_.forward(batch, train=True, rng=rng)
                loss = self._batch_loss(pred, batch, self.norm_)
                value = float(loss.data)
                if not np.isfinite(value):
                    norms = {k: float(np.linalg.norm(p.data)) for k, p in self.model_.params.items()}
                    raise TrainingError(f"non-finite loss at epoch {epoch}, batch {b_i}; "
                                        f"parameter norms {norms}")
                loss.backward()
                opt.step()
                opt.zero_grad()
                total += value * len(idx)
                weight += len(idx)
            val = self._split_metrics(prepared, "val")
            row = {"epoch": epoch, "train_loss": total / max(weight, 1),
                   "val_masked_l2": val["masked_l2"], "val_mse": val["mse"],
                   "elapsed_s": time.perf_counter() - t0}
            self.history_.append(row)
            if self.verbose and (epoch == 1 or epoch % self.verbose == 0):
                log.info("epoch %d train %.5g val masked %.5g", epoch, row["train_loss"], row["val_masked_l2"])
            score = val["masked_l2"] if np.isfinite(val["masked_l2"]) else row["train_loss"]
            if score < best:
                best, since_best, self.best_epoch_ = score, 0, epoch
                best_params = {k: p.data.copy() for k, p in self.model_.params.items()}
            else:
                since_best += 1
                if self.patience and since_best >= self.patience:
                    break
        if best_params is not None:
            for k, p in self.model_.params.items():
                p.data = best_params[k]
        self.optimizer_state_ = opt.state
        self.n_epochs_ = len(self.history_)
        return self

    def _split_metrics(self, prepared, split):
        sq_masked = count_masked = sq_all = n_nodes = 0.0
        for prep in prepared:
            idx = prep.ds.indices(split)
            for i in range(0, len(idx), EVAL_BATCH):
                batch = prep.batch(idx[i:i + EVAL_BATCH])
                pred = self.model_.infer(batch)
                diff = pred - batch.y
                sq_masked += float(np.sum((diff * batch.mask) ** 2))
                count_masked += float(batch.mask.sum())
                sq_all += float(np.sum(diff ** 2))
                n_nodes += batch.n
        if n_nodes == 0:
            return {"masked_l2": np.nan, "mse": np.nan}
        return {"masked_l2": sq_masked / max(count_masked, 1), "mse": sq_all / n_nodes}

    # -- inference -------------------------------------------------------------

    def predict_normalized(self, X, indices=None) -> np.ndarray:
        """Raw model output in normalized space, shape ``S x N x 4`` (or ``N x 4``)."""
        check_is_fitted(self, "model_")
        if isinstance(X, PFGraph):
            g = normalize(check_graph(X), self.norm_)
            return self.model_.infer(collate([g]))
        if isinstance(X, Dataset):
            prep = _Prepared(X, self.norm_)
            idx = np.arange(len(X)) if indices is None else np.asarray(indices)
            out = [self.model_.infer(prep.batch(idx[i:i + EVAL_BATCH]))
                   for i in range(0, len(idx), EVAL_BATCH)]
            if not out:
                return np.zeros((0, X.n_nodes, 4))
            return np.concatenate(out).reshape(len(idx), X.n_nodes, 4)
        graphs = [normalize(check_graph(g), self.norm_) for g in X]
        batch = collate(graphs)
        out = self.model_.infer(batch)
        return [out[a:b] for a, b in zip(batch.offsets[:-1], batch.offsets[1:])]

    def predict(self, X, indices=None):
        """Per-unit predictions for every node (known slots included)."""
        out = self.predict_normalized(X, indices)
        if isinstance(out, list):
            return [o * self.norm_.std + self.norm_.mean for o in out]
        return out * self.norm_.std + self.norm_.mean

    def score(self, X, y=None, split="test"):
        """Negative masked L2 (normalized space) on ``split``; greater is better."""
        check_is_fitted(self, "model_")
        return -self._split_metrics([_Prepared(d, self.norm_) for d in check_datasets(X)], split)["masked_l2"]

    # -- persistence -----------------------------------------------------------

    def to_checkpoint(self) -> Checkpoint:
        check_is_fitted(self, "model_")
        return Checkpoint(model=self.model_, norm=self.norm_, fingerprints=list(self.fingerprints_),
                          optimizer=getattr(self, "optimizer_state_", None), base_mva=self.base_mva_,
                          info={"estimator": type(self).__name__, "params": self.get_params(),
                                "best_epoch": self.best_epoch_, "epochs_run": self.n_epochs_})

    @classmethod
    def from_checkpoint(cls, ckpt: Checkpoint) -> "GraphRegressor":
        params = {k: v for k, v in ckpt.info.get("params", {}).items() if k in cls._get_param_names()}
        est = {"pfnet": PowerFlowNetRegressor, "gcn": GCNRegressor, "mlp": MLPRegressor}[ckpt.config.arch](**params)
        est.model_ = ckpt.model
        est.norm_ = ckpt.norm
        est.fingerprints_ = list(ckpt.fingerprints)
        est.base_mva_ = ckpt.base_mva
        est.optimizer_state_ = ckpt.optimizer or AdamWState()
        est.best_epoch_ = ckpt.info.get("best_epoch", 0)
        est.n_epochs_ = ckpt.info.get("epochs_run", 0)
        est.history_ = []
        return est


class PowerFlowNetRegressor(GraphRegressor):
    """Mask encoder plus PowerFlowConv stack.

    ``model`` selects a size preset (small: 2 layers of width 64, medium: 4 x
    128, large: 5 x 512); ``n_layers``/``hidden`` override it. ``variant``
    ``"no_mp"`` drops the edge message step.
    """

    arch = "pfnet"


class GCNRegressor(GraphRegressor):
    """Three-layer graph-convolution baseline (order 2 by default)."""

    arch = "gcn"

    def __init__(self, model=None, n_layers=None, hidden=128, tag_order=2, dropout=0.2,
                 variant="full", loss="mse", w=0.5, tau=0.02, lr=1e-3, weight_decay=0.01,
                 batch_size=128, epochs=300, patience=100, seed=0, verbose=0):
        super().__init__(model=model, n_layers=n_layers, hidden=hidden, tag_order=tag_order,
                         dropout=dropout, variant=variant, loss=loss, w=w, tau=tau, lr=lr,
                         weight_decay=weight_decay, batch_size=batch_size, epochs=epochs,
                         patience=patience, seed=seed, verbose=verbose)


class MLPRegressor(GraphRegressor):
    """Three dense layers over a whole fixed-size graph."""

    arch = "mlp"

    def __init__(self, model=None, n_layers=None, hidden=128, tag_order=1, dropout=0.2,
                 variant="full", loss="mse", w=0.5, tau=0.02, lr=1e-3, weight_decay=0.01,
                 batch_size=128, epochs=300, patience=100, seed=0, verbose=0):
        super().__init__(model=model, n_layers=n_layers, hidden=hidden, tag_order=tag_order,
                         dropout=dropout, variant=variant, loss=loss, w=w, tau=tau, lr=lr,
                         weight_decay=weight_decay, batch_size=batch_size, epochs=epochs,
                         patience=patience, seed=seed, verbose=verbose)
