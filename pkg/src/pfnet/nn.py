"""PowerFlowNet and the MLP/GCN baselines on top of :mod:`pfnet.autodiff`."""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .batching import GraphBatch

__all__ = ["ModelConfig", "PRESETS", "PowerFlowNet", "MLPBaseline", "GCNBaseline", "build_model",
           "param_count"]

VARIANTS = ("full", "no_mp")


@dataclass(frozen=True)
class ModelConfig:
    n_layers: int = 4
    hidden: int = 128
    tag_order: int = 3
    dropout: float = 0.2
    in_features: int = 4
    out_features: int = 4
    edge_features: int = 2
    variant: str = "full"
    arch: str = "pfnet"
    n_nodes: int | None = None  # fixed graph size, MLP baseline only

    def __post_init__(self):
        if self.n_layers < 1:
            raise ValueError("n_layers must be >= 1")
        if self.tag_order < 1:
            raise ValueError("tag_order must be >= 1")
        if self.hidden < self.out_features:
            raise ValueError("hidden must be >= out_features")
        if not 0 <= self.dropout < 1:
            raise ValueError("dropout must be in [0, 1)")
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}")
        if self.arch not in ("pfnet", "mlp", "gcn"):
            raise ValueError(f"unknown arch {self.arch!r}")

    def to_dict(self):
        return asdict(self)


PRESETS = {
    "small": dict(n_layers=2, hidden=64),
    "medium": dict(n_layers=4, hidden=128),
    "large": dict(n_layers=5, hidden=512),
}


def _uniform(rng, fan_in, shape):
    bound = 1.0 / np.sqrt(fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True)


class _Module:
    cfg: ModelConfig
    params: dict[str, Tensor]

    def _linear(self, rng, name, fan_in, fan_out, bias=True):
        self.params[f"{name}.W"] = _uniform(rng, fan_in, (fan_in, fan_out))
        if bias:
            self.params[f"{name}.b"] = _uniform(rng, fan_in, (fan_out,))

    def _apply_linear(self, name, x):
        out = ad.matmul(x, self.params[f"{name}.W"])
        b = self.params.get(f"{name}.b")
        return out if b is None else out + b

    def _mask_encoder(self, rng):
        h = self.cfg.hidden
        self._linear(rng, "mask.0", self.cfg.in_features, h)
        self._linear(rng, "mask.1", h, self.cfg.in_features)

    def encode(self, batch: GraphBatch) -> Tensor:
        """Input features shifted by the learned mask embedding."""
        m = ad.relu(self._apply_linear("mask.0", Tensor(batch.mask)))
        return self._apply_linear("mask.1", m) + Tensor(batch.x)

    def infer(self, batch: GraphBatch) -> np.ndarray:
        """Evaluation-mode forward without recording a tape."""
        with ad.no_grad():
            return self.forward(batch).data

    def parameters(self):
        return self.params

    def n_params(self) -> int:
        return param_count(self.params)


def param_count(params) -> int:
    return int(sum(p.size for p in params.values()))


class PowerFlowNet(_Module):
    """Mask encoder, ``n_layers - 1`` PowerFlowConv layers and a message-passing head.

    Each PowerFlowConv sums a two-layer edge MLP over incoming lines, adds the
    result to its input (zero-padded when the width grows), then applies
    ``relu(sum_{k<K} S^k X W_k + b)`` and dropout. The head is the message
    step alone, mapping to the four output features.

    With ``variant="no_mp"`` the neighbourhood of the message step shrinks
    to the node itself: the same two-layer MLP sees only ``x_i`` (no
    neighbours, no line features), so the TAGConv is the only graph mixing.
    """

    def __init__(self, cfg: ModelConfig, seed: int = 0):
        self.cfg = cfg
        self.params: dict[str, Tensor] = {}
        rng = np.random.default_rng(seed)
        h, L = cfg.hidden, cfg.n_layers
        f_in, f_out, f_e = cfg.in_features, cfg.out_features, cfg.edge_features
        self._mask_encoder(rng)
        for l in range(L):
            width_in = f_in if l == 0 else h
            last = l == L - 1
            fan_in = 2 * width_in + f_e if cfg.variant == "full" else width_in
            self._linear(rng, f"layer{l}.mp.0", fan_in, h)
            self._linear(rng, f"layer{l}.mp.1", h, f_out if last else h)
            if not last:
                self._tag(rng, l, h, h)
        # zero-padding that lifts the 4-wide input into the hidden residual path
        self._pad = np.eye(f_in, h)

    def _tag(self, rng, l, width_in, width_out):
        for k in range(self.cfg.tag_order):
            self.params[f"layer{l}.tag.W{k}"] = _uniform(rng, width_in, (width_in, width_out))
        self.params[f"layer{l}.tag.b"] = _uniform(rng, width_in, (width_out,))

    def message(self, l, x: Tensor, batch: GraphBatch) -> Tensor:
        """Sum over incoming lines of ``MLP(x_i, x_j, e_ij)``.

        The first linear map acts on ``[x_i, x_j, e_ij]``; its node blocks are
        applied per node before gathering, which is the same product with far
        fewer rows. The ``no_mp`` variant applies the MLP to ``x_i`` alone.
        """
        if self.cfg.variant == "no_mp":
            hidden = ad.relu(self._apply_linear(f"layer{l}.mp.0", x))
            return self._apply_linear(f"layer{l}.mp.1", hidden)
        w = x.shape[1]
        W = self.params[f"layer{l}.mp.0.W"]
        # the bias rides on the per-node block so it is added N rather than E times
        own = ad.matmul(x, ad.take(W, slice(0, w))) + self.params[f"layer{l}.mp.0.b"]
        nbr = ad.matmul(x, ad.take(W, slice(w, 2 * w)))
        edge = ad.matmul(Tensor(batch.edge_attr), ad.take(W, slice(2 * w, None)))
        hidden = ad.relu(ad.index_select(own, batch.dst) + ad.index_select(nbr, batch.src) + edge)
        msg = self._apply_linear(f"layer{l}.mp.1", hidden)
        return ad.scatter_add(msg, batch.dst, batch.n)

    def tag(self, l, x: Tensor, batch: GraphBatch) -> Tensor:
        out = None
        hop = x
        for k in range(self.cfg.tag_order):
            if k:
                hop = ad.spmm(batch.S, hop)
            term = ad.matmul(hop, self.params[f"layer{l}.tag.W{k}"])
            out = term if out is None else out + term
        return out + self.params[f"layer{l}.tag.b"]

    def forward(self, batch: GraphBatch, train: bool = False, rng=None) -> Tensor:
        cfg = self.cfg
        if train and cfg.dropout > 0 and rng is None:
            raise ValueError("training forward with dropout needs an rng")
        x = self.encode(batch)
        for l in range(cfg.n_layers - 1):
            agg = self.message(l, x, batch)
            res = ad.matmul(x, Tensor(self._pad)) if x.shape[1] != agg.shape[1] else x
            x = ad.relu(self.tag(l, res + agg, batch))
            x = ad.dropout(x, cfg.dropout, train, rng)
        return self.message(cfg.n_layers - 1, x, batch)


class GCNBaseline(_Module):
    """Three graph-convolution layers ``sigma(sum_{k<K} S^k X W + b)`` with one shared ``W``."""

    n_conv = 3

    def __init__(self, cfg: ModelConfig, seed: int = 0):
        self.cfg = cfg
        self.params = {}
        rng = np.random.default_rng(seed)
        self._mask_encoder(rng)
        widths = [cfg.in_features] + [cfg.hidden] * (self.n_conv - 1) + [cfg.out_features]
        for l in range(self.n_conv):
            self._linear(rng, f"gcn{l}", widths[l], widths[l + 1])
        self.activation = ad.relu

    def forward(self, batch: GraphBatch, train: bool = False, rng=None) -> Tensor:
        x = self.encode(batch)
        for l in range(self.n_conv):
            hop, acc = x, x
            for _ in range(1, self.cfg.tag_order):
                hop = ad.spmm(batch.S, hop)
                acc = acc + hop
            x = self._apply_linear(f"gcn{l}", acc)
            if l < self.n_conv - 1:
                x = ad.dropout(self.activation(x), self.cfg.dropout, train, rng)
        return x


class MLPBaseline(_Module):
    """Three dense layers over the flattened, mask-shifted features of a whole graph."""

    def __init__(self, cfg: ModelConfig, seed: int = 0):
        if cfg.n_nodes is None:
            raise ValueError("MLP baseline needs a fixed n_nodes")
        self.cfg = cfg
        self.params = {}
        rng = np.random.default_rng(seed)
        self._mask_encoder(rng)
        flat = cfg.n_nodes * cfg.in_features
        widths = [flat, cfg.hidden, cfg.hidden, cfg.n_nodes * cfg.out_features]
        for l in range(3):
            self._linear(rng, f"fc{l}", widths[l], widths[l + 1])

    def forward(self, batch: GraphBatch, train: bool = False, rng=None) -> Tensor:
        n = self.cfg.n_nodes
        if np.any(batch.sizes != n):
            raise ValueError(f"MLP baseline was built for {n}-node graphs, got sizes {set(batch.sizes.tolist())}")
        x = ad.reshape(self.encode(batch), (batch.n_graphs, n * self.cfg.in_features))
        for l in range(3):
            x = self._apply_linear(f"fc{l}", x)
            if l < 2:
                x = ad.dropout(ad.relu(x), self.cfg.dropout, train, rng)
        return ad.reshape(x, (batch.n_graphs * n, self.cfg.out_features))


def build_model(cfg: ModelConfig, seed: int = 0):
    return {"pfnet": PowerFlowNet, "gcn": GCNBaseline, "mlp": MLPBaseline}[cfg.arch](cfg, seed)
