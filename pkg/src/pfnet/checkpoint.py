"""Versioned parameter checkpoints.

A checkpoint is an ``.npz`` archive of little-endian float64 arrays: one per
model parameter (``param/<name>``), the AdamW moments (``adam_m/<name>``,
``adam_v/<name>``) and the normalization vector, plus a JSON ``meta`` entry
holding the format version, model config, optimizer scalars and topology
fingerprints.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .autodiff import AdamWState
from .dataset import NormStats
from .nn import ModelConfig, build_model

FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass(eq=False)
class Checkpoint:
    model: object
    norm: NormStats
    fingerprints: list[str]
    optimizer: AdamWState | None = None
    base_mva: float = 100.0
    info: dict = field(default_factory=dict)

    @property
    def config(self) -> ModelConfig:
        return self.model.cfg

    def check_topology(self, fingerprint: str) -> None:
        if fingerprint not in self.fingerprints:
            raise CheckpointError(
                f"dataset topology {fingerprint[:12]} does not match checkpoint "
                f"({', '.join(f[:12] for f in self.fingerprints)})")


def save_checkpoint(ckpt: Checkpoint, path: str | Path) -> None:
    arrays = {}
    for name, p in ckpt.model.params.items():
        arrays[f"param/{name}"] = np.asarray(p.data, dtype="<f8")
    opt = ckpt.optimizer
    if opt is not None:
        for name in opt.m:
            arrays[f"adam_m/{name}"] = np.asarray(opt.m[name], dtype="<f8")
            arrays[f"adam_v/{name}"] = np.asarray(opt.v[name], dtype="<f8")
    arrays["norm"] = ckpt.norm.as_vector()
    meta = {
        "version": FORMAT_VERSION,
        "config": ckpt.config.to_dict(),
        "fingerprints": list(ckpt.fingerprints),
        "base_mva": ckpt.base_mva,
        "info": ckpt.info,
        "optimizer": None if opt is None else {
            "step": opt.step, "lr": opt.lr, "betas": list(opt.betas), "eps": opt.eps,
            "weight_decay": opt.weight_decay},
    }
    arrays["meta"] = np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8)
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def load_checkpoint(path: str | Path) -> Checkpoint:
    with np.load(path) as z:
        if "meta" not in z:
            raise CheckpointError(f"{path}: missing metadata")
        meta = json.loads(z["meta"].tobytes().decode())
        if meta.get("version") != FORMAT_VERSION:
            raise CheckpointError(f"{path}: unsupported checkpoint version {meta.get('version')}")
        cfg = ModelConfig(**meta["config"])
        model = build_model(cfg)
        for name, p in model.params.items():
            key = f"param/{name}"
            if key not in z:
                raise CheckpointError(f"{path}: missing parameter {name}")
            arr = z[key].astype(np.float64)
            if arr.shape != p.shape:
                raise CheckpointError(f"{path}: {name} has shape {arr.shape}, expected {p.shape}")
            p.data = arr
        opt = None
        if meta.get("optimizer"):
            o = meta["optimizer"]
            opt = AdamWState(step=o["step"], lr=o["lr"], betas=tuple(o["betas"]), eps=o["eps"],
                             weight_decay=o["weight_decay"])
            for name in model.params:
                opt.m[name] = z[f"adam_m/{name}"].astype(np.float64)
                opt.v[name] = z[f"adam_v/{name}"].astype(np.float64)
        norm = NormStats.from_vector(z["norm"])
    return Checkpoint(model=model, norm=norm, fingerprints=meta["fingerprints"], optimizer=opt,
                      base_mva=meta.get("base_mva", 100.0), info=meta.get("info", {}))
