"""Command line entry point: ``pfnet <subcommand> ...``.

Reports go to stdout (JSON) or to ``--out`` files (CSV/JSON). Failures exit
with status 1 and a JSON object ``{"error": ..., "message": ...}`` on stderr.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import harness
from .checkpoint import load_checkpoint, save_checkpoint
from .dataset import PerturbSpec, generate_dataset, load_dataset, save_dataset
from .grid import load_case, simplify_case
from .solve import SolverConfig, dc_power_flow, newton_raphson


def _floats(text):
    return tuple(float(v) for v in text.split(","))


def _ints(text):
    return tuple(int(v) for v in text.split(","))


def _words(text):
    return tuple(v.strip() for v in text.split(",") if v.strip())


def _emit(obj, out=None):
    text = obj if isinstance(obj, str) else json.dumps(obj, indent=2)
    if out:
        Path(out).write_text(text if text.endswith("\n") else text + "\n")
    else:
        sys.stdout.write(text if text.endswith("\n") else text + "\n")


def _train_cfg(args, **over) -> harness.TrainConfig:
    kw = dict(epochs=args.epochs, batch_size=args.batch_size, lr=args.lr,
              weight_decay=args.weight_decay, loss=getattr(args, "loss", "mse"), w=args.w,
              tau=args.tau, seed=getattr(args, "seed", 0), early_stop_patience=args.patience)
    kw.update(over)
    return harness.TrainConfig(**kw)


def _add_train_flags(p, loss=True):
    p.add_argument("--epochs", type=int, default=300)
    p.add_argument("--batch-size", type=int, default=128)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--weight-decay", type=float, default=0.01)
    p.add_argument("--patience", type=int, default=100)
    p.add_argument("--w", type=float, default=0.5)
    p.add_argument("--tau", type=float, default=0.02)
    if loss:
        p.add_argument("--loss", choices=["mse", "physical", "mixed"], default="mse")


# -- subcommands -------------------------------------------------------------

def cmd_solve(args):
    case = load_case(args.case)
    if not args.full_model:
        case = simplify_case(case)
    if args.method == "nr":
        sol = newton_raphson(case, SolverConfig(tol=args.tol, max_iter=args.max_iter))
    else:
        sol = dc_power_flow(case)
    _emit({"case": case.name, "method": args.method, "converged": sol.converged,
           "iterations": sol.iterations, "max_mismatch": sol.max_mismatch,
           "bus_ids": [b.id for b in case.buses], "vm_pu": sol.vm.tolist(),
           "va_deg": np.degrees(sol.va).tolist(), "p_mw": (sol.p * case.base_mva).tolist(),
           "q_mvar": (sol.q * case.base_mva).tolist()}, args.out)
    return 0 if sol.converged else 3


def cmd_generate(args):
    spec = PerturbSpec(seed=args.seed)
    ds = generate_dataset(load_case(args.case), spec, args.count, splits=args.splits,
                          workers=args.workers)
    save_dataset(ds, args.out)
    _emit({"out": str(args.out), "samples": len(ds), "nodes": ds.n_nodes, "edges": ds.n_edges,
           "splits": ds.splits, "fingerprint": ds.fingerprint})
    return 0


def cmd_train(args):
    datasets = [load_dataset(p) for p in args.data]
    model_kw = {"variant": args.variant}
    if args.layers is not None:
        model_kw["n_layers"] = args.layers
    if args.hidden is not None:
        model_kw["hidden"] = args.hidden
    if args.arch != "pfnet":
        model_kw.pop("variant")
    est = harness.train(datasets, model=args.model if args.arch == "pfnet" else None,
                        train_cfg=_train_cfg(args), arch=args.arch, metrics_path=args.metrics,
                        **model_kw)
    save_checkpoint(est.to_checkpoint(), args.out)
    _emit({"checkpoint": str(args.out), "best_epoch": est.best_epoch_, "epochs_run": est.n_epochs_,
           "n_params": est.model_.n_params(),
           "best_val_masked_l2": min((r["val_masked_l2"] for r in est.history_), default=None)})
    return 0


def cmd_eval(args):
    ds = load_dataset(args.data)
    if args.baseline == "dcpf":
        rep = harness.evaluate_dcpf(ds, args.split)
    else:
        if not args.ckpt:
            raise ValueError("--ckpt is required unless --baseline dcpf is given")
        rep = harness.evaluate(load_checkpoint(args.ckpt), ds, args.split)
    _emit(rep.to_dict(), args.out)
    return 0


def cmd_bench(args):
    rows = []
    for case_path in args.case:
        rows += harness.bench(load_case(case_path), load_checkpoint(args.ckpt), args.repeats)
    _emit(harness.table_csv(rows, harness.TIMING_SCHEMA), args.out)
    return 0


def cmd_hop_study(args):
    ds = load_dataset(args.data)
    ks = range(1, args.k_max + 1) if args.k_max else None
    res = harness.hop_study(load_checkpoint(args.ckpt), ds, ks, split=args.split,
                            max_samples=args.max_samples)
    _emit(res.to_dict(), args.out)
    return 0


def cmd_ablation(args):
    ds = load_dataset(args.data)
    rows = harness.ablation(ds, args.variants, args.seeds, model=args.model, train_cfg=_train_cfg(args))
    _emit(harness.table_csv(rows), args.out)
    _emit(json.dumps(harness.summarize(rows, ("variant",)), indent=2))
    return 0


def cmd_scale_study(args):
    datasets = [load_dataset(p) for p in args.data]
    rows = harness.scale_study(datasets, args.sizes, args.losses, args.seeds, train_cfg=_train_cfg(args))
    _emit(harness.table_csv(rows), args.out)
    _emit(json.dumps(harness.summarize(rows, ("size", "loss")), indent=2))
    return 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="pfnet", description="Power flow solvers and graph surrogates.")
    ap.add_argument("-v", "--verbose", action="count", default=0)
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("solve", help="solve one case with Newton-Raphson or DC power flow")
    p.add_argument("--case", required=True, help="MATPOWER file or bundled name (case14, case118)")
    p.add_argument("--method", choices=["nr", "dc"], default="nr")
    p.add_argument("--tol", type=float, default=1e-8)
    p.add_argument("--max-iter", type=int, default=50)
    p.add_argument("--full-model", action="store_true",
                   help="keep line charging, taps and shunts instead of simplifying")
    p.add_argument("--out")
    p.set_defaults(func=cmd_solve)

    p = sub.add_parser("generate", help="generate a labeled dataset")
    p.add_argument("--case", required=True)
    p.add_argument("--count", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--splits", type=_floats, default=(0.5, 0.2, 0.3))
    p.add_argument("--workers", type=int)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("train", help="train a model and write a checkpoint")
    p.add_argument("--data", required=True, action="append", help="dataset file (repeatable)")
    p.add_argument("--model", choices=sorted(harness.PRESETS), default="small")
    p.add_argument("--arch", choices=sorted(harness.ESTIMATORS), default="pfnet")
    p.add_argument("--variant", choices=["full", "no_mp"], default="full")
    p.add_argument("--layers", type=int)
    p.add_argument("--hidden", type=int)
    p.add_argument("--seed", type=int, default=0)
    _add_train_flags(p)
    p.add_argument("--out", required=True, help="checkpoint path (.npz)")
    p.add_argument("--metrics", help="epoch-curve CSV path")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint (or the DC baseline) on a split")
    p.add_argument("--ckpt")
    p.add_argument("--data", required=True)
    p.add_argument("--split", choices=["train", "val", "test"], default="test")
    p.add_argument("--baseline", choices=["dcpf"])
    p.add_argument("--out")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("bench", help="time NR, DC power flow and model forward")
    p.add_argument("--case", required=True, action="append")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--repeats", type=int, default=100)
    p.add_argument("--out")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("hop-study", help="central-node loss on k-hop subgraphs")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", choices=["train", "val", "test"], default="test")
    p.add_argument("--k-max", type=int, help="largest hop count (default: graph diameter)")
    p.add_argument("--max-samples", type=int)
    p.add_argument("--out")
    p.set_defaults(func=cmd_hop_study)

    p = sub.add_parser("ablation", help="train component variants over several seeds")
    p.add_argument("--data", required=True)
    p.add_argument("--variants", type=_words, default=tuple(harness.ABLATION_VARIANTS))
    p.add_argument("--seeds", type=_ints, default=(0, 1, 2))
    p.add_argument("--model", choices=sorted(harness.PRESETS), default="small")
    _add_train_flags(p)
    p.add_argument("--out")
    p.set_defaults(func=cmd_ablation)

    p = sub.add_parser("scale-study", help="model size x loss grid")
    p.add_argument("--data", required=True, action="append")
    p.add_argument("--sizes", type=_words, default=("small", "medium", "large"))
    p.add_argument("--losses", type=_words, default=("mse", "physical", "mixed"))
    p.add_argument("--seeds", type=_ints, default=(0,))
    _add_train_flags(p, loss=False)
    p.add_argument("--out")
    p.set_defaults(func=cmd_scale_study)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except Exception as exc:  # noqa: BLE001 - every failure becomes a JSON error record
        json.dump({"error": type(exc).__name__, "message": str(exc), "command": args.command},
                  sys.stderr)
        sys.stderr.write("\n")
        return 1


if __name__ == "__main__":
    sys.exit(main())
