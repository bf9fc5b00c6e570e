"""Command-line entry point: memorize, verify, train, approximate, trace."""

from __future__ import annotations

import argparse
import json
import math
import os
import sys

import numpy as np

from . import approximate as ap
from .errors import ReluForgeError, ShapeMismatch
from .geometry import ConstructionTrace, Network
from .io import (
    dumps,
    load_dataset,
    load_network,
    save_network,
    stage_snapshots,
    trace_meta,
    write_stage_csvs,
)
from .memorize import (
    LabeledDataset,
    build_memorizer,
    build_vector_memorizer,
    signed_decoder,
    signed_memorizer_with_trace,
    verify_memorization,
)
from .norms import triple_norm
from .train import (
    TrainConfig,
    certificate,
    risk_terms,
    theorem6_bound,
    train_gd,
    write_log,
)


def default_seed():
    raw = os.environ.get("RELU_FORGE_SEED", "0")
    try:
        return int(raw)
    except ValueError:
        raise SystemExit(f"error: RELU_FORGE_SEED must be an integer, got {raw!r}")


def _emit(doc):
    sys.stdout.write(dumps(doc))


# ---------------------------------------------------------------- builders

def memorize_dataset(ds, seed=0, signed=False):
    """Dispatch on the label kind; returns (net, trace, construction name)."""
    if ds.label_kind == "vector":
        Y = ds.labels
        y0 = np.minimum(Y.min(axis=0), 0.0) if signed else np.zeros(Y.shape[1])
        if np.any(Y - y0 < 0):
            raise ValueError("vector labels are negative; pass --signed")
        net = build_vector_memorizer(LabeledDataset(ds.points, Y - y0, "vector"), seed)
        trace = ConstructionTrace()
        trace.add("memorize", 0, net.depth)
        name = "vector_memorizer"
        if signed:
            net = Network(list(net.layers) + [signed_decoder(y0)], ds.d)
            trace.add("decoder", net.depth - 1, net.depth)
            name = "signed_vector_memorizer"
        return net, trace, name
    if signed:
        net, trace = signed_memorizer_with_trace(ds, seed)
        return net, trace, "signed_memorizer"
    if np.any(ds.labels < 0):
        raise ValueError("labels are negative; pass --signed")
    net, trace = build_memorizer(ds, seed)
    return net, trace, "memorizer"


def _meta(construction, seed, trace):
    return {"construction": construction, "seed": seed, "stages": trace_meta(trace)}


# ---------------------------------------------------------------- commands

def cmd_memorize(args):
    ds = load_dataset(args.dataset)
    net, trace, name = memorize_dataset(ds, args.seed, args.signed)
    rep = verify_memorization(net, ds, 1e-6)
    norms = triple_norm(net)
    if args.out:
        save_network(net, args.out, _meta(name, args.seed, trace))
    _emit({
        "N": ds.N,
        "M": ds.M,
        "depth": net.depth,
        "width": net.width,
        "max_abs_error": rep["max_abs_error"],
        "l2_norm": norms.l2,
        "linf_norm": norms.linf,
    })
    return 0


def cmd_verify(args):
    net, _ = load_network(args.network)
    ds = load_dataset(args.dataset)
    if net.input_dim != ds.d:
        raise ShapeMismatch(f"network input dim {net.input_dim} != dataset dim {ds.d}")
    rep = verify_memorization(net, ds, args.tol)
    ok = rep["max_abs_error"] <= args.tol
    _emit({"max_abs_error": rep["max_abs_error"], "failures": rep["failures"],
           "tol": args.tol, "ok": ok})
    return 0 if ok else 1


def cmd_train(args):
    ds = load_dataset(args.dataset)
    signed = ds.label_kind != "vector" and bool(np.any(ds.labels < 0))
    theta_star, _, _ = memorize_dataset(ds, args.seed, signed)
    log = []
    rows = []
    for lam in args.lam:
        cfg = TrainConfig(lam=lam, loss_id=args.loss, learning_rate=args.lr,
                          max_iters=args.iters, restarts=args.restarts, seed=args.seed)
        cert = certificate(theta_star, ds, lam)
        J_star = risk_terms(theta_star, ds, cfg)[0]
        res = train_gd(theta_star, ds, cfg, log)
        J, loss, reg = risk_terms(res.net, ds, cfg)
        row = {
            "lambda": lam,
            "J_theta_star": J_star,
            "certificate": cert,
            "J_trained": J,
            "loss_term": loss,
            "norm2_term": reg,
            "gap": J - cert,
            "best_restart": res.restart,
        }
        if args.eps > 0:
            if args.loss != "squared_l2":
                row["bound"] = None
                row["bound_note"] = "perturbation bound covers the squared loss only"
            elif theta_star.has_post:
                row["bound"] = None
                row["bound_note"] = "perturbation bound needs a network without post matrices"
            else:
                gcfg = TrainConfig(lam=lam, loss_id=args.loss, activation=("gelu", args.eps))
                row["J_gelu"] = risk_terms(theta_star, ds, gcfg)[0]
                bound = theorem6_bound(theta_star, ds, lam, args.eps)
                row["bound"] = bound if math.isfinite(bound) else "inf"
        rows.append(row)
        _emit(row)
    if args.log:
        write_log(log, args.log)
    return 0


def _file_target(path):
    from scipy.spatial import cKDTree

    ds = load_dataset(path)
    tree = cKDTree(ds.points)
    labels = ds.labels

    def f(X):
        _, idx = tree.query(np.asarray(X, dtype=np.float64))
        return labels[idx]

    bbox = (tuple(ds.points.min(axis=0)), tuple(ds.points.max(axis=0)))
    return ap.Target(os.path.basename(path), f, bbox)


def cmd_approximate(args):
    if not 0 < args.h < 1:
        raise ValueError(f"h must be in (0, 1), got {args.h}")
    if args.target == "file":
        if not args.target_file:
            raise ValueError("--target file needs --target-file")
        target = _file_target(args.target_file)
    else:
        target = ap.TARGETS[args.target]
    builder = ap.build_signed_approximator if args.signed else ap.build_approximator
    net, sf, trace = builder(target, None, args.h, args.p, args.seed, args.budget)
    report = ap.approximation_report(net, sf, target, args.p, args.samples, args.seed, args.C)
    report["target"] = target.name
    report["p"] = args.p
    report["expected_depth"] = ap.expected_depth(sf.grid, sf.M_h)
    if args.out:
        ap.save_report(report, args.out)
    if args.net_out:
        save_network(net, args.net_out, _meta("approximator", args.seed, trace))
    _emit(report)
    return 0


def cmd_trace(args):
    net, meta = load_network(args.network)
    ds = load_dataset(args.dataset)
    snaps = stage_snapshots(net, meta, ds.points)
    paths = write_stage_csvs(snaps, ds.labels, args.out_dir)
    _emit({"files": [os.path.basename(p) for p in paths]})
    return 0


# ---------------------------------------------------------------- parser

def build_parser():
    seed = default_seed()
    p = argparse.ArgumentParser(prog="relu-forge", description="Constructive narrow ReLU networks.")
    sub = p.add_subparsers(dest="command", required=True)

    m = sub.add_parser("memorize", help="build an exact memorizer for a dataset")
    m.add_argument("dataset")
    m.add_argument("--signed", action="store_true", help="allow labels of any sign")
    m.add_argument("--seed", type=int, default=seed)
    m.add_argument("--out", help="network JSON to write")
    m.set_defaults(func=cmd_memorize)

    v = sub.add_parser("verify", help="check a network against a dataset")
    v.add_argument("network")
    v.add_argument("dataset")
    v.add_argument("--tol", type=float, default=1e-6)
    v.set_defaults(func=cmd_verify)

    t = sub.add_parser("train", help="gradient descent against the memorizer certificate")
    t.add_argument("dataset")
    t.add_argument("--lambda", dest="lam", type=float, nargs="+", default=[1e-3])
    t.add_argument("--eps", type=float, default=0.0, help="GELU smoothing; 0 disables the bound")
    t.add_argument("--loss", choices=["squared_l2", "binary_logistic"], default="squared_l2")
    t.add_argument("--restarts", type=int, default=4, help="extra random restarts")
    t.add_argument("--seed", type=int, default=seed)
    t.add_argument("--lr", type=float, default=1e-2)
    t.add_argument("--iters", type=int, default=200)
    t.add_argument("--log", help="JSONL run log to write")
    t.set_defaults(func=cmd_train)

    a = sub.add_parser("approximate", help="build a grid approximator for a target")
    a.add_argument("--target", choices=["x2", "paraboloid", "file"], default="x2")
    a.add_argument("--target-file", help="CSV or JSON samples for --target file")
    a.add_argument("--h", type=float, default=0.1)
    a.add_argument("--p", type=float, default=2.0)
    a.add_argument("--samples", type=int, default=100_000)
    a.add_argument("--seed", type=int, default=seed)
    a.add_argument("--C", type=float, default=1.0, help="constant in the depth bound")
    a.add_argument("--budget", type=int, default=ap.CELL_BUDGET)
    a.add_argument("--signed", action="store_true")
    a.add_argument("--out", help="report JSON to write")
    a.add_argument("--net-out", help="network JSON to write")
    a.set_defaults(func=cmd_approximate)

    r = sub.add_parser("trace", help="per-stage point positions as CSV")
    r.add_argument("network")
    r.add_argument("dataset")
    r.add_argument("--out-dir", required=True)
    r.set_defaults(func=cmd_trace)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ReluForgeError, ValueError, OSError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
