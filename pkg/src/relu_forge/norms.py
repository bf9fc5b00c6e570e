"""Parameter triple norms and the norm envelopes of constructed memorizers."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import DomainError
from .geometry import min_pairwise_distance


@dataclass
class NormReport:
    l2: float
    linf: float
    per_layer: list = field(default_factory=list)


def triple_norm(net):
    """l2: sqrt of summed squared Frobenius and bias norms; linf: max entry.

    Post matrices do not count; they are fixed decoders, not parameters.
    """
    per_layer = []
    total = 0.0
    top = 0.0
    for layer in net.layers:
        fro2 = float(np.sum(layer.weights ** 2))
        b2 = float(np.sum(layer.bias ** 2))
        w_inf = float(np.max(np.abs(layer.weights))) if layer.weights.size else 0.0
        b_inf = float(np.max(np.abs(layer.bias))) if layer.bias.size else 0.0
        per_layer.append((fro2, b2, w_inf, b_inf))
        total += fro2 + b2
        top = max(top, w_inf, b_inf)
    return NormReport(math.sqrt(total), top, per_layer)


def _check_domain(N, M, Rx, Ry, C):
    if N <= 1 or M <= 1:
        raise DomainError(f"envelope needs N > 1 and M > 1, got N={N}, M={M}")
    if min(Rx, Ry, C) <= 0:
        raise DomainError("Rx, Ry and C must be positive")


def bound_l2(N, M, Rx, Ry, C=1.0):
    _check_domain(N, M, Rx, Ry, C)
    return C * (1 + Rx * math.sqrt(N) + Rx * N * math.sqrt(M) + Ry * M)


def bound_linf(N, M, Rx, Ry, C=1.0):
    _check_domain(N, M, Rx, Ry, C)
    return C * (Rx * N + M + Ry)


def data_radii(ds):
    Rx = float(np.max(np.linalg.norm(ds.points, axis=1)))
    Y = ds.labels.reshape(ds.N, -1)
    Ry = float(np.max(np.linalg.norm(Y, axis=1)))
    return Rx, Ry


def envelope_ratios(net, ds):
    """Measured norms divided by the envelopes evaluated at C = 1."""
    rep = triple_norm(net)
    Rx, Ry = data_radii(ds)
    N, M = ds.N, ds.M
    return rep.l2 / bound_l2(N, M, Rx, Ry), rep.linf / bound_linf(N, M, Rx, Ry)


def calibrate_C(datasets, seed=0, regime_id="default", builder=None):
    """Smallest (C_l2, C_linf) for which every built memorizer meets the envelope."""
    if builder is None:
        from .memorize import build_memorizer

        def builder(ds, s):
            return build_memorizer(ds, s)[0]

    c_l2 = 0.0
    c_linf = 0.0
    gaps = []
    hashes = []
    for ds in datasets:
        if ds.N <= 1 or ds.M <= 1:
            raise DomainError("calibration datasets need N > 1 and M > 1")
        r2, ri = envelope_ratios(builder(ds, seed), ds)
        c_l2 = max(c_l2, r2)
        c_linf = max(c_linf, ri)
        gaps.append(min_pairwise_distance(ds.points))
        hashes.append(ds.digest())
    return {
        "regime_id": regime_id,
        "C_l2": c_l2,
        "C_linf": c_linf,
        "min_gap": float(min(gaps)) if gaps else None,
        "datasets": hashes,
    }


def within_envelope(net, ds, calibration):
    rep = triple_norm(net)
    Rx, Ry = data_radii(ds)
    ok2 = rep.l2 <= bound_l2(ds.N, ds.M, Rx, Ry, calibration["C_l2"])
    oki = rep.linf <= bound_linf(ds.N, ds.M, Rx, Ry, calibration["C_linf"])
    return ok2, oki


def save_calibration(report, path):
    with open(path, "w") as fh:
        json.dump(report, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_calibration(path):
    with open(path) as fh:
        return json.load(fh)
