import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from relu_forge.errors import DomainError
from relu_forge.geometry import Layer, Network
from relu_forge.memorize import LabeledDataset, build_memorizer, signed_decoder
from relu_forge.norms import (
    bound_l2,
    bound_linf,
    calibrate_C,
    envelope_ratios,
    load_calibration,
    save_calibration,
    triple_norm,
    within_envelope,
)

from _data import gap_regime, random_dataset


def naive_norms(net):
    total, top = 0.0, 0.0
    for layer in net.layers:
        for row in layer.weights:
            for w in row:
                total += w * w
                top = max(top, abs(w))
        for b in layer.bias:
            total += b * b
            top = max(top, abs(b))
    return math.sqrt(total), top


def test_single_layer():
    rep = triple_norm(Network([Layer([[1.0]], [2.0])], 1))
    assert rep.l2 == pytest.approx(math.sqrt(5), abs=1e-15) and rep.linf == 2.0


def test_empty_network():
    rep = triple_norm(Network([], 3))
    assert rep.l2 == 0.0 and rep.linf == 0.0


def test_post_matrices_excluded():
    rep = triple_norm(Network([signed_decoder(-3.0)], 1))
    assert rep.l2 == pytest.approx(math.sqrt(2 + 18), abs=1e-14) and rep.linf == 3.0


def test_memorizer_matches_naive_sum():
    ds = random_dataset(np.random.default_rng(0), 8, 2, 4)
    net, _ = build_memorizer(ds)
    rep = triple_norm(net)
    l2, linf = naive_norms(net)
    assert rep.l2 == pytest.approx(l2, rel=1e-14) and rep.linf == linf
    assert rep.l2 ** 2 == pytest.approx(sum(p[0] + p[1] for p in rep.per_layer), rel=1e-14)


def test_bound_examples():
    assert bound_l2(4, 4, 1.0, 1.0, 1.0) == 15.0
    assert bound_linf(4, 4, 1.0, 1.0, 1.0) == 9.0


@settings(max_examples=100, deadline=None)
@given(st.integers(2, 500), st.integers(2, 50), st.floats(0.01, 100), st.floats(0.01, 100),
       st.floats(0.01, 100))
def test_bounds_linear_in_C(N, M, Rx, Ry, C):
    assert bound_l2(N, M, Rx, Ry, 2 * C) == pytest.approx(2 * bound_l2(N, M, Rx, Ry, C), rel=1e-14)
    assert bound_linf(N, M, Rx, Ry, 2 * C) == pytest.approx(2 * bound_linf(N, M, Rx, Ry, C), rel=1e-14)


@pytest.mark.parametrize("args", [(1, 3, 1, 1), (3, 1, 1, 1), (3, 3, 0, 1), (3, 3, 1, -1)])
def test_bound_domain(args):
    with pytest.raises(DomainError):
        bound_l2(*args)
    with pytest.raises(DomainError):
        bound_linf(*args)


def test_calibrate_single_dataset_is_tight():
    ds = gap_regime(np.random.default_rng(0))
    rep = calibrate_C([ds], 0, "one")
    net, _ = build_memorizer(ds, 0)
    assert (rep["C_l2"], rep["C_linf"]) == envelope_ratios(net, ds)
    assert within_envelope(net, ds, rep) == (True, True)
    assert rep["datasets"] == [ds.digest()]


def test_calibration_roundtrip(tmp_path):
    rep = calibrate_C([gap_regime(np.random.default_rng(s)) for s in range(3)], 0, "r")
    save_calibration(rep, tmp_path / "c.json")
    assert load_calibration(tmp_path / "c.json") == rep


def test_calibrate_rejects_single_class():
    ds = LabeledDataset([[0.0], [1.0]], [1, 1])
    with pytest.raises(DomainError):
        calibrate_C([ds])


def test_smaller_gap_does_not_lower_C():
    # the same family scaled by 0.1: every gap shrinks ten times
    fam = [gap_regime(np.random.default_rng(100 + 10 * k), N=10, gap=0.2) for k in range(5)]
    shrunk = [LabeledDataset(ds.points * 0.1, ds.labels) for ds in fam]
    a = calibrate_C(fam)
    b = calibrate_C(shrunk)
    assert b["min_gap"] == pytest.approx(a["min_gap"] / 10, rel=1e-12)
    assert b["C_l2"] >= a["C_l2"] and b["C_linf"] >= a["C_linf"]


def test_envelope_growth_in_N():
    # the ratio measured / envelope does not grow with N at a fixed gap, so a
    # C fitted at the smallest N covers the larger ones
    ratios = []
    for N in (5, 10, 20, 40):
        rs = [envelope_ratios(build_memorizer(ds, 0)[0], ds)
              for ds in (gap_regime(np.random.default_rng(100 * N + s), N=N, gap=0.1) for s in range(3))]
        ratios.append(max(r[0] for r in rs))
    assert all(r <= ratios[0] for r in ratios[1:])
