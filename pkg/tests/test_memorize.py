import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from relu_forge.errors import DomainError, DuplicatePoints, ShapeMismatch
from relu_forge.geometry import Layer, Network, apply_layer, forward, projection_gap
from relu_forge.memorize import (
    ClassRepresentatives,
    LabeledDataset,
    build_memorizer,
    build_signed_memorizer,
    build_vector_memorizer,
    compress_classes,
    map_to_labels,
    memorizer_depth,
    pad_network,
    precondition,
    sort_representatives,
    verify_memorization,
)
from relu_forge.norms import triple_norm

from _data import labels_with_all_classes, random_dataset


def run(layers, X):
    for layer in layers:
        X = apply_layer(layer, X)
    return X


# ---------------------------------------------------------------- dataset

def test_dataset_rejects_duplicates():
    with pytest.raises(DuplicatePoints) as exc:
        LabeledDataset([[0.0], [1.0], [0.0]], [0, 1, 1])
    assert exc.value.pairs == [(0, 2)]


def test_dataset_label_checks():
    with pytest.raises(ShapeMismatch):
        LabeledDataset([[0.0], [1.0]], [0])
    with pytest.raises(ValueError):
        LabeledDataset([[0.0], [1.0]], [0, 1.5])
    ds = LabeledDataset([[0.0], [1.0], [2.0]], [2, 0, 2])
    assert ds.N == 3 and ds.M == 2 and ds.d == 1


# ---------------------------------------------------------------- stage 1

def test_precondition_1d():
    layer, t = precondition(LabeledDataset([[-1.0], [1.0]], [0, 1]))
    assert np.array_equal(layer.weights, [[1.0]]) and np.array_equal(layer.bias, [2.0])
    assert np.array_equal(t, [1.0, 3.0])


def test_precondition_single_point():
    _, t = precondition(LabeledDataset([[0.3, -0.2]], [0]))
    assert t.shape == (1,) and t[0] > 0


def test_precondition_random_d3():
    ds = random_dataset(np.random.default_rng(4), 10, 3, 3)
    layer, t = precondition(ds, 4)
    assert abs(np.linalg.norm(layer.weights) - 1) < 1e-12
    assert np.all(t > 0)
    assert all(a != b for a, b in itertools.combinations(t, 2))


# ---------------------------------------------------------------- stage 2

def test_compress_single_point():
    layers, reps = compress_classes([1.5], [0])
    assert len(layers) == 2 and reps.reps.shape[0] == 1


def test_compress_eight_points_four_classes():
    rng = np.random.default_rng(0)
    ds = random_dataset(rng, 8, 2, 4)
    first, t = precondition(ds)
    layers, reps = compress_classes(t, ds.labels)
    assert len(layers) == 16
    assert max(l.d_out for l in layers) <= 2
    out = run(layers, t[:, None])
    _, cls = ds.classes()
    for k in range(4):
        assert np.allclose(out[cls == k], reps.reps[k], rtol=0, atol=1e-9)
    assert len({tuple(r) for r in reps.reps}) == 4


def test_compress_collapse_and_no_cross_collision():
    rng = np.random.default_rng(12)
    ds = random_dataset(rng, 12, 2, 3)
    _, t = precondition(ds)
    layers, reps = compress_classes(t, ds.labels)
    _, cls = ds.classes()
    X = t[:, None]
    for layer in layers:
        X = apply_layer(layer, X)
        for i, j in itertools.combinations(range(ds.N), 2):
            if cls[i] != cls[j]:
                assert np.max(np.abs(X[i] - X[j])) > 0
    for i, j in itertools.combinations(range(ds.N), 2):
        if cls[i] == cls[j]:
            assert np.max(np.abs(X[i] - X[j])) <= 1e-9 * np.max(np.abs(X))
    assert np.all(reps.reps >= 0)


# ---------------------------------------------------------------- stage 3

def test_sort_layer_counts():
    layers, xi = sort_representatives(ClassRepresentatives(np.array([[0.4, 1.0]]), {0.0: 0}))
    assert len(layers) == 3 and len(xi.values) == 1
    reps = np.random.default_rng(1).random((4, 2))
    layers, _ = sort_representatives(reps)
    assert len(layers) == 9
    assert [l.d_out for l in layers][:3] == [2, 2, 2]
    assert layers[-1].d_out == 1


def test_sort_five_reps_increasing():
    reps = np.random.default_rng(5).random((5, 2))
    layers, xi = sort_representatives(reps, 5)
    out = run(layers, reps)[:, 0]
    assert np.array_equal(out, xi.values)
    assert np.all(np.diff(out) > 0) and np.all(out > 0)


# ---------------------------------------------------------------- stage 4

def test_map_two_values():
    layers = map_to_labels(np.array([2.0, 5.0]), [0.0, 1.0])
    assert len(layers) == 1
    assert layers[0].weights[0, 0] == pytest.approx(1 / 3, abs=1e-15)
    assert layers[0].bias[0] == pytest.approx(-2 / 3, abs=1e-15)
    assert np.allclose(run(layers, np.array([[2.0], [5.0]]))[:, 0], [0, 1], atol=1e-15)


def test_map_single_value():
    layers = map_to_labels(np.array([4.0]), [0.0])
    assert len(layers) == 1 and run(layers, np.array([[4.0]]))[0, 0] == 0.0


def test_map_five_random():
    xi = np.cumsum(np.random.default_rng(2).uniform(0.1, 2.0, 5))
    layers = map_to_labels(xi)
    assert len(layers) == 2 * 5 - 3
    assert np.max(np.abs(run(layers, xi[:, None])[:, 0] - np.arange(5))) <= 1e-9


@settings(max_examples=60, deadline=None)
@given(st.lists(st.floats(0.01, 5.0), min_size=2, max_size=8),
       st.lists(st.floats(0.01, 5.0), min_size=2, max_size=8))
def test_map_any_increasing_targets(gaps_x, gaps_t):
    n = min(len(gaps_x), len(gaps_t))
    xi = np.cumsum(gaps_x[:n])
    tau = np.cumsum(gaps_t[:n]) - gaps_t[0]
    out = run(map_to_labels(xi, tau), xi[:, None])[:, 0]
    assert np.max(np.abs(out - tau)) <= 1e-9 * max(1.0, tau.max())


# ---------------------------------------------------------------- builder

@pytest.mark.parametrize("N,M", [(8, 4), (2, 2)])
def test_depth_formula(N, M):
    ds = random_dataset(np.random.default_rng(N), N, 2, M)
    net, trace = build_memorizer(ds)
    assert net.depth == 2 * N + 4 * M - 1 == memorizer_depth(N, M)
    assert net.width == 2
    assert [s.name for s in trace.stages] == ["precondition", "compress", "sort", "label_map"]
    assert trace.covers(net.depth)


def test_fifty_points_d10():
    ds = random_dataset(np.random.default_rng(3), 50, 10, 8)
    net, _ = build_memorizer(ds, 3)
    assert verify_memorization(net, ds, 1e-6)["failures"] == []


def test_single_class_depth():
    ds = LabeledDataset(np.random.default_rng(0).random((6, 2)), np.full(6, 2.0), "real")
    net, trace = build_memorizer(ds)
    assert net.depth == 2 * 6 + 5
    assert trace.flags["nonstandard_depth"]
    assert verify_memorization(net, ds)["max_abs_error"] <= 1e-9


def test_custom_targets_change_only_stage4():
    ds = random_dataset(np.random.default_rng(9), 10, 2, 3)
    a, ta = build_memorizer(ds, 0)
    b, tb = build_memorizer(ds, 0, targets=[0.5, 2.0, 7.0])
    stop = ta.stage("sort").stop
    for la, lb in zip(a.layers[:stop], b.layers[:stop]):
        assert np.array_equal(la.weights, lb.weights) and np.array_equal(la.bias, lb.bias)
    _, cls = ds.classes()
    out = forward(b, ds.points)[:, 0]
    assert np.max(np.abs(out - np.array([0.5, 2.0, 7.0])[cls])) <= 1e-6


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31), st.integers(2, 15), st.integers(1, 4), st.integers(2, 4))
def test_memorizes_random_data(seed, N, d, M):
    M = min(M, N)
    ds = random_dataset(np.random.default_rng(seed), N, d, M)
    net, trace = build_memorizer(ds, seed % 100)
    assert net.depth == 2 * N + 4 * M - 1 and net.width == 2
    assert verify_memorization(net, ds, 1e-6)["failures"] == []


def test_permuted_order_still_memorizes():
    rng = np.random.default_rng(21)
    ds = random_dataset(rng, 15, 3, 4)
    perm = rng.permutation(15)
    pds = LabeledDataset(ds.points[perm], ds.labels[perm])
    net, _ = build_memorizer(pds, 0)
    assert verify_memorization(net, ds, 1e-6)["failures"] == []


def test_negative_targets_rejected():
    ds = LabeledDataset([[0.0], [1.0]], [-1.0, 2.0], "real")
    with pytest.raises(DomainError):
        build_memorizer(ds)


# ---------------------------------------------------------------- vector

def test_vector_m1_reduces():
    ds = random_dataset(np.random.default_rng(0), 6, 2, 3)
    vds = LabeledDataset(ds.points, ds.labels[:, None], "vector")
    a = build_vector_memorizer(vds)
    b, _ = build_memorizer(ds)
    assert (a.depth, a.width) == (b.depth, b.width)


def test_vector_two_components():
    X = np.array([[0.0, 0.0], [1.0, 0.2], [0.3, 0.9], [-0.5, 0.4]])
    Y = np.array([[1.0, 2.0], [3.0, 1.0], [1.0, 2.0], [3.0, 1.0]])
    ds = LabeledDataset(X, Y, "vector")
    net = build_vector_memorizer(ds)
    assert net.width <= 4
    assert net.depth == 2 * 4 + 4 * 2 - 1
    assert verify_memorization(net, ds, 1e-9)["failures"] == []


def test_vector_constant_component():
    rng = np.random.default_rng(8)
    X = rng.random((7, 2))
    Y = np.column_stack([labels_with_all_classes(rng, 7, 3), np.full(7, 4.0), rng.integers(0, 2, 7)])
    ds = LabeledDataset(X, Y.astype(float), "vector")
    net = build_vector_memorizer(ds)
    assert net.width <= 6
    assert verify_memorization(net, ds, 1e-6)["failures"] == []


def test_padding_norm_bookkeeping():
    ds = random_dataset(np.random.default_rng(1), 5, 2, 2)
    net, _ = build_memorizer(ds)
    padded = pad_network(net, net.depth + 3)
    a, b = triple_norm(net), triple_norm(padded)
    assert b.l2 ** 2 == pytest.approx(a.l2 ** 2 + 3 * net.output_dim, rel=1e-14)
    assert b.linf == max(a.linf, 1.0)


# ---------------------------------------------------------------- signed

def test_signed_two_points():
    ds = LabeledDataset([[0.0], [1.0]], [-2.0, 3.0], "real")
    net = build_signed_memorizer(ds)
    assert np.allclose(forward(net, ds.points)[:, 0], [-2.0, 3.0], rtol=0, atol=1e-12)
    assert net.depth == 2 * 2 + 4 * 2 and net.width == 2


def test_signed_depth_three_classes():
    rng = np.random.default_rng(10)
    ds = LabeledDataset(rng.random((10, 2)), np.array([-1.0, 0.0, 1.0])[labels_with_all_classes(rng, 10, 3)], "real")
    net = build_signed_memorizer(ds)
    assert net.depth == 32
    assert verify_memorization(net, ds, 1e-6)["failures"] == []


def test_signed_nonnegative_labels():
    ds = LabeledDataset([[0.0], [0.5], [1.0]], [1.0, 2.0, 1.0], "real")
    net = build_signed_memorizer(ds)
    assert verify_memorization(net, ds, 1e-9)["failures"] == []
    # post matrices only on the final layer
    assert all(l.post is None for l in net.layers[:-1]) and net.layers[-1].post is not None


# ---------------------------------------------------------------- verify

def test_verify_zero_network():
    ds = LabeledDataset([[0.0], [1.0]], [1.0, 2.0], "real")
    zero = Network([Layer([[0.0]], [0.0])], 1)
    rep = verify_memorization(zero, ds)
    assert rep["failures"] == [0, 1] and rep["max_abs_error"] == 2.0


def test_verify_shape_mismatch():
    ds = LabeledDataset([[0.0], [1.0]], [[1.0, 0.0], [2.0, 1.0]], "vector")
    with pytest.raises(ShapeMismatch):
        verify_memorization(Network([Layer([[1.0]], [0.0])], 1), ds)
