"""Four-stage constructive memorizer and its vector and signed variants.

Stages, in layer order:

1. precondition  one layer, projects every point onto a separating direction
                 and shifts by 2 R_x so all values are positive.
2. compress      2N layers of width 2. Each block of two layers first splits
                 the line at a hyperplane (data structuring) and then folds the
                 two half-lines onto each other with slopes chosen so that two
                 points of the current class land on the same value.
3. sort          2M + 1 layers. A projection onto a separating direction, then
                 one block per class that lifts it above all other values, so
                 the classes end in label order without shrinking any gap.
4. label_map     2M - 3 layers sending the sorted values to the targets.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np
from scipy.linalg import block_diag

from .errors import DegenerateConfiguration, DomainError, DuplicatePoints, ShapeMismatch
from .geometry import (
    ConstructionTrace,
    Layer,
    Network,
    apply_layer,
    as_points,
    duplicate_pairs,
    forward,
    projection_gap,
    separating_direction,
)

# relative tolerance under which two stage values count as the same point
MERGE_RTOL = 1e-11
# candidate grid for fold points / projection slopes, ordered around the middle
_THETAS = np.linspace(0.2, 0.8, 61)
_THETAS = _THETAS[np.argsort(np.abs(_THETAS - 0.5), kind="stable")]


@dataclass
class LabeledDataset:
    points: np.ndarray
    labels: np.ndarray
    label_kind: str = "class"

    def __post_init__(self):
        self.points = as_points(self.points)
        labels = np.asarray(self.labels, dtype=np.float64)
        if labels.ndim == 2 and labels.shape[1] == 1 and self.label_kind != "vector":
            labels = labels[:, 0]
        self.labels = labels
        if labels.shape[0] != self.points.shape[0]:
            raise ShapeMismatch(f"{labels.shape[0]} labels for {self.points.shape[0]} points")
        if self.label_kind not in ("class", "real", "vector"):
            raise ValueError(f"unknown label kind {self.label_kind!r}")
        if self.label_kind == "vector" and labels.ndim != 2:
            raise ShapeMismatch("vector labels must be an (N, m) array")
        if self.label_kind != "vector" and labels.ndim != 1:
            raise ShapeMismatch("scalar labels must be a length-N array")
        if not (np.all(np.isfinite(self.points)) and np.all(np.isfinite(labels))):
            raise ValueError("points and labels must be finite")
        if self.label_kind == "class" and np.any((labels < 0) | (labels != np.round(labels))):
            raise ValueError("class labels must be non-negative integers")
        dups = duplicate_pairs(self.points)
        if dups:
            raise DuplicatePoints(f"duplicate points at rows {dups[:5]}", dups)

    @property
    def N(self):
        return self.points.shape[0]

    @property
    def d(self):
        return self.points.shape[1]

    @property
    def M(self):
        if self.labels.ndim == 2:
            return len(np.unique(self.labels, axis=0))
        return len(np.unique(self.labels))

    def classes(self):
        """Sorted distinct labels and the class index of every point."""
        if self.labels.ndim == 2:
            return np.unique(self.labels, axis=0, return_inverse=True)
        return np.unique(self.labels, return_inverse=True)

    def digest(self):
        h = hashlib.sha256()
        h.update(np.ascontiguousarray(self.points).tobytes())
        h.update(np.ascontiguousarray(self.labels).tobytes())
        return h.hexdigest()[:16]


@dataclass
class ClassRepresentatives:
    reps: np.ndarray
    class_of: dict


@dataclass
class SortedRepresentatives:
    values: np.ndarray


# ---------------------------------------------------------------- helpers

def _min_cross_gap(values, cls):
    """Smallest distance between values carrying different classes.

    Works row-wise on a 2-D array of candidate value sets. The minimum over
    all cross-class pairs is attained by some pair adjacent in sorted order.
    """
    V = np.atleast_2d(values)
    order = np.argsort(V, axis=1, kind="stable")
    sv = np.take_along_axis(V, order, axis=1)
    sc = np.asarray(cls)[order]
    diff = np.diff(sv, axis=1)
    diff = np.where(sc[:, 1:] != sc[:, :-1], diff, np.inf)
    return diff.min(axis=1) if diff.shape[1] else np.full(V.shape[0], np.inf)


def _groups(values, tol):
    """Distinct values up to tol, as a sorted array of group means."""
    v = np.sort(values)
    cuts = np.flatnonzero(np.diff(v) > tol) + 1
    return np.array([seg.mean() for seg in np.split(v, cuts)])


def _apply(layers, X):
    for layer in layers:
        X = apply_layer(layer, X)
    return X


# ---------------------------------------------------------------- stage 1

def precondition(ds, seed=0):
    """Project onto a separating direction and shift by 2 R_x."""
    X = ds.points if isinstance(ds, LabeledDataset) else as_points(ds)
    v = separating_direction(X, seed)
    r_x = float(np.max(np.linalg.norm(X, axis=1)))
    # all-zero data (a single point at the origin) still needs a positive image
    b = 2.0 * r_x if r_x > 0 else 1.0
    layer = Layer(v[None, :], [b])
    return layer, apply_layer(layer, X)[:, 0]


# ---------------------------------------------------------------- stage 2

class _Line:
    """Tracks a scalar coordinate t = state @ a + c carried by the layers."""

    def __init__(self, t):
        self.state = np.asarray(t, dtype=np.float64)[:, None]
        self.a = np.array([1.0])
        self.c = 0.0
        self.layers = []

    @property
    def t(self):
        return self.state @ self.a + self.c

    def block(self, m, s1, s2, pivot):
        """Structuring layer at hyperplane m, then fold with slopes s1, s2.

        Layer one sends t to (relu(t - m), relu(m - t)); layer two computes
        f = s1 relu(t - m) + s2 relu(m - t) and re-lifts it around pivot as
        (relu(f - pivot), relu(pivot - f)), so f = pivot + out_1 - out_2.
        """
        la = Layer(np.vstack([self.a, -self.a]), [self.c - m, m - self.c])
        lb = Layer([[s1, s2], [-s1, -s2]], [-pivot, pivot])
        self.state = apply_layer(lb, apply_layer(la, self.state))
        self.layers += [la, lb]
        self.a = np.array([1.0, -1.0])
        self.c = pivot


def _fold_candidates(t, lo, hi):
    """Fold points m in (lo, hi) and slopes (s1, s2) making lo and hi coincide.

    Returns arrays m, s1, s2 and the folded values of t, one row per candidate.
    """
    span = hi - lo
    m = lo + _THETAS * span
    keep = np.min(np.abs(t[None, :] - m[:, None]), axis=1) > 1e-6 * span
    m = m[keep]
    left, right = m - lo, hi - m
    s1 = np.where(right >= left, left / right, 1.0)
    s2 = np.where(right >= left, 1.0, right / left)
    F = s1[:, None] * np.maximum(t[None, :] - m[:, None], 0) + s2[:, None] * np.maximum(m[:, None] - t[None, :], 0)
    return m, s1, s2, F


def compress_classes(projected, labels):
    """Collapse every class to one point of the closed positive quadrant.

    Emits exactly 2N layers: for each class one shift block followed by one
    fold block per remaining member. A fold block merges two adjacent values
    of the current class; the pair and fold point are chosen among candidates
    so that the smallest cross-class gap after the fold is largest.
    """
    t = np.asarray(projected, dtype=np.float64).reshape(-1)
    values, cls = np.unique(np.asarray(labels), return_inverse=True)
    if np.any(t <= 0):
        raise DomainError("projected values must be positive")
    if projection_gap(t) <= 0:
        raise DegenerateConfiguration("projected values must be pairwise distinct")
    n_cls = len(values)
    line = _Line(t)
    for k in range(n_cls):
        members = np.flatnonzero(cls == k)
        cur = line.t
        # shift block: move the data towards the origin without changing gaps
        gaps = np.diff(np.unique(cur))
        g = float(gaps.min()) if gaps.size else float(cur.min())
        m = float(cur.min()) - g
        line.block(m, 1.0, -1.0, float(cur[members].min()) - m)
        for _ in range(len(members) - 1):
            cur = line.t
            scale = float(np.max(np.abs(cur)))
            groups = _groups(cur[members], MERGE_RTOL * scale)
            if len(groups) < 2:
                # class already collapsed: identity block keeps the budget exact
                line.block(0.0, 1.0, -1.0, float(groups[0]))
                continue
            # every adjacent pair of class members is a candidate; slopes are
            # at most 1, so the absolute cross-class gap measures how well the
            # fold keeps classes apart relative to accumulated rounding
            best = None
            for lo, hi in zip(groups[:-1], groups[1:]):
                m, s1, s2, F = _fold_candidates(cur, lo, hi)
                if not len(m):
                    continue
                score = _min_cross_gap(F, cls)
                j = int(np.argmax(score))
                if best is None or score[j] > best[0]:
                    best = (score[j], (m[j], s1[j], s2[j]), lo)
            if best is None or not best[0] > 0:
                raise DegenerateConfiguration("every fold candidate collides two classes")
            _, (m, s1, s2), lo = best
            # rescale so the largest value is kept; spreads the amplification
            # that stage 4 would otherwise need over the fold layers
            f_max = max(s1 * (cur.max() - m), s2 * (m - cur.min()))
            kappa = float(cur.max()) / f_max
            line.block(m, kappa * s1, kappa * s2, kappa * s2 * (m - lo))
    final = line.state
    reps = np.array([final[np.flatnonzero(cls == k)[0]] for k in range(n_cls)])
    class_of = {_label_key(v): k for k, v in enumerate(values)}
    return line.layers, ClassRepresentatives(reps, class_of)


def _label_key(v):
    return tuple(np.atleast_1d(v).tolist()) if np.ndim(v) else float(v)


# ---------------------------------------------------------------- stage 3

def _lift_block(u, e, pivot_next, spacing):
    """Two layers moving class e just above every other value.

    The incoming state is (relu(u - t), relu(t - u)) with t = u[e]. Layer one
    computes a tent relu(r - |u - t|), nonzero only at the target since r is
    half the distance to its nearest neighbour, and the shifted copy
    u - t + C > 0. Layer two adds H / r times the tent, which lifts the target
    by H and leaves every other value unchanged, then re-lifts around the next
    target (or, for the last block, outputs the single positive value).
    Returns (layers, new values, final offset).
    """
    t = float(u[e])
    others = np.delete(u, e)
    r = float(np.min(np.abs(others - t))) / 2 if others.size else spacing / 2
    C = float(np.max(t - u)) + spacing
    H = float(others.max()) + spacing - t if others.size else 0.0
    la = Layer([[-1.0, -1.0], [1.0, -1.0]], [r, C])
    v = u.copy()
    v[e] = t + H
    g = H / r
    # v = g a1 + a2 + (t - C)
    if pivot_next is None:
        off = spacing - float(v.min())
        lb = Layer([[g, 1.0]], [t - C + off])
        return [la, lb], v + off, off
    p = float(v[pivot_next])
    lb = Layer([[g, 1.0], [-g, -1.0]], [t - C - p, p - t + C])
    return [la, lb], v, 0.0


def sort_representatives(reps, seed=0):
    """Map class representatives to strictly increasing values in label order.

    One projection layer onto a separating direction, lifted around the value
    of class 0, followed by one lift block per class in label order. After
    block e the classes 0..e hold the e + 1 largest values, in order.
    """
    Z = np.asarray(reps.reps if isinstance(reps, ClassRepresentatives) else reps, dtype=np.float64)
    if Z.ndim == 1:
        Z = Z[:, None]
    n = Z.shape[0]
    v = separating_direction(Z, seed)
    u = Z @ v
    spacing = projection_gap(u)
    if not np.isfinite(spacing):
        spacing = max(float(np.max(np.abs(u))), 1.0)
    t0 = float(u[0])
    layers = [Layer(np.vstack([v, -v]), [-t0, t0])]
    state = apply_layer(layers[0], Z)
    pivot = t0
    for e in range(n):
        nxt = e + 1 if e + 1 < n else None
        block, target, off = _lift_block(u, e, nxt, spacing)
        state = apply_layer(block[1], apply_layer(block[0], state))
        layers += block
        # carry the values actually produced, rounding included
        if nxt is None:
            u = state[:, 0]
        else:
            pivot = float(target[nxt])
            u = state[:, 0] - state[:, 1] + pivot
        top = np.argsort(u, kind="stable")[n - e - 1:]
        if list(top) != list(range(e + 1)) or projection_gap(u) <= 0:
            raise DegenerateConfiguration(f"lift invariant broken after block {e}")
    if np.any(np.diff(u) <= 0) or np.any(u <= 0):
        raise DegenerateConfiguration("sorted values are not strictly increasing and positive")
    return layers, SortedRepresentatives(u)


# ---------------------------------------------------------------- stage 4

def map_to_labels(xi, targets=None):
    """Layers sending the increasing values xi[k] to targets[k]."""
    xi = np.asarray(xi.values if isinstance(xi, SortedRepresentatives) else xi, dtype=np.float64)
    n = len(xi)
    tau = np.arange(n, dtype=np.float64) if targets is None else np.asarray(targets, dtype=np.float64)
    if len(tau) != n:
        raise ShapeMismatch(f"{len(tau)} targets for {n} values")
    if n == 0 or np.any(np.diff(xi) <= 0) or np.any(np.diff(tau) <= 0) or tau[0] < 0:
        raise DegenerateConfiguration("values and targets must be strictly increasing, targets >= 0")
    if n == 1:
        return [Layer([[1.0]], [tau[0] - xi[0]])]
    w = (tau[1] - tau[0]) / (xi[1] - xi[0])
    layers = [Layer([[w]], [tau[0] - w * xi[0]])]
    v = apply_layer(layers[0], xi[:, None])[:, 0]
    for eta in range(1, n - 1):
        lo, nxt = v[eta], v[eta + 1]
        m = (lo + nxt) / 2
        if m >= tau[eta + 1]:
            # midpoint would give the tail a non-positive slope; move the
            # hyperplane below the next target instead
            m = (tau[eta] + min(tau[eta + 1], nxt)) / 2
        alpha = 1.0 / (nxt - m)
        struct = Layer([[alpha], [1.0]], [-alpha * m, 0.0])
        proj = Layer([[tau[eta + 1] - nxt, 1.0]], [0.0])
        layers += [struct, proj]
        v = apply_layer(proj, apply_layer(struct, v[:, None]))[:, 0]
    return layers


# ---------------------------------------------------------------- builders

def memorizer_depth(N, M):
    return 2 * N + 4 * M - 1 if M >= 2 else 2 * N + 5


def _snapshots(layers, X, bounds):
    snaps = []
    state = X
    pos = 0
    for stop in bounds:
        state = _apply(layers[pos:stop], state)
        snaps.append(state)
        pos = stop
    return snaps


def build_memorizer(ds, seed=0, targets=None):
    """Width-2 network of depth 2N + 4M - 1 sending every x_i to its label.

    Labels must be non-negative scalars; class k (the k-th smallest label)
    is sent to targets[k], which defaults to the label value itself.
    """
    if ds.labels.ndim != 1:
        raise ShapeMismatch("build_memorizer needs scalar labels; use build_vector_memorizer")
    values, cls = ds.classes()
    tau = values if targets is None else np.asarray(targets, dtype=np.float64)
    if np.any(tau < 0):
        raise DomainError("targets must be non-negative; use build_signed_memorizer")
    first, t = precondition(ds, seed)
    stage2, reps = compress_classes(t, cls)
    stage3, xi = sort_representatives(reps, seed)
    stage4 = map_to_labels(xi, tau)
    layers = [first] + stage2 + stage3 + stage4
    net = Network(layers, ds.d)
    bounds = np.cumsum([1, len(stage2), len(stage3), len(stage4)])
    trace = ConstructionTrace()
    names = ["precondition", "compress", "sort", "label_map"]
    start = 0
    for name, stop, snap in zip(names, bounds, _snapshots(layers, ds.points, bounds)):
        trace.add(name, start, int(stop), snap)
        start = int(stop)
    trace.flags["class_index"] = cls
    trace.flags["targets"] = tau
    if len(values) == 1:
        trace.flags["nonstandard_depth"] = True
    return net, trace


def identity_layer(dim):
    return Layer(np.eye(dim), np.zeros(dim))


def pad_network(net, depth):
    """Append identity layers (exact on non-negative data) up to depth."""
    if net.depth > depth:
        raise ValueError(f"network of depth {net.depth} cannot be padded to {depth}")
    layers = list(net.layers)
    layers += [identity_layer(net.output_dim) for _ in range(depth - net.depth)]
    return Network(layers, net.input_dim)


def stack_networks(nets):
    """Run equal-depth networks side by side on the same input."""
    depth = nets[0].depth
    if any(n.depth != depth for n in nets) or any(n.input_dim != nets[0].input_dim for n in nets):
        raise ShapeMismatch("stacked networks need equal depth and input dimension")
    if any(n.has_post for n in nets):
        raise ShapeMismatch("post matrices are not supported when stacking")
    layers = []
    for j in range(depth):
        parts = [n.layers[j] for n in nets]
        if j == 0:
            W = np.vstack([p.weights for p in parts])
        else:
            W = block_diag(*[p.weights for p in parts])
        layers.append(Layer(W, np.concatenate([p.bias for p in parts])))
    return Network(layers, nets[0].input_dim)


def build_vector_memorizer(ds, seed=0):
    """Width <= 2m memorizer for non-negative m-vector labels."""
    Y = ds.labels if ds.labels.ndim == 2 else ds.labels[:, None]
    if np.any(Y < 0):
        raise DomainError("vector labels must be non-negative")
    n_rows = len(np.unique(Y, axis=0))
    if Y.shape[1] == 1:
        return build_memorizer(LabeledDataset(ds.points, Y[:, 0], "real"), seed)[0]
    depth = 2 * ds.N + 4 * n_rows - 1
    parts = []
    for j in range(Y.shape[1]):
        col = Y[:, j]
        if len(np.unique(col)) == 1:
            # constant component: one layer outputting the value
            comp = Network([Layer(np.zeros((1, ds.d)), [col[0]])], ds.d)
        else:
            comp = build_memorizer(LabeledDataset(ds.points, col, "real"), seed)[0]
        parts.append(pad_network(comp, depth))
    return stack_networks(parts)


def signed_decoder(y0):
    """Layer computing y_hat + y0 for every real input y_hat.

    ``y0`` may be a scalar or an m-vector; the layer then has width 2m.
    """
    y0 = np.atleast_1d(np.asarray(y0, dtype=np.float64))
    eye = np.eye(len(y0))
    return Layer(np.vstack([-eye, eye]), np.concatenate([-y0, y0]), post=np.hstack([-eye, eye]))


def signed_memorizer_with_trace(ds, seed=0):
    """Shift labels by their minimum, memorize, decode; returns (net, trace)."""
    if ds.labels.ndim != 1:
        raise ShapeMismatch("signed memorizer needs scalar labels")
    y0 = float(ds.labels.min())
    shifted = LabeledDataset(ds.points, ds.labels - y0, "real")
    net, trace = build_memorizer(shifted, seed)
    net = Network(list(net.layers) + [signed_decoder(y0)], ds.d)
    trace.add("decoder", net.depth - 1, net.depth, forward(net, ds.points))
    trace.flags["shift"] = y0
    return net, trace


def build_signed_memorizer(ds, seed=0):
    """Memorizer for real labels of any sign: shift, memorize, decode."""
    return signed_memorizer_with_trace(ds, seed)[0]


def verify_memorization(net, ds, tol=1e-6):
    out = forward(net, ds.points).reshape(ds.N, -1)
    Y = ds.labels.reshape(ds.N, -1)
    if out.shape != Y.shape:
        raise ShapeMismatch(f"network output {out.shape[1]} vs label dim {Y.shape[1]}")
    err = np.max(np.abs(out - Y), axis=1)
    failures = [int(i) for i in np.flatnonzero(err > tol)]
    return {"max_abs_error": float(err.max()) if len(err) else 0.0, "failures": failures}
