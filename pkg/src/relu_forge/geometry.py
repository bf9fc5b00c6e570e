"""Hyperplane and forward-pass primitives shared by the constructors.

Networks are stored as plain float64 matrices. A layer computes
``post @ act(W x + b)``; ``post`` is ``None`` for the plain architecture.
"""

from __future__ import annotations

import functools
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial.distance import pdist
from scipy.special import erf

from .errors import DuplicatePoints, NoDirectionFound, ShapeMismatch

DEDUP_TOL = 1e-12
GAP_TOL = 1e-9
MAX_RETRIES = 1000
# accepted draws compared before picking the best-conditioned direction
DIRECTION_CANDIDATES = 8


def _frozen(a):
    a = np.array(a, dtype=np.float64)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class Layer:
    weights: np.ndarray
    bias: np.ndarray
    post: np.ndarray | None = None

    def __post_init__(self):
        w = _frozen(self.weights)
        if w.ndim != 2:
            raise ShapeMismatch(f"weights must be 2-D, got shape {w.shape}")
        b = _frozen(self.bias).reshape(-1)
        if b.shape[0] != w.shape[0]:
            raise ShapeMismatch(f"bias length {b.shape[0]} != d_out {w.shape[0]}")
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "bias", b)
        if self.post is not None:
            a = _frozen(self.post)
            if a.ndim != 2 or a.shape[1] != w.shape[0]:
                raise ShapeMismatch(f"post shape {a.shape} incompatible with d_out {w.shape[0]}")
            object.__setattr__(self, "post", a)
        if not (np.all(np.isfinite(w)) and np.all(np.isfinite(b))):
            raise ValueError("layer parameters must be finite")

    @property
    def d_in(self):
        return self.weights.shape[1]

    @property
    def d_out(self):
        return self.weights.shape[0]

    @property
    def out_dim(self):
        """Dimension of the layer output after the optional post matrix."""
        return self.d_out if self.post is None else self.post.shape[0]


@dataclass(frozen=True)
class Network:
    layers: tuple
    input_dim: int

    def __post_init__(self):
        layers = tuple(self.layers)
        object.__setattr__(self, "layers", layers)
        if self.input_dim < 1:
            raise ShapeMismatch("input_dim must be positive")
        dim = self.input_dim
        for j, layer in enumerate(layers):
            if layer.d_in != dim:
                raise ShapeMismatch(f"layer {j} expects input {layer.d_in}, previous output is {dim}")
            dim = layer.out_dim

    @property
    def depth(self):
        return len(self.layers)

    @property
    def width(self):
        return max((layer.d_out for layer in self.layers), default=0)

    @property
    def output_dim(self):
        return self.layers[-1].out_dim if self.layers else self.input_dim

    @property
    def has_post(self):
        return any(layer.post is not None for layer in self.layers)


@dataclass(frozen=True)
class Stage:
    name: str
    start: int
    stop: int
    snapshot: np.ndarray | None = None


@dataclass
class ConstructionTrace:
    stages: list = field(default_factory=list)
    flags: dict = field(default_factory=dict)

    def add(self, name, start, stop, snapshot=None):
        if self.stages and self.stages[-1].stop != start:
            raise ValueError("stage layer ranges must be contiguous")
        snap = None if snapshot is None else np.array(snapshot, dtype=np.float64)
        self.stages.append(Stage(name, start, stop, snap))

    def stage(self, name):
        for s in self.stages:
            if s.name == name:
                return s
        raise KeyError(name)

    def covers(self, depth):
        if not self.stages:
            return depth == 0
        pos = 0
        for s in self.stages:
            if s.start != pos or s.stop < s.start:
                return False
            pos = s.stop
        return pos == depth


# ---------------------------------------------------------------- activations

def relu(x):
    return np.maximum(x, 0.0)


def gelu_eps(x, eps):
    if eps <= 0:
        raise ValueError("eps must be positive")
    x = np.asarray(x, dtype=np.float64)
    return 0.5 * x * (1.0 + erf(x / (eps * np.sqrt(2.0))))


def gelu_eps_derivative(x, eps):
    x = np.asarray(x, dtype=np.float64)
    s = x / eps
    return 0.5 * (1.0 + erf(s / np.sqrt(2.0))) + s * np.exp(-0.5 * s * s) / np.sqrt(2.0 * np.pi)


@functools.lru_cache(maxsize=None)
def gelu_gap_constant():
    """Return (c0, x0): the sup of |gelu - relu| and where it is attained.

    Grid search on [-6, 6] followed by successive zooming around the best
    grid point. x0 is reported as a signed location.
    """
    lo, hi = -6.0, 6.0
    best_x = 0.0
    for _ in range(12):
        xs = np.linspace(lo, hi, 4001)
        gap = np.abs(gelu_eps(xs, 1.0) - relu(xs))
        k = int(np.argmax(gap))
        best_x = float(xs[k])
        step = xs[1] - xs[0]
        lo, hi = best_x - 2 * step, best_x + 2 * step
    c0 = float(abs(gelu_eps(best_x, 1.0) - relu(best_x)))
    return c0, best_x


@dataclass(frozen=True)
class Activation:
    kind: str = "relu"
    eps: float = 0.0

    def __post_init__(self):
        if self.kind not in ("relu", "gelu"):
            raise ValueError(f"unknown activation {self.kind!r}")
        if self.kind == "gelu" and not self.eps > 0:
            raise ValueError("gelu activation needs eps > 0")

    @classmethod
    def parse(cls, spec):
        if isinstance(spec, Activation):
            return spec
        if spec is None or spec == "relu":
            return cls()
        if isinstance(spec, str) and spec.startswith("gelu"):
            _, _, eps = spec.partition(":")
            return cls("gelu", float(eps))
        if isinstance(spec, tuple) and spec[0] == "gelu":
            return cls("gelu", float(spec[1]))
        raise ValueError(f"cannot parse activation {spec!r}")

    def __call__(self, z):
        if self.kind == "relu":
            return relu(z)
        return gelu_eps(z, self.eps)

    def derivative(self, z):
        if self.kind == "relu":
            return (z > 0).astype(np.float64)
        return gelu_eps_derivative(z, self.eps)

    def __str__(self):
        return "relu" if self.kind == "relu" else f"gelu:{self.eps!r}"


RELU = Activation()


# ---------------------------------------------------------------- directions

def as_points(points):
    X = np.asarray(points, dtype=np.float64)
    if X.ndim == 1:
        X = X[:, None]
    if X.ndim != 2 or X.shape[1] < 1:
        raise ShapeMismatch(f"points must be an (N, d) array, got shape {X.shape}")
    return X


def duplicate_pairs(points, tol=DEDUP_TOL):
    """Index pairs (i, j), i < j, of points closer than tol (max-norm)."""
    X = as_points(points)
    order = np.lexsort(X.T[::-1])
    pairs = []
    for a in range(len(order)):
        i = order[a]
        for b in range(a + 1, len(order)):
            j = order[b]
            if X[j, 0] - X[i, 0] > tol:
                break
            if np.max(np.abs(X[i] - X[j])) <= tol:
                pairs.append((int(min(i, j)), int(max(i, j))))
    return sorted(pairs)


def min_pairwise_distance(points):
    X = as_points(points)
    if len(X) < 2:
        return np.inf
    return float(np.min(pdist(X)))


def projection_gap(values):
    v = np.sort(np.asarray(values, dtype=np.float64))
    if len(v) < 2:
        return np.inf
    return float(np.min(np.diff(v)))


def separating_direction(points, seed=0, gap_tol=GAP_TOL, max_retries=MAX_RETRIES,
                         candidates=DIRECTION_CANDIDATES):
    """Unit vector v with pairwise distinct projections v . x_i.

    Random Gaussian directions are drawn from a seeded generator; a draw is
    accepted when the smallest projection gap is at least gap_tol times the
    smallest point distance. Among the first ``candidates`` accepted draws
    the one with the largest gap is returned.
    """
    X = as_points(points)
    dups = duplicate_pairs(X)
    if dups:
        raise DuplicatePoints(f"coinciding points at rows {dups[:5]}", dups)
    d = X.shape[1]
    if d == 1:
        return np.ones(1)
    dmin = min_pairwise_distance(X)
    rng = np.random.default_rng(seed)
    best, best_gap, accepted = None, -np.inf, 0
    for _ in range(max_retries):
        v = rng.standard_normal(d)
        nv = np.linalg.norm(v)
        if nv == 0:
            continue
        v /= nv
        gap = projection_gap(X @ v)
        if gap >= gap_tol * dmin:
            accepted += 1
            if gap > best_gap:
                best, best_gap = v, gap
            if accepted >= candidates:
                break
    if best is None:
        raise NoDirectionFound(f"no separating direction after {max_retries} draws")
    return best


# ---------------------------------------------------------------- forward

def _check_input(net, x):
    X = np.asarray(x, dtype=np.float64)
    single = X.ndim == 1
    if single:
        X = X[None, :]
    if X.ndim != 2 or X.shape[1] != net.input_dim:
        raise ShapeMismatch(f"input has shape {np.shape(x)}, network expects dim {net.input_dim}")
    return X, single


def apply_layer(layer, X, activation=RELU):
    Z = X @ layer.weights.T + layer.bias
    H = activation(Z)
    if layer.post is not None:
        H = H @ layer.post.T
    return H


def forward_trace(net, x, activation=RELU):
    """Input followed by every layer output; a depth-0 net returns [x]."""
    activation = Activation.parse(activation)
    X, single = _check_input(net, x)
    states = [X]
    for layer in net.layers:
        X = apply_layer(layer, X, activation)
        states.append(X)
    if single:
        states = [s[0] for s in states]
    if net.depth == 0:
        return states
    return states[1:]


def forward_with_activation(net, x, activation):
    activation = Activation.parse(activation)
    X, single = _check_input(net, x)
    for layer in net.layers:
        X = apply_layer(layer, X, activation)
    return X[0] if single else X


def forward(net, x):
    return forward_with_activation(net, x, RELU)


# ---------------------------------------------------------------- width one

def random_width_one_network(rng, input_dim, depth, scale=2.0):
    layers = []
    d = input_dim
    for _ in range(depth):
        layers.append(Layer(rng.normal(0, scale, (1, d)), rng.normal(0, scale, 1)))
        d = 1
    return Network(layers, input_dim)


def is_monotone(values):
    diffs = np.diff(np.asarray(values, dtype=np.float64).reshape(-1))
    return bool(np.all(diffs >= 0) or np.all(diffs <= 0))


def monotone_along_line(net, x0, direction, ts):
    pts = np.asarray(x0)[None, :] + np.asarray(ts)[:, None] * np.asarray(direction)[None, :]
    return is_monotone(forward(net, pts)[:, 0])


def pattern_reachable_by_monotone(inputs, outputs):
    """Whether some monotone scalar map sends the ordered inputs to outputs.

    Any width-1 ReLU network restricted to a line is such a map, so a False
    here means no width-1 network realizes the pattern on collinear inputs.
    """
    order = np.argsort(np.asarray(inputs, dtype=np.float64))
    return is_monotone(np.asarray(outputs, dtype=np.float64)[order])
