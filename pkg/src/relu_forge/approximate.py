"""Universal approximation by compressing grid cells and memorizing their averages.

The box C around the domain is cut into cells of side h separated by bands of
thickness delta = h^(1+p). Every compression block is a two-layer map whose
first layer uses one hyperplane per axis plus a second one on the edge axis,
all placed inside bands, so it acts on each coordinate separately as a
monotone piecewise-linear map that is affine on every cell. Cells therefore
stay axis-aligned boxes, and the module tracks them exactly per axis.
"""

from __future__ import annotations

import itertools
import json
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import PlacementError, ShapeMismatch, TooFine
from .geometry import ConstructionTrace, Layer, Network, apply_layer, forward
from .memorize import (
    LabeledDataset,
    build_memorizer,
    build_vector_memorizer,
    memorizer_depth,
    signed_decoder,
)

CELL_BUDGET = 4096
QUAD_POINTS = 8
VALUE_ROUND_TOL = 1e-9
SEP_TOL = 1e-9


# ---------------------------------------------------------------- targets

@dataclass(frozen=True)
class Target:
    name: str
    f: object
    bbox: tuple
    domain: object = None
    grad: object = None

    def extended(self, X):
        """f on the domain, zero elsewhere in the box."""
        X = np.asarray(X, dtype=np.float64)
        v = np.asarray(self.f(X), dtype=np.float64)
        if self.domain is None:
            return v
        inside = self.domain(X)
        return np.where(inside if v.ndim == 1 else inside[:, None], v, 0.0)


def _x2(X):
    return X[:, 0] ** 2


def _paraboloid(X):
    return X[:, 0] ** 2 + X[:, 1] ** 2


def _unit_disk(X):
    return X[:, 0] ** 2 + X[:, 1] ** 2 <= 1.0


TARGETS = {
    "x2": Target("x2", _x2, ((0.0,), (1.0,)), None, lambda X: 2.0 * X[:, :1]),
    "paraboloid": Target("paraboloid", _paraboloid, ((-1.0, -1.0), (1.0, 1.0)), _unit_disk,
                         lambda X: 2.0 * X),
}


# ---------------------------------------------------------------- grid

@dataclass
class HyperrectGrid:
    lo: np.ndarray
    hi: np.ndarray
    h: float
    delta: float
    p_exponent: float
    segments: list
    bands: list
    shape: tuple
    cells: list = field(default_factory=list)
    band_cells: list = field(default_factory=list)
    edge_cells: list = field(default_factory=list)

    @property
    def d(self):
        return len(self.lo)

    @property
    def N_h(self):
        return len(self.cells)

    @property
    def N_E(self):
        return len(self.edge_cells)

    @property
    def longest_edge(self):
        return float(np.max(self.hi - self.lo))

    @property
    def C_omega(self):
        """Recorded constant with N_h <= C_omega h^-d."""
        return float(np.prod(self.hi - self.lo + 1.0))

    @property
    def C_omega_d(self):
        """Recorded constant with m(G) <= C_omega_d delta (h + delta)^(d-1) h^-d."""
        return float(2 * self.d * np.prod(np.maximum(self.hi - self.lo, 1.0)))

    def band_measure(self):
        return float(sum(np.prod(b[1] - b[0]) for b in self.band_cells))

    def band_bound(self):
        d, h, dl = self.d, self.h, self.delta
        return self.C_omega_d * dl * (h + dl) ** (d - 1) * h ** (-d)

    def cell_index(self, flat):
        return np.unravel_index(flat, self.shape)


def _axis_layout(lo, hi, h, delta):
    """Cell and band intervals along one axis, cells first from lo."""
    cells, bands = [], []
    a = lo
    while a < hi:
        c = min(a + h, hi)
        if c - a < delta and cells:
            # too thin to be a cell; leave it to the band
            bands.append((a, hi))
            break
        cells.append((a, c))
        if c >= hi:
            break
        b = min(c + delta, hi)
        bands.append((c, b))
        a = b
    return cells, bands


def build_grid(bbox, h, p=2.0, budget=CELL_BUDGET):
    lo = np.atleast_1d(np.asarray(bbox[0], dtype=np.float64))
    hi = np.atleast_1d(np.asarray(bbox[1], dtype=np.float64))
    if lo.shape != hi.shape or lo.ndim != 1:
        raise ShapeMismatch("bbox needs matching lower and upper corners")
    if not np.all(hi > lo):
        raise ValueError("bbox must be nondegenerate")
    if not 0 < h < 1:
        raise ValueError("h must be in (0, 1)")
    if not p >= 1:
        raise ValueError("p must be at least 1")
    delta = h ** (1.0 + p)
    counts = [int(math.ceil((b - a) / (h + delta))) for a, b in zip(lo, hi)]
    if np.prod([float(c) for c in counts]) > budget:
        raise TooFine(f"about {int(np.prod(counts))} cells exceed the budget of {budget}")
    segments, bands = [], []
    for a, b in zip(lo, hi):
        c, g = _axis_layout(float(a), float(b), h, delta)
        segments.append(np.array(c))
        bands.append(np.array(g).reshape(-1, 2))
    shape = tuple(len(s) for s in segments)
    if int(np.prod(shape)) > budget:
        raise TooFine(f"{int(np.prod(shape))} cells exceed the budget of {budget}")
    grid = HyperrectGrid(lo, hi, h, delta, p, segments, bands, shape)
    for idx in np.ndindex(*shape):
        box = np.array([segments[k][i] for k, i in enumerate(idx)])
        grid.cells.append((box[:, 0], box[:, 1]))
        if sum(1 for i in idx if i) <= 1:
            grid.edge_cells.append(len(grid.cells) - 1)
    # band boxes: products of per-axis pieces with at least one band piece
    pieces = []
    for k in range(grid.d):
        tagged = [(tuple(s), False) for s in segments[k]] + [(tuple(s), True) for s in bands[k]]
        pieces.append(tagged)
    for combo in itertools.product(*pieces):
        if any(is_band for _, is_band in combo):
            box = np.array([s for s, _ in combo])
            grid.band_cells.append((box[:, 0], box[:, 1]))
    return grid


# ---------------------------------------------------------------- simple function

@dataclass
class SimpleFunction:
    grid: HyperrectGrid
    cell_values: np.ndarray
    band_values: np.ndarray
    M_h: int

    def __call__(self, X):
        """f_h at points of the box; band points get their band average."""
        X = np.asarray(X, dtype=np.float64)
        out = np.zeros((len(X),) + self.cell_values.shape[1:])
        done = np.zeros(len(X), bool)
        for boxes, vals in ((self.grid.cells, self.cell_values), (self.grid.band_cells, self.band_values)):
            for (a, b), v in zip(boxes, vals):
                hit = ~done & np.all((X >= a) & (X <= b), axis=1)
                out[hit] = v
                done |= hit
        return out


def _quad_nodes(boxes, q):
    """Midpoint nodes, q per axis, for every box; returns (n_boxes, q^d, d)."""
    a = np.array([b[0] for b in boxes])
    b = np.array([b[1] for b in boxes])
    d = a.shape[1]
    u = (np.arange(q) + 0.5) / q
    grid = np.array(list(itertools.product(u, repeat=d)))
    return a[:, None, :] + grid[None, :, :] * (b - a)[:, None, :]


def _box_averages(target, boxes, q):
    if not boxes:
        return np.zeros(0)
    nodes = _quad_nodes(boxes, q)
    n, k, d = nodes.shape
    vals = target.extended(nodes.reshape(n * k, d))
    return vals.reshape((n, k) + vals.shape[1:]).mean(axis=1)


def round_values(values, tol=VALUE_ROUND_TOL):
    """Merge values closer than tol (chained) onto the smallest one of the run."""
    v = np.asarray(values, dtype=np.float64)
    if v.ndim == 2:
        return np.column_stack([round_values(v[:, j], tol) for j in range(v.shape[1])])
    order = np.argsort(v, kind="stable")
    out = v.copy()
    rep = None
    prev = None
    for i in order:
        if prev is None or v[i] - prev > tol:
            rep = v[i]
        out[i] = rep
        prev = v[i]
    return out


def cell_averages(target, grid, quad_points=QUAD_POINTS, tol=VALUE_ROUND_TOL):
    cells = round_values(_box_averages(target, grid.cells, quad_points), tol)
    bands = _box_averages(target, grid.band_cells, quad_points)
    m_h = len(np.unique(cells, axis=0)) if cells.ndim == 2 else len(np.unique(cells))
    return SimpleFunction(grid, cells, bands, m_h)


# ---------------------------------------------------------------- compression

@dataclass
class CompressionState:
    """Current image of every cell: per axis, one interval per grid index."""
    axes: list
    pad: float

    @property
    def d(self):
        return len(self.axes)

    def points(self, grid):
        idx = np.array(list(np.ndindex(*grid.shape)))
        return np.column_stack([self.axes[k][idx[:, k], 0] for k in range(self.d)])

    def collapsed_axes(self):
        return [bool(np.all(a[:, 1] == a[:, 0])) for a in self.axes]


def initial_state(grid):
    return CompressionState([s.copy() for s in grid.segments], grid.delta)


def edge_layers(d, eta, cuts, lower, b2):
    """The two layers of one compression block from explicit hyperplanes.

    Rows of the first layer are e_k x - cuts[k] for every axis k, with the
    row -e_eta x + lower inserted after row eta. The second layer is the
    transpose of the first weight matrix with bias b2.
    """
    rows = []
    bias = []
    for k in range(d):
        e = np.zeros(d)
        e[k] = 1.0
        rows.append(e)
        bias.append(-cuts[k])
        if k == eta:
            rows.append(-e)
            bias.append(lower)
    W1 = np.array(rows)
    return Layer(W1, bias), Layer(W1.T.copy(), b2)


def _axis_map(t, cut, lower=None):
    """Coordinate action of a block before the b2 shift."""
    u = np.maximum(t - cut, 0.0)
    if lower is not None:
        u = u - np.maximum(lower - t, 0.0)
    return u


def compress_edge_cell(state, index):
    """Two layers sending the edge cell ``index`` to one point.

    Other cells keep their order along every axis, so distinct cells stay
    distinct. Returns (layers, new_state).
    """
    index = tuple(int(i) for i in index)
    d = state.d
    if len(index) != d:
        raise ShapeMismatch(f"cell index {index} in dimension {d}")
    nz = [k for k, i in enumerate(index) if i]
    if len(nz) > 1:
        raise PlacementError(f"cell {index} does not touch a selected edge")
    eta = nz[0] if nz else 0
    cuts = np.zeros(d)
    lower = 0.0
    for k in range(d):
        iv = state.axes[k]
        i = index[k]
        a, c = iv[i]
        above = iv[i + 1, 0] - c if i + 1 < len(iv) else None
        if above is not None and not above > SEP_TOL:
            raise PlacementError(f"band above cell {index} on axis {k} is too thin")
        if c == a and k != eta:
            cuts[k] = c
        else:
            cuts[k] = c if above is None else c + above / 4.0
        if k == eta:
            below = a - iv[i - 1, 1] if i > 0 else None
            if below is not None and not below > SEP_TOL:
                raise PlacementError(f"band below cell {index} on axis {k} is too thin")
            lower = a if below is None else a - below / 4.0
    new_axes = []
    b2 = np.zeros(d)
    for k in range(d):
        u = _axis_map(state.axes[k], cuts[k], lower if k == eta else None)
        b2[k] = state.pad - u[0, 0]
        new_axes.append(u + b2[k])
    for k, iv in enumerate(new_axes):
        flat = iv.reshape(-1)
        if np.any(np.diff(flat) < 0) or np.any(iv[1:, 0] - iv[:-1, 1] <= SEP_TOL):
            raise PlacementError(f"compression of cell {index} merges cells along axis {k}")
        if iv[index[k], 1] != iv[index[k], 0]:
            raise PlacementError(f"cell {index} did not collapse along axis {k}")
    layers = edge_layers(d, eta, cuts, lower, b2)
    return list(layers), CompressionState(new_axes, state.pad)


def edge_order(grid):
    """Edge cells in processing order: the whole first edge, then the others."""
    order = []
    for eta in range(grid.d):
        for i in range(0 if eta == 0 else 1, grid.shape[eta]):
            idx = [0] * grid.d
            idx[eta] = i
            order.append(tuple(idx))
    return order


def compress_all(grid):
    """2 N_E layers of width d + 1 mapping every cell to its own point."""
    state = initial_state(grid)
    layers, states = [], [state]
    for idx in edge_order(grid):
        pair, state = compress_edge_cell(state, idx)
        layers += pair
        states.append(state)
    if not all(state.collapsed_axes()):
        raise PlacementError("some cells were not collapsed")
    pts = state.points(grid)
    return layers, pts, states


# ---------------------------------------------------------------- approximators

def _sampled(target):
    return target if isinstance(target, Target) else Target("custom", target, None)


def _compose(grid, values, builder, seed):
    comp, pts, _ = compress_all(grid)
    labels = values
    kind = "vector" if labels.ndim == 2 else "real"
    mem, mtrace = builder(LabeledDataset(pts, labels, kind), seed)
    net = Network(comp + list(mem.layers), grid.d)
    trace = ConstructionTrace()
    trace.add("compression", 0, len(comp), pts)
    if mtrace is not None:
        for s in mtrace.stages:
            trace.add(s.name, s.start + len(comp), s.stop + len(comp), s.snapshot)
        trace.flags.update(mtrace.flags)
    else:
        trace.add("memorize", len(comp), net.depth)
    trace.flags["N_E"] = grid.N_E
    return net, trace


def build_approximator(target, bbox=None, h=0.1, p=2.0, seed=0, budget=CELL_BUDGET,
                       quad_points=QUAD_POINTS):
    """Width max(d+1, 2) network equal to f_h on every cell, for f >= 0."""
    target = _sampled(target)
    grid = build_grid(bbox if bbox is not None else target.bbox, h, p, budget)
    sf = cell_averages(target, grid, quad_points)
    if sf.cell_values.ndim != 1:
        raise ShapeMismatch("build_approximator takes scalar targets; use build_vector_approximator")
    if np.any(sf.cell_values < 0):
        raise ValueError("cell averages are negative; use build_signed_approximator")
    net, trace = _compose(grid, sf.cell_values, lambda ds, s: build_memorizer(ds, s), seed)
    return net, sf, trace


def _vector_builder(ds, seed):
    return build_vector_memorizer(ds, seed), None


def build_vector_approximator(target, bbox=None, h=0.1, p=2.0, seed=0, budget=CELL_BUDGET,
                              quad_points=QUAD_POINTS):
    """Shared compression followed by one memorizer per component."""
    target = _sampled(target)
    grid = build_grid(bbox if bbox is not None else target.bbox, h, p, budget)
    sf = cell_averages(target, grid, quad_points)
    vals = sf.cell_values if sf.cell_values.ndim == 2 else sf.cell_values[:, None]
    if np.any(vals < 0):
        raise ValueError("cell averages are negative; use build_signed_approximator")
    net, trace = _compose(grid, vals, _vector_builder, seed)
    return net, sf, trace


def build_signed_approximator(target, bbox=None, h=0.1, p=2.0, seed=0, budget=CELL_BUDGET,
                              quad_points=QUAD_POINTS):
    """Shift by min(0, smallest cell value), approximate, decode the shift back."""
    target = _sampled(target)
    grid = build_grid(bbox if bbox is not None else target.bbox, h, p, budget)
    sf = cell_averages(target, grid, quad_points)
    vals = sf.cell_values if sf.cell_values.ndim == 2 else sf.cell_values[:, None]
    y0 = np.minimum(vals.min(axis=0), 0.0)
    shifted = vals - y0
    if shifted.shape[1] == 1:
        def builder(ds, s):
            return build_memorizer(LabeledDataset(ds.points, ds.labels.reshape(-1), "real"), s)
    else:
        builder = _vector_builder
    net, trace = _compose(grid, shifted, builder, seed)
    net = Network(list(net.layers) + [signed_decoder(y0)], grid.d)
    trace.add("decoder", net.depth - 1, net.depth)
    trace.flags["shift"] = y0
    return net, sf, trace


def expected_depth(grid, M_h):
    return 2 * grid.N_E + memorizer_depth(grid.N_h, M_h)


# ---------------------------------------------------------------- measurement

def uniform_samples(bbox, n, rng):
    lo = np.atleast_1d(np.asarray(bbox[0], dtype=np.float64))
    hi = np.atleast_1d(np.asarray(bbox[1], dtype=np.float64))
    return lo + rng.random((n, len(lo))) * (hi - lo)


def lp_error(net, target, p=2.0, n_samples=100_000, seed=0, bbox=None):
    """Monte-Carlo (integral over the domain of |phi - f|^p)^(1/p) and its standard error."""
    if n_samples < 1000:
        raise ValueError("n_samples must be at least 1000")
    target = _sampled(target)
    box = bbox if bbox is not None else target.bbox
    rng = np.random.default_rng(seed)
    X = uniform_samples(box, n_samples, rng)
    vol = float(np.prod(np.asarray(box[1], dtype=np.float64) - np.asarray(box[0], dtype=np.float64)))
    out = forward(net, X).reshape(n_samples, -1)
    f = np.asarray(target.f(X), dtype=np.float64).reshape(n_samples, -1)
    g = np.linalg.norm(out - f, axis=1) ** p
    if target.domain is not None:
        g = g * target.domain(X)
    mean = float(g.mean())
    se_mean = float(g.std(ddof=1) / math.sqrt(n_samples))
    est = (vol * mean) ** (1.0 / p)
    # delta method for the p-th root
    se = 0.0 if est == 0 else vol * se_mean * est ** (1.0 - p) / p
    return est, se


def cell_interior_samples(grid, n, rng, shrink=1e-3):
    """n points drawn inside random cells, kept off the cell boundary."""
    which = rng.integers(0, grid.N_h, n)
    a = np.array([grid.cells[i][0] for i in which])
    b = np.array([grid.cells[i][1] for i in which])
    pad = shrink * (b - a)
    U = rng.random(a.shape)
    return a + pad + U * (b - a - 2 * pad), which


def sup_sample(net, bbox, n=20_000, seed=0):
    rng = np.random.default_rng(seed)
    X = uniform_samples(bbox, n, rng)
    return float(np.max(np.abs(forward(net, X))))


def sup_bound_form(h, delta):
    """1 + delta (h + delta) + h, the h-dependence of the sup-norm bound."""
    return 1.0 + delta * (h + delta) + h


def sup_threshold(grid):
    return grid.longest_edge * math.log(2.0) / (grid.d + 1)


def depth_bound(w1p_norm, eps, d, C=1.0):
    """C |f|_{W^{1,p}}^d eps^-d."""
    if not eps > 0:
        raise ValueError("eps must be positive")
    return C * w1p_norm ** d * eps ** (-d)


def error_from_depth(w1p_norm, L, d, C=1.0):
    """Inverse form C |f|_{W^{1,p}} L^(-1/d)."""
    return C * w1p_norm * L ** (-1.0 / d)


def w1p_norm(target, p=2.0, n=400):
    """(int |f|^p + int |grad f|^p)^(1/p) over the domain, midpoint rule."""
    if target.grad is None:
        raise ValueError(f"target {target.name} has no gradient")
    lo = np.asarray(target.bbox[0], dtype=np.float64)
    hi = np.asarray(target.bbox[1], dtype=np.float64)
    d = len(lo)
    u = (np.arange(n) + 0.5) / n
    X = lo + np.array(list(itertools.product(u, repeat=d))) * (hi - lo)
    w = float(np.prod(hi - lo)) / len(X)
    inside = np.ones(len(X), bool) if target.domain is None else target.domain(X)
    f = np.abs(np.asarray(target.f(X)).reshape(len(X), -1))
    g = np.linalg.norm(np.asarray(target.grad(X)).reshape(len(X), -1), axis=1)
    total = np.sum((np.sum(f ** p, axis=1) + g ** p) * inside) * w
    return float(total ** (1.0 / p))


# ---------------------------------------------------------------- injectivity

def cell_samples(grid, per_cell, rng):
    """Corners plus random interior points of every cell; returns (X, owner)."""
    pts, owner = [], []
    d = grid.d
    corners = np.array(list(itertools.product([0.0, 1.0], repeat=d)))
    for i, (a, b) in enumerate(grid.cells):
        U = np.vstack([corners, rng.random((per_cell, d))])
        pts.append(a + U * (b - a))
        owner.append(np.full(len(U), i))
    return np.vstack(pts), np.concatenate(owner)


def _box_separation(lo, hi, chunk=256):
    """Smallest sup-norm distance between the boxes [lo_i, hi_i] of distinct cells."""
    n = len(lo)
    best = math.inf
    for s in range(0, n, chunk):
        a_lo, a_hi = lo[s:s + chunk, None, :], hi[s:s + chunk, None, :]
        gap = np.maximum(lo[None, :, :] - a_hi, a_lo - hi[None, :, :])
        sep = np.max(gap, axis=2)
        rows = np.arange(s, min(s + chunk, n))
        sep[rows - s, rows] = math.inf
        best = min(best, float(sep.min()))
    return best


def cell_injectivity(grid, layers, per_cell=16, seed=0):
    """Minimum separation between sampled images of distinct cells after each block."""
    rng = np.random.default_rng(seed)
    X, owner = cell_samples(grid, per_cell, rng)
    seps = []
    for j in range(0, len(layers), 2):
        X = apply_layer(layers[j + 1], apply_layer(layers[j], X))
        lo = np.full((grid.N_h, grid.d), np.inf)
        hi = np.full((grid.N_h, grid.d), -np.inf)
        np.minimum.at(lo, owner, X)
        np.maximum.at(hi, owner, X)
        seps.append(_box_separation(lo, hi))
    return seps


# ---------------------------------------------------------------- report

def approximation_report(net, sf, target, p=2.0, n_samples=100_000, seed=0, C=1.0):
    grid = sf.grid
    err, se = lp_error(net, target, p, n_samples, seed, (grid.lo, grid.hi))
    report = {
        "h": grid.h,
        "delta": grid.delta,
        "N_h": grid.N_h,
        "N_E": grid.N_E,
        "M_h": sf.M_h,
        "depth": net.depth,
        "width": net.width,
        "lp_error": err,
        "stderr": se,
        "depth_bound": None,
    }
    t = _sampled(target)
    if t.grad is not None and err > 0:
        report["depth_bound"] = depth_bound(w1p_norm(t, p), err, grid.d, C)
    return report


def save_report(report, path):
    with open(path, "w") as fh:
        json.dump(report, fh, indent=2, sort_keys=True)
        fh.write("\n")
