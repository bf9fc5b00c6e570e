"""Regularized risk, gradients, gradient descent and certificate bounds."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.special import expit, log1p

from .errors import LossLabelMismatch, NonFiniteLoss, NotAMemorizer, ShapeMismatch
from .geometry import RELU, Activation, Layer, Network, gelu_eps, gelu_gap_constant, relu
from .memorize import verify_memorization
from .norms import triple_norm

LOSSES = ("squared_l2", "binary_logistic")
# when |norm^2 - 1| is this small the geometric sum is replaced by its limit
UNIT_NORM_TOL = 1e-12
MAX_HALVINGS = 60


@dataclass(frozen=True)
class TrainConfig:
    lam: float = 0.0
    loss_id: str = "squared_l2"
    learning_rate: float = 1e-2
    max_iters: int = 200
    activation: Activation = RELU
    restarts: int = 0
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "activation", Activation.parse(self.activation))
        if not self.lam >= 0:
            raise ValueError("lambda must be non-negative")
        if self.loss_id not in LOSSES:
            raise ValueError(f"unknown loss {self.loss_id!r}")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if self.max_iters < 1:
            raise ValueError("max_iters must be positive")
        if self.restarts < 0:
            raise ValueError("restarts must be non-negative")


@dataclass
class DeviationBound:
    radii: list = field(default_factory=list)
    nu: list = field(default_factory=list)


@dataclass
class TrainResult:
    net: Network
    history: list
    restart: int
    runs: list = field(default_factory=list)


# ---------------------------------------------------------------- risk

def _targets(net, ds, loss_id):
    Y = np.asarray(ds.labels, dtype=np.float64).reshape(ds.N, -1)
    if net.input_dim != ds.d:
        raise ShapeMismatch(f"network input dim {net.input_dim} != data dim {ds.d}")
    if Y.shape[1] != net.output_dim:
        raise ShapeMismatch(f"labels have dim {Y.shape[1]}, network outputs {net.output_dim}")
    if loss_id == "binary_logistic":
        if Y.shape[1] != 1:
            raise LossLabelMismatch("binary_logistic needs scalar outputs")
        if not np.all((Y == 0) | (Y == 1)):
            raise LossLabelMismatch("binary_logistic needs labels in {0, 1}")
    return Y


def _loss_terms(out, Y, loss_id):
    if loss_id == "squared_l2":
        return np.sum((out - Y) ** 2, axis=1)
    # log(1 + e^x) - y x, evaluated without overflow
    x = out[:, 0]
    soft = np.maximum(x, 0.0) + log1p(np.exp(-np.abs(x)))
    return soft - Y[:, 0] * x


def _loss_grad(out, Y, loss_id):
    if loss_id == "squared_l2":
        return 2.0 * (out - Y)
    return (expit(out) - Y)


def squared_norm(net):
    return triple_norm(net).l2 ** 2


def _forward_cache(net, X, act):
    Zs, Hs = [], [X]
    H = X
    for layer in net.layers:
        Z = H @ layer.weights.T + layer.bias
        H = act(Z)
        if layer.post is not None:
            H = H @ layer.post.T
        Zs.append(Z)
        Hs.append(H)
    return Zs, Hs


def risk_terms(net, ds, cfg):
    """(J, loss_term, norm2_term) with J = loss_term + norm2_term."""
    Y = _targets(net, ds, cfg.loss_id)
    _, Hs = _forward_cache(net, ds.points, cfg.activation)
    loss = float(np.mean(_loss_terms(Hs[-1], Y, cfg.loss_id)))
    reg = cfg.lam * squared_norm(net)
    return loss + reg, loss, reg


def j_lambda(net, ds, cfg):
    return risk_terms(net, ds, cfg)[0]


def grad_j_lambda(net, ds, cfg):
    """List of (dW, db) per layer; the ReLU derivative at 0 is taken as 0."""
    Y = _targets(net, ds, cfg.loss_id)
    act = cfg.activation
    Zs, Hs = _forward_cache(net, ds.points, act)
    G = _loss_grad(Hs[-1], Y, cfg.loss_id) / ds.N
    grads = [None] * net.depth
    for j in range(net.depth - 1, -1, -1):
        layer = net.layers[j]
        if layer.post is not None:
            G = G @ layer.post
        dZ = G * act.derivative(Zs[j])
        dW = dZ.T @ Hs[j] + 2.0 * cfg.lam * layer.weights
        db = dZ.sum(axis=0) + 2.0 * cfg.lam * layer.bias
        grads[j] = (dW, db)
        G = dZ @ layer.weights
    return grads


def _step(net, grads, lr):
    layers = [
        Layer(l.weights - lr * dW, l.bias - lr * db, l.post)
        for l, (dW, db) in zip(net.layers, grads)
    ]
    return Network(layers, net.input_dim)


def random_like(net, rng):
    """Same architecture with He-scaled Gaussian weights and zero biases."""
    layers = []
    for l in net.layers:
        W = rng.normal(0.0, math.sqrt(2.0 / l.d_in), l.weights.shape)
        layers.append(Layer(W, np.zeros(l.d_out), l.post))
    return Network(layers, net.input_dim)


def _descend(net, ds, cfg, log=None, restart=0):
    J, loss, reg = risk_terms(net, ds, cfg)
    if not math.isfinite(J):
        raise NonFiniteLoss(f"restart {restart}: initial J is not finite")
    history = [J]
    if log is not None:
        log.append({"restart": restart, "iter": 0, "J": J, "loss_term": loss, "norm2_term": reg})
    for it in range(1, cfg.max_iters + 1):
        grads = grad_j_lambda(net, ds, cfg)
        if not all(np.all(np.isfinite(dW)) and np.all(np.isfinite(db)) for dW, db in grads):
            raise NonFiniteLoss(f"restart {restart}: gradient is not finite at iteration {it}")
        lr = cfg.learning_rate
        accepted = None
        for _ in range(MAX_HALVINGS):
            try:
                cand = _step(net, grads, lr)
            except ValueError:
                lr /= 2
                continue
            with np.errstate(over="ignore", invalid="ignore"):
                terms = risk_terms(cand, ds, cfg)
            if math.isfinite(terms[0]) and terms[0] <= J:
                accepted = (cand, terms)
                break
            lr /= 2
        if accepted is None:
            break
        net, (J_new, loss, reg) = accepted
        history.append(J_new)
        if log is not None:
            log.append({"restart": restart, "iter": it, "J": J_new, "loss_term": loss, "norm2_term": reg})
        if J_new == J:
            break
        J = J_new
    return net, history


def train_gd(init, ds, cfg, log=None):
    """Best-of-restarts gradient descent with step-halving backtracking.

    Restart 0 starts from ``init``; restarts 1..cfg.restarts start from
    He-random parameters drawn from a generator seeded with (seed, k).
    Returns a TrainResult; a restart whose loss turns non-finite is dropped.
    """
    runs = []
    for k in range(cfg.restarts + 1):
        start = init if k == 0 else random_like(init, np.random.default_rng([cfg.seed, k]))
        try:
            net, hist = _descend(start, ds, cfg, log, k)
        except NonFiniteLoss:
            if cfg.restarts == 0:
                raise
            continue
        runs.append((hist[-1], k, net, hist))
    if not runs:
        raise NonFiniteLoss("every restart diverged")
    best = min(runs, key=lambda r: (r[0], r[1]))
    return TrainResult(best[2], best[3], best[1], [(k, h) for _, k, _, h in runs])


def write_log(entries, path):
    with open(path, "w") as fh:
        for e in entries:
            fh.write(json.dumps(e, sort_keys=True) + "\n")


# ---------------------------------------------------------------- certificates

def _require_memorizer(theta_star, ds):
    report = verify_memorization(theta_star, ds, 1e-6)
    if report["failures"]:
        raise NotAMemorizer(f"network misses {len(report['failures'])} labels "
                            f"(max error {report['max_abs_error']:.3g})")


def certificate(theta_star, ds, lam):
    """lambda * |||theta*|||_2^2, an upper bound for the optimal J_lambda."""
    if not lam >= 0:
        raise ValueError("lambda must be non-negative")
    _require_memorizer(theta_star, ds)
    return lam * squared_norm(theta_star)


def deviation_radii(net, ds):
    """R_0 = max |x_i| and R_j = |W_j|_2 R_{j-1} + |b_j|_2 (spectral norm)."""
    radii = [float(np.max(np.linalg.norm(ds.points, axis=1)))]
    for layer in net.layers:
        w = float(np.linalg.norm(layer.weights, 2)) if layer.weights.size else 0.0
        radii.append(w * radii[-1] + float(np.linalg.norm(layer.bias)))
    return radii


def _gap_profile(u):
    """|gelu_1(u) - relu(u)|, an even function of u."""
    return float(abs(gelu_eps(u, 1.0) - relu(u)))


def nu_for_gelu(eps, radii, dims):
    """Per-layer sup of |gelu_eps - relu| over the ball of radius R_j in R^{d_j}.

    The scalar gap is eps * g(u / eps) with g even, increasing up to |x0| and
    decreasing after it, so the sup over [-R, R] is eps * c0 once R >= eps|x0|
    and eps * g(R / eps) before. The vector sup is bounded by sqrt(d_j) times
    the scalar one. ``radii`` holds R_0..R_L; layer j uses R_j.
    """
    if not eps > 0:
        raise ValueError("eps must be positive")
    c0, x0 = gelu_gap_constant()
    R = list(radii)[1:]
    if len(R) != len(dims):
        raise ShapeMismatch(f"{len(R)} radii for {len(dims)} layers")
    nu = []
    for r, d in zip(R, dims):
        scalar = eps * c0 if r >= eps * abs(x0) else eps * _gap_profile(r / eps)
        nu.append(math.sqrt(d) * scalar)
    return nu


def deviation_bound(net, ds, eps):
    radii = deviation_radii(net, ds)
    return DeviationBound(radii, nu_for_gelu(eps, radii, [l.d_out for l in net.layers]))


def a_loss_squared(nu, norm2, L):
    """2 |nu|^2 (norm2^L - 1) / (norm2 - 1), or 2 |nu|^2 L when norm2 = 1."""
    if L < 1:
        raise ValueError("L must be at least 1")
    nu2 = float(np.sum(np.asarray(nu, dtype=np.float64) ** 2))
    if nu2 == 0:
        return 0.0
    if abs(norm2 - 1.0) <= UNIT_NORM_TOL:
        return 2.0 * nu2 * L
    try:
        geo = (norm2 ** L - 1.0) / (norm2 - 1.0)
    except OverflowError:
        return math.inf
    return 2.0 * nu2 * geo


def theorem6_bound(theta_star, ds, lam, eps):
    """lambda |||theta*|||^2 + A_loss(nu) for the squared loss."""
    if theta_star.has_post:
        raise ShapeMismatch("the perturbation bound is implemented for networks without post matrices")
    _require_memorizer(theta_star, ds)
    norm2 = squared_norm(theta_star)
    nu = deviation_bound(theta_star, ds, eps).nu
    return lam * norm2 + a_loss_squared(nu, norm2, theta_star.depth)


def layer_deviations(net, ds, eps):
    """Per-layer max_i |x_i^j - xhat_i^j| between relu and gelu_eps passes."""
    X = Xh = ds.points
    act = Activation("gelu", eps)
    out = []
    for layer in net.layers:
        X = relu(X @ layer.weights.T + layer.bias)
        Xh = act(Xh @ layer.weights.T + layer.bias)
        if layer.post is not None:
            X, Xh = X @ layer.post.T, Xh @ layer.post.T
        out.append(float(np.max(np.linalg.norm(X - Xh, axis=1))))
    return out


def recursion_bounds(net, nu):
    """Running bound D_j = nu_j + |||theta|||_2 D_{j-1}, D_0 = 0."""
    t = triple_norm(net).l2
    D, out = 0.0, []
    for v in nu:
        D = v + t * D
        out.append(D)
    return out


def with_activation(cfg, activation):
    return replace(cfg, activation=Activation.parse(activation))
