"""Finite-width MLPs with a scale-mixed readout.

Two parameterizations share one forward pass

    h^l = s_w^l W^l a^{l-1} + s_b b^l,   a^l = phi(h^l),   f = v . a^L / sqrt(n)

* ``STANDARD``: ``W^l ~ N(0, sigma_w^2 / fan_in)``, ``b^l ~ N(0, sigma_b^2)``,
  ``s_w = s_b = 1``.
* ``NTK``: ``W^l, b^l ~ N(0, 1)`` with ``s_w = sigma_w / sqrt(fan_in)`` and
  ``s_b = sigma_b``; the readout is trained as ``v_tilde = v / sigma_v`` so the
  tangent kernel is ``sigma_v^2`` times the unit-readout NTK.

In both cases ``v | sigma_v^2 ~ N(0, sigma_v^2)`` with ``sigma_v^2`` drawn from a
scale prior.  erf is ``scipy.special.erf``, the same function the kernel
closed forms integrate against.
"""

from __future__ import annotations

import csv
import enum
from dataclasses import dataclass, field, replace

import numpy as np
from scipy import linalg
from scipy.special import erf, log_softmax

from .distributions import ScalePrior
from .kernels import Activation, NetworkConfig
from .posterior import RegressionTask

__all__ = [
    "Parameterization",
    "FiniteNet",
    "DivergenceError",
    "SingularFeaturesError",
    "net_rng",
    "sample_net",
    "forward",
    "readout_features",
    "streamed_features",
    "train_readout_closed_form",
    "train_readout_softmax",
    "GdResult",
    "train_full_gd",
    "empirical_ntk",
    "ensemble_predict",
    "write_samples_csv",
]

_SQRT_PI = np.sqrt(np.pi)
DIVERGENCE_LOSS = 1e6


class Parameterization(str, enum.Enum):
    STANDARD = "standard"
    NTK = "ntk"


class DivergenceError(ArithmeticError):
    pass


class SingularFeaturesError(np.linalg.LinAlgError):
    pass


@dataclass(frozen=True)
class FiniteNet:
    """Parameters of one network; ``v`` is ``(n,)`` or ``(n, C)``."""

    cfg: NetworkConfig
    weights: tuple
    biases: tuple
    v: np.ndarray
    sigma_v2: float
    parameterization: Parameterization = Parameterization.STANDARD
    widths: tuple = field(init=False)

    def __post_init__(self):
        if not self.sigma_v2 > 0:
            raise ValueError("sigma_v2 must be positive")
        if len(self.weights) != self.cfg.depth or len(self.biases) != self.cfg.depth:
            raise ValueError("need one weight matrix and bias per hidden layer")
        fan_in = self.cfg.input_dim
        widths = []
        for w, b in zip(self.weights, self.biases):
            if w.ndim != 2 or w.shape[1] != fan_in or b.shape != (w.shape[0],):
                raise ValueError("layer shapes do not chain")
            fan_in = w.shape[0]
            widths.append(fan_in)
        if self.v.shape[0] != fan_in:
            raise ValueError("readout size does not match last width")
        object.__setattr__(self, "parameterization", Parameterization(self.parameterization))
        object.__setattr__(self, "widths", tuple(widths))

    @property
    def width(self) -> int:
        return self.widths[-1]

    def layer_scales(self):
        """``(s_w^l, s_b)`` applied at forward time."""
        if self.parameterization is Parameterization.STANDARD:
            return [1.0] * self.cfg.depth, 1.0
        fan = (self.cfg.input_dim,) + self.widths[:-1]
        sw = np.sqrt(self.cfg.weight_variance)
        return [sw / np.sqrt(f) for f in fan], np.sqrt(self.cfg.bias_variance)

    def readout_scale(self) -> float:
        """Factor between the trained readout parameter and ``v``."""
        return np.sqrt(self.sigma_v2) if self.parameterization is Parameterization.NTK else 1.0


def net_rng(seed: int, index: int, stream: int) -> np.random.Generator:
    """Counter-based generator for one (seed, net, layer) stream."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, index, stream])))


def sample_net(
    cfg: NetworkConfig,
    width: int,
    prior: ScalePrior,
    param=Parameterization.STANDARD,
    rng=None,
    *,
    seed: int = 0,
    index: int = 0,
    n_outputs: int | None = None,
) -> FiniteNet:
    """Draw a network.

    With ``rng=None`` each layer uses its own stream keyed by
    ``(seed, index, layer)``, so net ``index`` of an ensemble is reproducible
    on its own.
    """
    if width < 1:
        raise ValueError("width must be positive")
    param = Parameterization(param)
    gen = (lambda s: rng) if rng is not None else (lambda s: net_rng(seed, index, s))
    std = param is Parameterization.STANDARD
    fan_in = cfg.input_dim
    weights, biases = [], []
    for layer in range(cfg.depth):
        g = gen(layer)
        w = g.standard_normal((width, fan_in))
        b = g.standard_normal(width)
        if std:
            w *= np.sqrt(cfg.weight_variance / fan_in)
            b *= np.sqrt(cfg.bias_variance)
        weights.append(w)
        biases.append(b)
        fan_in = width
    sigma_v2 = float(np.asarray(prior.sample(1, gen(cfg.depth + 1))).ravel()[0])
    shape = (width,) if n_outputs is None else (width, n_outputs)
    v = np.sqrt(sigma_v2) * gen(cfg.depth).standard_normal(shape)
    return FiniteNet(cfg, tuple(weights), tuple(biases), v, sigma_v2, param)


def _phi(act, h):
    if act is Activation.ERF:
        return erf(h)
    return np.maximum(h, 0.0)


def _dphi(act, h):
    if act is Activation.ERF:
        return (2.0 / _SQRT_PI) * np.exp(-(h**2))
    return (h > 0).astype(float)


def _as_batch(net, x):
    x = np.asarray(x, dtype=float)
    if x.ndim == 1:
        x = x.reshape(-1, net.cfg.input_dim)
    return x


def _hidden(net, x):
    """Pre-activations and layer inputs for every hidden layer."""
    sw, sb = net.layer_scales()
    a, hs, inputs = x, [], []
    for w, b, s in zip(net.weights, net.biases, sw):
        inputs.append(a)
        h = s * (a @ w.T) + sb * b
        hs.append(h)
        a = _phi(net.cfg.activation, h)
    return hs, inputs, a


def forward(net: FiniteNet, x):
    """Outputs ``f(x)`` and the penultimate features ``phi(h^L(x))``."""
    x = _as_batch(net, x)
    _, _, feats = _hidden(net, x)
    return feats @ net.v / np.sqrt(net.width), feats


def readout_features(net: FiniteNet, x):
    """``Phi_bar = phi(h^L) / sqrt(n)`` so that ``f = Phi_bar v``."""
    return forward(net, x)[1] / np.sqrt(net.width)


def streamed_features(cfg: NetworkConfig, width: int, x, *, seed=0, index=0, chunk_rows=1024):
    """Penultimate features of the standard-parameterized net ``(seed, index)``
    without holding any weight matrix in memory.

    Rows of each ``W^l`` are drawn in chunks from the same stream that
    :func:`sample_net` uses, so the result matches ``forward(net, x)[1]`` up
    to summation order.  Memory is ``O(chunk_rows * width)``.
    """
    a = np.asarray(x, dtype=float)
    if a.ndim == 1:
        a = a.reshape(-1, cfg.input_dim)
    for layer in range(cfg.depth):
        g = net_rng(seed, index, layer)
        fan_in = a.shape[1]
        scale = np.sqrt(cfg.weight_variance / fan_in)
        h = np.empty((a.shape[0], width))
        for s in range(0, width, chunk_rows):
            rows = g.standard_normal((min(chunk_rows, width - s), fan_in))
            h[:, s : s + rows.shape[0]] = scale * (a @ rows.T)
        h += np.sqrt(cfg.bias_variance) * g.standard_normal(width)
        a = _phi(cfg.activation, h)
    return a


@dataclass(frozen=True)
class ReadoutFit:
    net: FiniteNet
    f_tr: np.ndarray
    f_te: np.ndarray


def train_readout_closed_form(net: FiniteNet, task: RegressionTask, t=np.inf) -> ReadoutFit:
    """Exact gradient-flow solution for the readout on ``(1/K) sum (f - y)^2``.

    ``p(t) = p0 + G' (G G')^-1 (exp(-(2/K) t G G') - I) (G p0 - Y)`` with
    ``G`` the Jacobian of the outputs in the trained readout parameter ``p``.
    ``t = inf`` gives the interpolating limit.
    """
    if t < 0:
        raise ValueError("t must be non-negative")
    k = task.n_train
    scale = net.readout_scale()
    g_tr = readout_features(net, task.x_tr) * scale
    g_te = readout_features(net, task.x_te) * scale
    p0 = net.v / scale
    lam, u = np.linalg.eigh(g_tr @ g_tr.T)
    if lam[0] <= 1e-12 * lam[-1]:
        raise SingularFeaturesError(
            f"empirical feature gram is singular (cond > 1e12) for width {net.width}; use a larger width"
        )
    if np.isinf(t):
        coef = -1.0 / lam
    else:
        coef = np.expm1(-(2.0 / k) * t * lam) / lam
    resid = g_tr @ p0 - task.y_tr
    c = coef[:, None] if resid.ndim == 2 else coef
    p = p0 + g_tr.T @ (u @ (c * (u.T @ resid)))
    new = replace(net, v=p * scale)
    return ReadoutFit(new, g_tr @ p, g_te @ p)


def train_readout_softmax(net, x, labels, steps=500, lr=1.0, weight_decay=0.0):
    """Readout-only gradient descent on mean softmax cross-entropy.

    ``net.v`` must be ``(n, C)``; ``labels`` are integer classes.  The
    objective is convex in the readout, so plain GD suffices.
    """
    labels = np.asarray(labels, dtype=int)
    feats = readout_features(net, x)
    v = net.v.copy()
    onehot = np.eye(v.shape[1])[labels]
    for _ in range(steps):
        p = np.exp(log_softmax(feats @ v, axis=1))
        grad = feats.T @ (p - onehot) / len(labels) + weight_decay * v
        v -= lr * grad
    return replace(net, v=v)


def _backward(net, x):
    """Per-example gradients of the (scalar) output in each parameter block.

    Returns ``(f, feats, deltas, inputs)``; ``deltas[l]`` is ``df/dh^l``.
    """
    hs, inputs, feats = _hidden(net, x)
    sw, _ = net.layer_scales()
    act = net.cfg.activation
    n = net.width
    delta = (net.v / np.sqrt(n))[None, :] * _dphi(act, hs[-1])
    deltas = [delta]
    for layer in range(net.cfg.depth - 1, 0, -1):
        delta = sw[layer] * (delta @ net.weights[layer]) * _dphi(act, hs[layer - 1])
        deltas.append(delta)
    deltas.reverse()
    return feats @ net.v / np.sqrt(n), feats, deltas, inputs


def empirical_ntk(net: FiniteNet, x1, x2=None):
    """``<grad f(x1), grad f(x2)>`` over all trainable parameters (scalar readout)."""
    if net.v.ndim != 1:
        raise ValueError("empirical_ntk needs a scalar readout")
    x1 = _as_batch(net, x1)
    same = x2 is None
    x2 = x1 if same else _as_batch(net, x2)
    _, f1, d1, a1 = _backward(net, x1)
    _, f2, d2, a2 = (None, f1, d1, a1) if same else _backward(net, x2)
    sw, sb = net.layer_scales()
    r = net.readout_scale()
    out = r**2 * (f1 @ f2.T) / net.width
    for l in range(net.cfg.depth):
        dd = d1[l] @ d2[l].T
        out += sw[l] ** 2 * dd * (a1[l] @ a2[l].T) + sb**2 * dd
    return 0.5 * (out + out.T) if same else out


@dataclass(frozen=True)
class GdResult:
    net: FiniteNet
    losses: np.ndarray
    n_steps: int
    converged: bool
    step_size: float


def train_full_gd(net: FiniteNet, task: RegressionTask, steps=100_000, step_size=None, c=0.5, tol=1e-8):
    """Explicit Euler on the all-layer gradient flow of ``(1/K) sum (f - y)^2``.

    ``step_size=None`` picks ``c * K / lambda_max`` of the initial empirical NTK
    on the training inputs; ``c < 1`` is the linear stability region.  Stops
    once the training MSE falls below ``tol`` or after ``steps`` updates.
    """
    if net.parameterization is not Parameterization.NTK:
        raise ValueError("full gradient descent requires the NTK parameterization")
    if net.v.ndim != 1:
        raise ValueError("full gradient descent needs a scalar readout")
    x, y = task.x_tr, task.y_tr
    k = task.n_train
    if step_size is None:
        lam = linalg.eigvalsh(empirical_ntk(net, x))[-1]
        step_size = c * k / lam
    weights = [w.copy() for w in net.weights]
    biases = [b.copy() for b in net.biases]
    r = net.readout_scale()
    vt = net.v / r
    cur = replace(net, weights=tuple(weights), biases=tuple(biases), v=vt * r)
    sw, sb = cur.layer_scales()
    losses = []
    converged = False
    i = 0
    while True:
        f, feats, deltas, inputs = _backward(cur, x)
        res = f - y
        loss = float(np.mean(res**2))
        losses.append(loss)
        if not np.isfinite(loss) or loss > DIVERGENCE_LOSS:
            raise DivergenceError(
                f"loss {loss:.3g} at step {i} with step size {step_size:.3g}; try a smaller c"
            )
        if loss < tol:
            converged = True
            break
        if i >= steps or step_size == 0:
            break
        g = (2.0 / k) * res
        vt = vt - step_size * r * (feats.T @ g) / np.sqrt(cur.width)
        for l in range(cur.cfg.depth):
            gd = g[:, None] * deltas[l]
            weights[l] = weights[l] - step_size * sw[l] * (gd.T @ inputs[l])
            biases[l] = biases[l] - step_size * sb * gd.sum(axis=0)
        cur = FiniteNet(cur.cfg, tuple(weights), tuple(biases), vt * r, cur.sigma_v2, cur.parameterization)
        i += 1
    return GdResult(cur, np.asarray(losses), i, converged, float(step_size))


@dataclass(frozen=True)
class EnsemblePrediction:
    outputs: np.ndarray
    mean: np.ndarray
    variance: np.ndarray
    probs: np.ndarray | None = None


def ensemble_predict(nets, x, classification=False) -> EnsemblePrediction:
    """Member outputs ``(M, L[, C])``, their mean and population variance.

    With ``classification`` the member softmax probabilities are averaged.
    """
    if not nets:
        raise ValueError("empty ensemble")
    outs = np.stack([forward(n, x)[0] for n in nets])
    probs = None
    if classification:
        probs = np.mean(np.exp(log_softmax(outs, axis=-1)), axis=0)
    return EnsemblePrediction(outs, outs.mean(axis=0), outs.var(axis=0), probs)


def write_samples_csv(path, outputs):
    """Rows ``(net, test_index, output)`` for an (M, L) output array."""
    outputs = np.atleast_2d(np.asarray(outputs, dtype=float))
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["net", "test_index", "output"])
        for i, row in enumerate(outputs):
            for j, val in enumerate(row):
                w.writerow([i, j, repr(float(val))])
