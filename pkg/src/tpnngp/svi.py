"""Sparse variational inference with inducing points for softmax likelihoods.

Two variational families share ``Z`` and a whitened parameterization
``f_Z = L u`` with ``L L' = K_ZZ``:

* SVGP: ``q(u) = N(mu, S)`` per class, prior ``N(0, I)``.
* SVTP: ``q(u | s) = N(mu, s S)``, ``q(s) = IG(a, b)`` with prior
  ``p(u | s) = N(0, s I)``, ``p(s) = IG(alpha, beta)``.  ``s`` is shared by
  all class heads.

With ``W = L^-1 K_ZB`` the batch marginals are ``mean = W' mu`` and
``var = diag(W' S W) + diag(K_BB) - diag(W' W)``; under SVTP the marginal
is a Student's t with ``2a`` degrees of freedom and scale ``(b/a) var``,
sampled as ``mean + sqrt(b / g) sqrt(var) z`` with ``g ~ Gamma(a, 1)``.
``g`` is drawn by inverse CDF so its gradient in ``a`` is the implicit
derivative ``-dP(a, g)/da / p(g)``.
"""

from __future__ import annotations

import csv
import enum
import math
from dataclasses import dataclass, field

import numpy as np
import torch
from scipy import integrate
from scipy.cluster.vq import kmeans2
from scipy.special import gammainc, gammaincinv, gammaln, psi

from .kernels import Activation, NetworkConfig

__all__ = [
    "SviModel",
    "SviConfig",
    "VariationalState",
    "ElboEstimate",
    "McDraws",
    "Predictive",
    "kl_gaussian_whitened",
    "kl_normal_invgamma",
    "draw_mc",
    "elbo",
    "elbo_grad",
    "predict",
    "init_state",
    "fit",
    "FitResult",
    "write_trace_csv",
    "torch_nngp",
    "torch_nngp_diag",
]

DTYPE = torch.float64
_ARG_CLAMP = 1.0 - 1e-12
_FD_SHAPE_LIMIT = 1e4


class SviModel(str, enum.Enum):
    SVGP = "svgp"
    SVTP = "svtp"


@dataclass(frozen=True)
class SviConfig:
    """Optimisation settings.

    ``scale_prior`` is ``(alpha, beta)``; ``scale_init`` seeds ``(a, b)``
    (defaults to the prior).  ``train_scale=False`` freezes ``(a, b)``.
    """

    model: SviModel = SviModel.SVGP
    n_inducing: int = 64
    batch_size: int = 128
    n_mc: int = 8
    steps: int = 1000
    learning_rate: float = 1e-2
    scale_prior: tuple = (2.0, 2.0)
    scale_init: tuple | None = None
    train_scale: bool = True
    train_inducing: bool = True
    jitter: float = 1e-6
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "model", SviModel(self.model))
        if min(self.n_inducing, self.batch_size, self.n_mc) < 1 or self.steps < 0:
            raise ValueError("n_inducing, batch_size and n_mc must be positive; steps >= 0")
        if min(self.scale_prior) <= 0 or (self.scale_init is not None and min(self.scale_init) <= 0):
            raise ValueError("scale parameters must be positive")


@dataclass(frozen=True)
class VariationalState:
    """``mu_u`` is (C, M), ``sigma_u`` is (C, M, M) lower triangular."""

    inducing_inputs: np.ndarray
    mu_u: np.ndarray
    sigma_u: np.ndarray
    model: SviModel = SviModel.SVGP
    scale_post: tuple | None = None
    scale_prior: tuple | None = None

    def __post_init__(self):
        object.__setattr__(self, "model", SviModel(self.model))
        c, m = self.mu_u.shape
        if self.sigma_u.shape != (c, m, m) or self.inducing_inputs.shape[0] != m:
            raise ValueError("inconsistent variational shapes")
        if np.any(np.triu(self.sigma_u, 1) != 0):
            raise ValueError("sigma_u must be lower triangular")
        if np.any(np.diagonal(self.sigma_u, axis1=1, axis2=2) <= 0):
            raise ValueError("sigma_u must have a positive diagonal")
        if self.model is SviModel.SVTP:
            if self.scale_post is None or self.scale_prior is None:
                raise ValueError("SVTP state needs scale_post and scale_prior")
            if min(self.scale_post) <= 0 or min(self.scale_prior) <= 0:
                raise ValueError("scale parameters must be positive")

    @property
    def n_classes(self) -> int:
        return self.mu_u.shape[0]

    @property
    def n_inducing(self) -> int:
        return self.mu_u.shape[1]


@dataclass(frozen=True)
class ElboEstimate:
    likelihood_term: float
    kl_term: float
    total: float
    n_mc: int


# kernel port ---------------------------------------------------------------


def _dual(act, q1, q2, c):
    if act is Activation.ERF:
        denom = torch.sqrt((1.0 + 2.0 * q1) * (1.0 + 2.0 * q2))
        return (2.0 / math.pi) * torch.asin(torch.clamp(2.0 * c / denom, -_ARG_CLAMP, _ARG_CLAMP))
    norm = torch.sqrt(q1 * q2)
    cos = torch.clamp(c / norm, -_ARG_CLAMP, _ARG_CLAMP)
    theta = torch.acos(cos)
    return norm / (2.0 * math.pi) * (torch.sin(theta) + (math.pi - theta) * cos)


def _base_diag(x, cfg):
    return cfg.weight_variance * (x * x).sum(-1) / cfg.input_dim + cfg.bias_variance


def torch_nngp(x1, x2, cfg: NetworkConfig):
    """Differentiable NNGP cross block; agrees with :func:`kernels.nngp_matrix`."""
    sw, sb = cfg.weight_variance, cfg.bias_variance
    q1, q2 = _base_diag(x1, cfg), _base_diag(x2, cfg)
    c = sw * (x1 @ x2.T) / cfg.input_dim + sb
    for _ in range(1, cfg.depth):
        c = sw * _dual(cfg.activation, q1[:, None], q2[None, :], c) + sb
        q1 = sw * _dual(cfg.activation, q1, q1, q1) + sb
        q2 = sw * _dual(cfg.activation, q2, q2, q2) + sb
    return _dual(cfg.activation, q1[:, None], q2[None, :], c)


def torch_nngp_diag(x, cfg: NetworkConfig):
    sw, sb = cfg.weight_variance, cfg.bias_variance
    q = _base_diag(x, cfg)
    for _ in range(1, cfg.depth):
        q = sw * _dual(cfg.activation, q, q, q) + sb
    return _dual(cfg.activation, q, q, q)


# KL terms --------------------------------------------------------------------


def _t(x):
    return x if torch.is_tensor(x) else torch.as_tensor(np.asarray(x, dtype=float), dtype=DTYPE)


def _gauss_parts(mu, sigma):
    """Per-head ``(|mu|^2, tr S, log|S|)`` for (C, M) / (C, M, M) inputs."""
    mu, sigma = _t(mu), _t(sigma)
    if mu.dim() == 1:
        mu, sigma = mu[None], sigma[None]
    diag = torch.diagonal(sigma, dim1=-2, dim2=-1)
    return (mu**2).sum(-1), (sigma**2).sum((-2, -1)), 2.0 * torch.log(diag).sum(-1)


def _kl_gauss_t(mu, sigma):
    sq, tr, logdet = _gauss_parts(mu, sigma)
    m = sq.new_tensor(_t(mu).shape[-1])
    return 0.5 * (sq + tr - m - logdet).sum()


def _kl_invgamma_t(a, b, alpha, beta):
    return (
        (a - alpha) * torch.digamma(a)
        - torch.lgamma(a)
        + math.lgamma(alpha)
        + alpha * (torch.log(b) - math.log(beta))
        + (beta - b) * a / b
    )


def _kl_nig_t(mu, sigma, a, b, alpha, beta):
    sq, tr, logdet = _gauss_parts(mu, sigma)
    m = _t(mu).shape[-1]
    gauss = 0.5 * ((a / b) * sq + tr - m - logdet).sum()
    return gauss + _kl_invgamma_t(a, b, alpha, beta)


def kl_gaussian_whitened(mu_u, sigma_u) -> float:
    """``KL(N(mu, S S') || N(0, I))``; (C, M) inputs sum over heads."""
    return float(_kl_gauss_t(mu_u, sigma_u))


def kl_normal_invgamma(mu_u, sigma_u, a, b, alpha, beta) -> float:
    """``KL(q(u|s) q(s) || p(u|s) p(s))`` for the normal--inverse-gamma pair.

    ``q(u | s) = N(mu, s S S')``, ``q(s) = IG(a, b)``, ``p(u | s) = N(0, s I)``,
    ``p(s) = IG(alpha, beta)``.  Heads in (C, M) inputs share ``s``.
    """
    if min(a, b, alpha, beta) <= 0:
        raise ValueError("scale parameters must be positive")
    return float(_kl_nig_t(mu_u, sigma_u, _t(a), _t(b), alpha, beta))


# reparameterized gamma ---------------------------------------------------------


def _dP_da(a, x):
    """``d/da`` of the regularized lower incomplete gamma ``P(a, x)``."""
    if x <= 0:
        return 0.0
    # x^a / Gamma(a) * int_0^1 log(v) v^(a-1) exp(-x v) dv, in log scale
    lead = math.exp(a * math.log(x) - gammaln(a))
    tail, _ = integrate.quad(lambda v: math.exp(-x * v), 0.0, 1.0, weight="alg-loga", wvar=(a - 1.0, 0.0))
    return gammainc(a, x) * (math.log(x) - psi(a)) + lead * tail


def _dg_da(a, g):
    if a > _FD_SHAPE_LIMIT:
        return None
    dens = math.exp((a - 1.0) * math.log(g) - g - gammaln(a))
    return -_dP_da(a, g) / dens


class _InvGammaCdf(torch.autograd.Function):
    """``g = P^-1(a, u)`` with the implicit-function gradient in ``a``."""

    @staticmethod
    def forward(ctx, a, u):
        av, uv = float(a), u.detach().cpu().numpy()
        g = gammaincinv(av, uv)
        ctx.save_for_backward(a, u)
        ctx.g = g
        return torch.as_tensor(g, dtype=DTYPE)

    @staticmethod
    def backward(ctx, grad):
        a, u = ctx.saved_tensors
        av = float(a)
        out = []
        for gi, ui in zip(np.atleast_1d(ctx.g), np.atleast_1d(u.detach().cpu().numpy())):
            d = _dg_da(av, gi)
            if d is None:
                h = 1e-6 * av
                d = (gammaincinv(av + h, ui) - gammaincinv(av - h, ui)) / (2 * h)
            out.append(d)
        dg = torch.as_tensor(np.asarray(out).reshape(ctx.g.shape), dtype=DTYPE)
        return (grad * dg).sum(), None


def _gamma_icdf(a, u):
    return _InvGammaCdf.apply(a, u)


# ELBO ------------------------------------------------------------------------


@dataclass(frozen=True)
class McDraws:
    """Standard normals ``(T, B, C)`` and uniforms ``(T,)`` for the scale."""

    eps: np.ndarray
    u: np.ndarray

    @property
    def n_mc(self) -> int:
        return self.eps.shape[0]


def draw_mc(n_mc, n_batch, n_classes, rng) -> McDraws:
    return McDraws(rng.standard_normal((n_mc, n_batch, n_classes)), rng.uniform(size=n_mc))


def _chol_zz(z, cfg, jitter):
    kzz = torch_nngp(z, z, cfg)
    kzz = 0.5 * (kzz + kzz.T)
    m = kzz.shape[0]
    ref = torch.diagonal(kzz).mean().detach()
    eye = torch.eye(m, dtype=DTYPE)
    jit = jitter * ref
    for _ in range(4):
        lower, info = torch.linalg.cholesky_ex(kzz + jit * eye)
        if int(info) == 0:
            return lower
        jit = jit * 10
    raise np.linalg.LinAlgError("K_ZZ is not positive definite after jitter")


def _marginals(z, mu, sigma, x, cfg, jitter):
    """Batch mean (B, C) and variance (B, C) of ``q(f)`` before the scale."""
    lower = _chol_zz(z, cfg, jitter)
    kzx = torch_nngp(z, x, cfg)
    w = torch.linalg.solve_triangular(lower, kzx, upper=False)  # (M, B)
    mean = (mu @ w).T
    sw = torch.einsum("cmk,mb->cbk", sigma, w)  # sigma' w per head: (C, B, M)
    var = (sw**2).sum(-1) + torch_nngp_diag(x, cfg)[None] - (w**2).sum(0)[None]
    return mean, torch.clamp(var.T, min=1e-12), w


def _elbo_terms(z, mu, sigma, a, b, x, y, total_n, draws, model, cfg, prior, jitter):
    mean, var, _ = _marginals(z, mu, sigma, x, cfg, jitter)
    eps = torch.as_tensor(draws.eps, dtype=DTYPE)
    if model is SviModel.SVTP:
        g = _gamma_icdf(a, torch.as_tensor(draws.u, dtype=DTYPE))
        scale = torch.sqrt(b / g)[:, None, None]
        kl = _kl_nig_t(mu, sigma, a, b, *prior)
    else:
        scale = 1.0
        kl = _kl_gauss_t(mu, sigma)
    f = mean[None] + scale * torch.sqrt(var)[None] * eps
    logp = torch.log_softmax(f, dim=-1)
    idx = torch.as_tensor(y, dtype=torch.long)
    ll = logp[:, torch.arange(len(idx)), idx].sum(-1).mean()
    return ll * (total_n / len(idx)), kl


def _state_tensors(state, grad=False):
    z = _t(state.inducing_inputs).clone().requires_grad_(grad)
    mu = _t(state.mu_u).clone().requires_grad_(grad)
    sigma = _t(state.sigma_u).clone().requires_grad_(grad)
    if state.model is SviModel.SVTP:
        a = _t(float(state.scale_post[0])).clone().requires_grad_(grad)
        b = _t(float(state.scale_post[1])).clone().requires_grad_(grad)
        prior = tuple(float(p) for p in state.scale_prior)
    else:
        a = b = prior = None
    return z, mu, sigma, a, b, prior


def _check_batch(x, y, cfg):
    x = np.asarray(x, dtype=float)
    if x.ndim == 1:
        x = x.reshape(-1, cfg.input_dim)
    y = np.asarray(y, dtype=int)
    if x.ndim != 2 or x.shape[1] != cfg.input_dim:
        raise ValueError(f"inputs must have {cfg.input_dim} columns")
    if x.shape[0] < 1 or x.shape[0] != y.shape[0]:
        raise ValueError("batch must be non-empty with one label per row")
    return torch.as_tensor(x, dtype=DTYPE), y


def elbo(state, x_b, y_b, total_n, n_mc=8, rng=None, cfg=NetworkConfig(), draws=None, jitter=1e-6) -> ElboEstimate:
    """Minibatch ELBO estimate ``(N/B)(1/T) sum log p(y|f) - KL``.

    Pass ``draws`` to reuse random numbers across calls.
    """
    xt, y = _check_batch(x_b, y_b, cfg)
    if draws is None:
        rng = np.random.default_rng() if rng is None else rng
        draws = draw_mc(n_mc, len(y), state.n_classes, rng)
    z, mu, sigma, a, b, prior = _state_tensors(state)
    with torch.no_grad():
        ll, kl = _elbo_terms(z, mu, sigma, a, b, xt, y, total_n, draws, state.model, cfg, prior, jitter)
    ll, kl = float(ll), float(kl)
    return ElboEstimate(ll, kl, ll - kl, draws.n_mc)


def elbo_grad(state, x_b, y_b, total_n, draws: McDraws, cfg=NetworkConfig(), jitter=1e-6):
    """ELBO and its gradients for fixed random numbers.

    Returns ``(ElboEstimate, grads)`` where ``grads`` has keys ``Z``, ``mu_u``,
    ``sigma_u`` (lower triangle only) and, for SVTP, ``a`` and ``b``.
    """
    xt, y = _check_batch(x_b, y_b, cfg)
    z, mu, sigma, a, b, prior = _state_tensors(state, grad=True)
    sig = torch.tril(sigma)
    ll, kl = _elbo_terms(z, mu, sig, a, b, xt, y, total_n, draws, state.model, cfg, prior, jitter)
    total = ll - kl
    total.backward()
    grads = {"Z": z.grad.numpy(), "mu_u": mu.grad.numpy(), "sigma_u": np.tril(sigma.grad.numpy())}
    if state.model is SviModel.SVTP:
        grads["a"] = float(a.grad)
        grads["b"] = float(b.grad)
    return ElboEstimate(float(ll.detach()), float(kl.detach()), float(total.detach()), draws.n_mc), grads


# prediction --------------------------------------------------------------------


@dataclass(frozen=True)
class Predictive:
    """Per-class marginals at the query inputs.

    ``mean`` and ``variance`` are (L, C).  For SVTP the marginal of class
    ``c`` at point ``i`` is a Student's t with ``dof`` degrees of freedom and
    squared scale ``variance[i, c]`` (already multiplied by ``b/a``).
    ``cov`` is the (C, L, L) covariance (or scale) when requested.
    """

    mean: np.ndarray
    variance: np.ndarray
    probs: np.ndarray
    dof: float | None = None
    cov: np.ndarray | None = None


def predict(state, x, cfg=NetworkConfig(), n_mc=256, rng=None, full_cov=False, jitter=1e-6) -> Predictive:
    x = np.asarray(x, dtype=float)
    if x.ndim == 1:
        x = x.reshape(-1, cfg.input_dim)
    rng = np.random.default_rng(0) if rng is None else rng
    z, mu, sigma, a, b, _ = _state_tensors(state)
    xt = torch.as_tensor(x, dtype=DTYPE)
    with torch.no_grad():
        mean, var, w = _marginals(z, mu, sigma, xt, cfg, jitter)
        cov = None
        if full_cov:
            sw = torch.einsum("cmk,mb->cbk", sigma, w)
            cov = sw @ sw.transpose(1, 2) + (torch_nngp(xt, xt, cfg) - w.T @ w)[None]
    mean, var = mean.numpy(), var.numpy()
    n, c = mean.shape
    if state.model is SviModel.SVTP:
        a, b = (float(v) for v in state.scale_post)
        ratio = b / a
        dof = 2.0 * a
        s = b / rng.gamma(a, 1.0, size=(n_mc, 1, 1))
        var, cov = ratio * var, None if cov is None else ratio * cov.numpy()
        draws = mean + np.sqrt(s * var / ratio) * rng.standard_normal((n_mc, n, c))
    else:
        dof = None
        cov = None if cov is None else cov.numpy()
        draws = mean + np.sqrt(var) * rng.standard_normal((n_mc, n, c))
    logp = draws - np.logaddexp.reduce(draws, axis=-1, keepdims=True)
    probs = np.exp(logp).mean(axis=0)
    probs /= probs.sum(axis=-1, keepdims=True)
    return Predictive(mean, var, probs, dof, cov)


# fitting -----------------------------------------------------------------------


def init_state(x, n_classes, config: SviConfig, cfg=NetworkConfig(), rng=None) -> VariationalState:
    """k-means inducing inputs on a training subsample, ``q(u)`` equal to the prior."""
    x = np.asarray(x, dtype=float)
    if x.ndim == 1:
        x = x.reshape(-1, cfg.input_dim)
    rng = np.random.default_rng(config.seed) if rng is None else rng
    m = config.n_inducing
    sub = x[rng.choice(len(x), size=min(len(x), max(2000, m)), replace=False)]
    if m >= len(sub):
        z = sub[rng.choice(len(sub), size=m, replace=m > len(sub))]
    else:
        z, _ = kmeans2(sub, m, minit="++", seed=rng)
    mu = np.zeros((n_classes, m))
    sigma = np.broadcast_to(np.eye(m), (n_classes, m, m)).copy()
    if config.model is SviModel.SVTP:
        post = config.scale_init if config.scale_init is not None else config.scale_prior
        return VariationalState(z, mu, sigma, config.model, tuple(map(float, post)), tuple(map(float, config.scale_prior)))
    return VariationalState(z, mu, sigma, config.model)


@dataclass(frozen=True)
class FitResult:
    state: VariationalState
    trace: list = field(default_factory=list)  # (step, elbo, kl, likelihood)


class _Raw(torch.nn.Module):
    """Unconstrained parameters: log-diagonal and strict lower triangle of S."""

    def __init__(self, state: VariationalState, config: SviConfig):
        super().__init__()
        self.z = torch.nn.Parameter(_t(state.inducing_inputs).clone(), requires_grad=config.train_inducing)
        self.mu = torch.nn.Parameter(_t(state.mu_u).clone())
        s = _t(state.sigma_u)
        self.lower = torch.nn.Parameter(torch.tril(s, -1).clone())
        self.log_diag = torch.nn.Parameter(torch.log(torch.diagonal(s, dim1=1, dim2=2)).clone())
        self.svtp = state.model is SviModel.SVTP
        if self.svtp:
            a, b = state.scale_post
            self.log_a = torch.nn.Parameter(_t(math.log(a)), requires_grad=config.train_scale)
            self.log_b = torch.nn.Parameter(_t(math.log(b)), requires_grad=config.train_scale)
        self.prior = state.scale_prior
        self.model = state.model

    def sigma(self):
        return torch.tril(self.lower, -1) + torch.diag_embed(torch.exp(self.log_diag))

    def scale(self):
        if not self.svtp:
            return None, None
        return torch.exp(self.log_a), torch.exp(self.log_b)

    def export(self) -> VariationalState:
        with torch.no_grad():
            sigma = self.sigma().numpy().copy()
            post = None
            if self.svtp:
                a, b = self.scale()
                post = (float(a), float(b))
            return VariationalState(
                self.z.detach().numpy().copy(), self.mu.detach().numpy().copy(), sigma, self.model, post, self.prior
            )


def fit(x, y, config: SviConfig, cfg=NetworkConfig(), n_classes=None, state=None) -> FitResult:
    """Adam ascent on the minibatch ELBO.

    Independent streams drive batch selection, Gaussian draws and scale
    draws, so SVGP and SVTP runs with the same seed see the same batches.
    """
    x = np.asarray(x, dtype=float)
    if x.ndim == 1:
        x = x.reshape(-1, cfg.input_dim)
    y = np.asarray(y, dtype=int)
    n_classes = int(y.max()) + 1 if n_classes is None else n_classes
    root = np.random.SeedSequence(config.seed)
    init_ss, batch_ss, eps_ss, u_ss = root.spawn(4)
    if state is None:
        state = init_state(x, n_classes, config, cfg, np.random.default_rng(init_ss))
    if config.steps == 0:
        return FitResult(state, [])
    batch_rng, eps_rng, u_rng = (np.random.default_rng(s) for s in (batch_ss, eps_ss, u_ss))
    raw = _Raw(state, config)
    opt = torch.optim.Adam([p for p in raw.parameters() if p.requires_grad], lr=config.learning_rate)
    n = len(y)
    bsize = min(config.batch_size, n)
    trace = []
    for step in range(config.steps):
        idx = batch_rng.choice(n, size=bsize, replace=False)
        draws = McDraws(eps_rng.standard_normal((config.n_mc, bsize, n_classes)), u_rng.uniform(size=config.n_mc))
        a, b = raw.scale()
        ll, kl = _elbo_terms(
            raw.z, raw.mu, raw.sigma(), a, b, torch.as_tensor(x[idx], dtype=DTYPE), y[idx], n, draws,
            raw.model, cfg, raw.prior, config.jitter,
        )
        for name, term in (("likelihood", ll), ("kl", kl)):
            if not torch.isfinite(term):
                raise ArithmeticError(f"non-finite ELBO {name} term at step {step}")
        total = ll - kl
        opt.zero_grad()
        (-total).backward()
        opt.step()
        trace.append((step, float(total.detach()), float(kl.detach()), float(ll.detach())))
    return FitResult(raw.export(), trace)


def write_trace_csv(path, trace):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "elbo", "kl", "likelihood"])
        for row in trace:
            w.writerow([row[0]] + [repr(float(v)) for v in row[1:]])
