"""Self-normalized importance sampling over the readout variance.

The proposal is the prior ``beta ~ H``.  Given ``beta`` the training targets are
``N(0, beta * A)`` with ``A = K_trtr + eps I``, so after one Cholesky of ``A``
each log-weight is three scalar terms:

    log w(beta) = -(K/2) log 2 pi - (1/2) log|A| - (K/2) log beta - Y' A^-1 Y / (2 beta)

and predictive draws reuse one factor of the Schur complement.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
from scipy import linalg
from scipy.special import logsumexp

from .distributions import ScalePrior, prior_sample, robust_cholesky
from .kernels import GramPair
from .posterior import NoiseScaling, RegressionTask

__all__ = [
    "SharedTerms",
    "WeightedEnsemble",
    "LowEssWarning",
    "precompute",
    "log_weight",
    "predict",
    "expectation",
    "moments",
    "log_predictive",
]

LOG_2PI = np.log(2.0 * np.pi)
ESS_WARN_FRACTION = 0.01


class LowEssWarning(RuntimeWarning):
    pass


@dataclass(frozen=True)
class SharedTerms:
    """Quantities computed once per task.

    For a (K, C) target matrix the outputs share ``beta``, so the scalars
    accumulate over columns and ``n_obs = K * C``.
    """

    log_det_half: float
    quad_form: float
    const_term: float
    chol_tr: np.ndarray
    mean_te: np.ndarray
    schur_te: np.ndarray
    n_obs: int
    schur_chol: np.ndarray | None = None


@dataclass(frozen=True)
class WeightedEnsemble:
    """Draws ``y_i`` at the test inputs with log importance weights."""

    betas: np.ndarray
    log_weights: np.ndarray
    samples: np.ndarray
    ess: float
    cond_means: np.ndarray | None = None
    cond_covs: np.ndarray | None = None
    shared_mean: np.ndarray | None = None
    shared_cov: np.ndarray | None = None

    @property
    def weights(self):
        """Normalized weights."""
        return np.exp(self.log_weights - logsumexp(self.log_weights))

    @property
    def n(self) -> int:
        return self.betas.size


def precompute(task: RegressionTask, gram: GramPair) -> SharedTerms:
    eps = task.noise(gram)
    a = gram.k_trtr + eps * np.eye(gram.n_train)
    chol = robust_cholesky(a)
    y = task.y_tr
    w = linalg.solve_triangular(chol, y, lower=True)
    n_out = 1 if y.ndim == 1 else y.shape[1]
    alpha = linalg.solve_triangular(chol.T, w, lower=False)
    v = linalg.solve_triangular(chol, gram.k_tetr.T, lower=True)
    schur = gram.k_tete - v.T @ v
    schur = 0.5 * (schur + schur.T)
    ref = float(np.mean(np.diag(gram.k_tete))) if gram.n_test else None
    schur_chol = robust_cholesky(schur, ref=ref, max_tries=6) if gram.n_test else np.zeros((0, 0))
    return SharedTerms(
        log_det_half=n_out * float(np.sum(np.log(np.diag(chol)))),
        quad_form=float(np.sum(w**2)),
        const_term=0.5 * y.size * LOG_2PI,
        chol_tr=chol,
        mean_te=gram.k_tetr @ alpha,
        schur_te=schur,
        n_obs=y.size,
        schur_chol=schur_chol,
    )


def log_weight(st: SharedTerms, beta):
    """Unnormalized log-weight; ``beta`` may be a scalar or an array."""
    beta = np.asarray(beta, dtype=float)
    out = -st.const_term - st.log_det_half - 0.5 * st.n_obs * np.log(beta) - st.quad_form / (2.0 * beta)
    return float(out) if out.ndim == 0 else out


def _ess(log_w):
    # (sum w)^2 / sum w^2 evaluated in log space
    return float(np.exp(2.0 * logsumexp(log_w) - logsumexp(2.0 * log_w)))


def _finish(betas, log_w, samples, means=None, covs=None, shared=(None, None)):
    if np.isnan(log_w).any():
        raise ArithmeticError("NaN importance weight")
    ess = min(max(_ess(log_w), 1.0), float(betas.size))
    if ess < ESS_WARN_FRACTION * betas.size:
        warnings.warn(f"effective sample size {ess:.1f} is below 1% of {betas.size}", LowEssWarning, stacklevel=3)
    return WeightedEnsemble(betas, log_w, samples, ess, means, covs, *shared)


def _predict_mixed(task, gram, betas, rng, st=None):
    st = precompute(task, gram) if st is None else st
    log_w = log_weight(st, betas)
    n, l = betas.size, gram.n_test
    root = np.sqrt(betas)
    if st.mean_te.ndim == 1:
        z = rng.standard_normal((n, l)) @ st.schur_chol.T
        samples = st.mean_te + root[:, None] * z
    else:
        c = st.mean_te.shape[1]
        z = np.einsum("ij,nkj->nik", st.schur_chol, rng.standard_normal((n, c, l)))
        samples = st.mean_te[None] + root[:, None, None] * z
    return _finish(betas, log_w, samples, shared=(st.mean_te, st.schur_te))


def _predict_fixed(task, gram, betas, rng, chunk=4096):
    """Noise outside the mixture: ``Y | beta ~ N(0, beta K + eps I)``.

    An eigendecomposition of ``K_trtr`` makes each weight O(K); the
    predictive needs one small Cholesky per beta.
    """
    eps = task.noise(gram)
    lam, u = np.linalg.eigh(gram.k_trtr)
    lam = np.maximum(lam, 0.0)
    y = task.y_tr if task.y_tr.ndim == 2 else task.y_tr[:, None]
    uy = u.T @ y  # (K, C)
    bt = gram.k_tetr @ u  # (L, K)
    n, l, k = betas.size, gram.n_test, gram.n_train
    d = betas[:, None] * lam[None, :] + eps  # (N, K)
    if np.any(d <= 0):
        raise ArithmeticError("fixed-noise covariance is singular; increase noise_variance")
    log_w = -0.5 * (y.shape[1] * (k * LOG_2PI + np.sum(np.log(d), axis=1)) + np.sum(uy[None] ** 2 / d[:, :, None], axis=(1, 2)))
    means = np.empty((n, l, y.shape[1]))
    covs = np.empty((n, l, l))
    samples = np.empty((n, l, y.shape[1]))
    for s in range(0, n, chunk):
        e = slice(s, min(s + chunk, n))
        b, inv = betas[e], 1.0 / d[e]
        means[e] = b[:, None, None] * np.einsum("lk,nk,kc->nlc", bt, inv, uy)
        cov = b[:, None, None] * gram.k_tete[None] - (b**2)[:, None, None] * np.einsum("lk,nk,mk->nlm", bt, inv, bt)
        cov = 0.5 * (cov + np.swapaxes(cov, 1, 2))
        scale = np.mean(np.diagonal(cov, axis1=1, axis2=2), axis=1)
        cov = cov + 1e-10 * scale[:, None, None] * np.eye(l)
        covs[e] = cov
        chol = np.linalg.cholesky(cov)
        z = rng.standard_normal((e.stop - e.start, l, y.shape[1]))
        samples[e] = means[e] + np.einsum("nlm,nmc->nlc", chol, z)
    if task.y_tr.ndim == 1:
        means, samples = means[..., 0], samples[..., 0]
    return _finish(betas, log_w, samples, means, covs)


def predict(task, gram, prior: ScalePrior, n_samples: int, rng, noise_scaling=NoiseScaling.MIXED):
    """Importance-weighted predictive ensemble at ``task.x_te``.

    Returns a :class:`WeightedEnsemble` whose ``samples`` are ``(N, L)`` (or
    ``(N, L, C)`` for matrix targets).
    """
    if n_samples < 2:
        raise ValueError("n_samples must be at least 2")
    betas = np.asarray(prior_sample(prior, n_samples, rng), dtype=float)
    if noise_scaling == NoiseScaling.MIXED:
        return _predict_mixed(task, gram, betas, rng)
    if noise_scaling == NoiseScaling.FIXED:
        return _predict_fixed(task, gram, betas, rng)
    raise ValueError(f"unknown noise_scaling {noise_scaling!r}")


def expectation(ens: WeightedEnsemble, h):
    """Self-normalized estimate of ``E[h(y)]``; ``h`` maps one sample to a real."""
    values = np.array([h(y) for y in ens.samples], dtype=float)
    return float(np.sum(ens.weights * values))


def moments(ens: WeightedEnsemble):
    """Predictive mean and marginal variance at each test point.

    Conditional Gaussian moments are mixed exactly when stored: per draw
    for fixed noise, or as a shared mean and ``beta``-scaled covariance for
    mixed noise.  Otherwise the weighted sample moments are used.
    """
    w = ens.weights
    if ens.shared_cov is not None:
        var = float(w @ ens.betas) * np.diag(ens.shared_cov)
        if ens.shared_mean.ndim == 2:
            var = var[:, None] * np.ones(ens.shared_mean.shape[1])
        return ens.shared_mean.copy(), var
    if ens.cond_means is not None:
        m = np.tensordot(w, ens.cond_means, axes=1)
        var_cond = np.diagonal(ens.cond_covs, axis1=1, axis2=2)
        if ens.cond_means.ndim == 3:
            var_cond = var_cond[:, :, None]
        second = np.tensordot(w, var_cond + ens.cond_means**2, axes=1)
        return m, second - m**2
    m = np.tensordot(w, ens.samples, axes=1)
    dev = ens.samples - m
    return m, np.tensordot(w, dev**2, axes=1)


def log_predictive(task, gram, prior, y_te, n_samples, rng, st=None, observation_noise=True):
    """Per-point log predictive density of ``y_te`` by weighted log-mean-exp.

    Uses the exact conditional Gaussian of each test point given ``beta``:
    ``N(mean_te, beta * (schur + eps))`` (the noise scales with ``beta``, as
    in the weights).  Returns an (L,) array (or (L, C)).
    """
    st = precompute(task, gram) if st is None else st
    betas = np.asarray(prior_sample(prior, n_samples, rng), dtype=float)
    log_w = log_weight(st, betas)
    log_w = log_w - logsumexp(log_w)
    var = np.diag(st.schur_te).copy()
    if observation_noise:
        var = var + task.noise(gram)
    var = np.maximum(var, 1e-300)
    y_te = np.asarray(y_te, dtype=float)
    resid2 = (y_te - st.mean_te) ** 2
    if resid2.ndim == 2:
        var = var[:, None]
    bv = betas.reshape((-1,) + (1,) * resid2.ndim) * var
    logp = -0.5 * (LOG_2PI + np.log(bv) + resid2 / bv)
    return logsumexp(logp + log_w.reshape((-1,) + (1,) * resid2.ndim), axis=0)
