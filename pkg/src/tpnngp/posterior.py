"""Infinite-width limits and exact posteriors under Gaussian likelihood.

Every result here is a scale mixture: conditionally on the readout variance
``s`` the outputs are ``N(mean, s * cov_factor)``.  When the prior on ``s`` is
inverse gamma the mixture integrates to a multivariate t.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import linalg

from .distributions import (
    InvGamma,
    MvtParams,
    ScalePrior,
    UnsupportedOperationError,
    condition_blocks,
    robust_cholesky,
    scale_mixture_sample,
)
from .kernels import GramKind, GramPair

__all__ = [
    "RegressionTask",
    "MixturePredictive",
    "prior_limit",
    "readout_train_limit",
    "bayes_posterior",
    "ntk_train_limit",
    "NoiseScaling",
    "DEFAULT_RELATIVE_NOISE",
]

DEFAULT_RELATIVE_NOISE = 1e-6
PSD_TOL = 1e-8


class NoiseScaling:
    MIXED = "mixed"
    FIXED = "fixed"


@dataclass(frozen=True)
class RegressionTask:
    """Training data and test inputs.

    ``noise_variance=None`` means ``1e-6 * mean(diag K_trtr)``, resolved
    against the gram at hand by :meth:`noise`.  ``y_tr`` may be a vector or a
    (K, C) matrix of independent outputs sharing the kernel.
    """

    x_tr: np.ndarray
    y_tr: np.ndarray
    x_te: np.ndarray
    noise_variance: float | None = None

    def __post_init__(self):
        y = np.asarray(self.y_tr, dtype=float)
        x_tr = np.asarray(self.x_tr, dtype=float)
        x_te = np.asarray(self.x_te, dtype=float)
        if x_tr.ndim == 1:
            x_tr = x_tr[:, None]
        if x_te.ndim == 1:
            x_te = x_te[:, None]
        if y.shape[0] < 1 or y.shape[0] != x_tr.shape[0]:
            raise ValueError("y_tr must have one row per training input (K >= 1)")
        if np.isnan(y).any() or np.isnan(x_tr).any() or np.isnan(x_te).any():
            raise ValueError("task contains NaN")
        if self.noise_variance is not None and self.noise_variance < 0:
            raise ValueError("noise_variance must be non-negative")
        object.__setattr__(self, "y_tr", y)
        object.__setattr__(self, "x_tr", x_tr)
        object.__setattr__(self, "x_te", x_te)

    @property
    def n_train(self) -> int:
        return self.y_tr.shape[0]

    def noise(self, gram: GramPair) -> float:
        if self.noise_variance is not None:
            return float(self.noise_variance)
        return DEFAULT_RELATIVE_NOISE * float(np.mean(np.diag(gram.k_trtr)))


@dataclass(frozen=True)
class MixturePredictive:
    """``s ~ prior``, ``f | s ~ N(conditional_mean, s * conditional_cov_factor)``.

    ``as_mvt`` is the closed-form marginal when the prior is inverse gamma (a
    tuple of per-output MVTs when the mean is a matrix), otherwise ``None``.
    """

    conditional_mean: np.ndarray
    conditional_cov_factor: np.ndarray
    prior: ScalePrior
    as_mvt: MvtParams | tuple | None = None

    def sample(self, n, rng, output=None):
        mean = self.conditional_mean if output is None else self.conditional_mean[:, output]
        return scale_mixture_sample(self.prior, mean, self.conditional_cov_factor, n, rng)


def _ref(gram):
    d = np.diag(gram.k_tete)
    return float(np.mean(d)) if d.size else 1.0


def _check_psd(cov, ref, what):
    if cov.size == 0:
        return cov
    cov = 0.5 * (cov + cov.T)
    lam = np.linalg.eigvalsh(cov)
    scale = max(abs(lam[-1]), ref)
    if lam[0] < -PSD_TOL * scale:
        raise ArithmeticError(f"{what} is not PSD: smallest eigenvalue {lam[0]:.3e}")
    return cov


def _mixture(mean, cov, prior, ref):
    as_mvt = None
    if isinstance(prior, InvGamma):
        scale = (prior.b / prior.a) * cov
        if mean.ndim == 1:
            as_mvt = MvtParams(2 * prior.a, mean, scale, jitter_ref=ref)
        else:
            as_mvt = tuple(
                MvtParams(2 * prior.a, mean[:, j], scale, jitter_ref=ref) for j in range(mean.shape[1])
            )
    return MixturePredictive(mean, cov, prior, as_mvt)


def _solve_factor(a, ref=None):
    return linalg.cho_solve((robust_cholesky(a, ref=ref), True), np.eye(a.shape[0]))


def prior_limit(gram: GramPair, prior: ScalePrior) -> MixturePredictive:
    """Output law of the randomly initialised network on train and test inputs."""
    if gram.kind is not GramKind.NNGP:
        raise ValueError("prior_limit needs an NNGP gram")
    full = gram.full()
    return _mixture(np.zeros(full.shape[0]), full, prior, float(np.mean(np.diag(full))))


def _gp_blocks(task, gram):
    eps = task.noise(gram)
    k = gram.k_trtr + eps * np.eye(gram.n_train)
    chol = robust_cholesky(k)
    alpha = linalg.cho_solve((chol, True), task.y_tr)
    v = linalg.solve_triangular(chol, gram.k_tetr.T, lower=True)
    return chol, alpha, v, eps


def readout_train_limit(task: RegressionTask, gram: GramPair, prior: ScalePrior) -> MixturePredictive:
    """Limit of networks whose readout layer alone is trained to convergence.

    The mixing distribution stays the prior, so the MVT keeps ``2a`` degrees of
    freedom no matter how many training points are seen.
    """
    _, alpha, v, _ = _gp_blocks(task, gram)
    mean = gram.k_tetr @ alpha
    ref = _ref(gram)
    cov = _check_psd(gram.k_tete - v.T @ v, ref, "readout-trained covariance")
    return _mixture(mean, cov, prior, ref)


def bayes_posterior(task, gram, prior, noise_scaling=NoiseScaling.MIXED, n_samples=100_000, rng=None):
    """Exact Student's t posterior predictive for an inverse-gamma prior.

    With ``noise_scaling="mixed"`` the jitter sits inside the scale mixture so
    the joint law of (train, test) is ``MVT(2a, 0, (b/a) * (K + eps I_tr))`` and
    conditioning on ``y_tr`` is exact: dof ``2a + K``.  With ``"fixed"`` the
    noise does not scale with ``s``, there is no closed form, and the call is
    delegated to :func:`tpnngp.impsampling.predict` (returning its ensemble).
    """
    if noise_scaling == NoiseScaling.FIXED:
        from . import impsampling

        rng = np.random.default_rng() if rng is None else rng
        return impsampling.predict(task, gram, prior, n_samples, rng, noise_scaling=NoiseScaling.FIXED)
    if noise_scaling != NoiseScaling.MIXED:
        raise ValueError(f"unknown noise_scaling {noise_scaling!r}")
    if not isinstance(prior, InvGamma):
        raise UnsupportedOperationError(
            "exact posterior needs an InvGamma prior; use impsampling.predict for other priors"
        )
    eps = task.noise(gram)
    r = prior.b / prior.a
    nu = 2 * prior.a
    s11 = r * (gram.k_trtr + eps * np.eye(gram.n_train))
    dof, shift, schur, c = condition_blocks(nu, s11, r * gram.k_tetr, r * gram.k_tete, task.y_tr)
    ref = r * _ref(gram)
    schur = _check_psd(schur, ref, "posterior scale")
    if task.y_tr.ndim == 1:
        return MvtParams(dof, shift, (nu + float(c)) / dof * schur, jitter_ref=ref)
    return [
        MvtParams(dof, shift[:, j], (nu + c[j]) / dof * schur, jitter_ref=ref)
        for j in range(task.y_tr.shape[1])
    ]


def ntk_train_limit(task, gram_nngp: GramPair, gram_ntk: GramPair, prior: ScalePrior) -> MixturePredictive:
    """Limit of NTK-parameterised networks with every layer trained by gradient flow."""
    if gram_ntk.kind is not GramKind.NTK or gram_nngp.kind is not GramKind.NNGP:
        raise ValueError("ntk_train_limit needs an NNGP gram and an NTK gram")
    eps = task.noise(gram_ntk)
    theta_inv = _solve_factor(gram_ntk.k_trtr + eps * np.eye(gram_ntk.n_train))
    proj = gram_ntk.k_tetr @ theta_inv  # Theta_te,tr Theta_tr,tr^-1
    mean = proj @ task.y_tr
    cross = proj @ gram_nngp.k_tetr.T
    cov = gram_nngp.k_tete + proj @ gram_nngp.k_trtr @ proj.T - (cross + cross.T)
    ref = _ref(gram_nngp)
    cov = _check_psd(cov, ref, "NTK-trained covariance")
    return _mixture(mean, cov, prior, ref)
