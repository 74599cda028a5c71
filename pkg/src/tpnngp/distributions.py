"""Multivariate Student's t distributions and priors on the readout scale."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import linalg
from scipy.special import beta, gammaln

__all__ = [
    "NotPositiveDefiniteError",
    "UnsupportedOperationError",
    "robust_cholesky",
    "MvtParams",
    "mvt_logpdf",
    "mvt_sample",
    "mvt_condition",
    "mvt_marginalize",
    "condition_blocks",
    "ScalePrior",
    "InvGamma",
    "BurrXII",
    "PointMass",
    "parse_prior",
    "prior_logpdf",
    "prior_sample",
    "scale_mixture_sample",
]

LOG_2PI = np.log(2.0 * np.pi)


class NotPositiveDefiniteError(np.linalg.LinAlgError):
    pass


class UnsupportedOperationError(TypeError):
    pass


def robust_cholesky(a, max_tries=3, base=1e-10, ref=None):
    """Lower Cholesky factor of ``a``, adding diagonal jitter on failure.

    The first retry adds ``base * ref`` to the diagonal, where ``ref`` defaults
    to ``trace(a) / d``; each further retry multiplies the jitter by 10.
    """
    a = np.asarray(a, dtype=float)
    d = a.shape[0]
    if d == 0:
        return np.zeros((0, 0))
    try:
        return linalg.cholesky(a, lower=True)
    except linalg.LinAlgError:
        pass
    scale = np.trace(a) / d if ref is None else float(ref)
    if not np.isfinite(scale) or scale <= 0:
        scale = 1.0
    jitter = base * scale
    for _ in range(max_tries):
        try:
            return linalg.cholesky(a + jitter * np.eye(d), lower=True)
        except linalg.LinAlgError:
            jitter *= 10.0
    raise NotPositiveDefiniteError(
        f"matrix of size {d} is not positive definite (jitter up to {jitter / 10:.3g})"
    )


def _check_symmetric(a, tol=1e-10):
    scale = max(np.max(np.abs(a), initial=0.0), 1.0)
    if np.max(np.abs(a - a.T), initial=0.0) > tol * scale:
        raise ValueError("scale matrix is not symmetric")


@dataclass(frozen=True)
class MvtParams:
    """``MVT_d(dof, loc, scale)``.

    The Cholesky factor of ``scale`` is computed once at construction.
    """

    dof: float
    loc: np.ndarray
    scale: np.ndarray
    jitter_ref: float | None = field(default=None, repr=False, compare=False)
    chol: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        loc = np.atleast_1d(np.asarray(self.loc, dtype=float))
        scale = np.atleast_2d(np.asarray(self.scale, dtype=float))
        if not self.dof > 0:
            raise ValueError(f"dof must be positive, got {self.dof}")
        if scale.shape != (loc.size, loc.size):
            raise ValueError(f"scale shape {scale.shape} does not match location size {loc.size}")
        _check_symmetric(scale)
        object.__setattr__(self, "loc", loc)
        object.__setattr__(self, "scale", scale)
        object.__setattr__(self, "chol", robust_cholesky(scale, ref=self.jitter_ref))

    @property
    def dim(self) -> int:
        return self.loc.size

    def mean(self):
        if self.dof <= 1:
            raise ValueError("mean is undefined for dof <= 1")
        return self.loc.copy()

    def covariance(self):
        if self.dof <= 2:
            raise ValueError("covariance is undefined for dof <= 2")
        return self.dof / (self.dof - 2.0) * self.scale


def mvt_logpdf(p: MvtParams, x):
    """Log density of ``p`` at ``x`` (a d-vector, or an (n, d) batch)."""
    x = np.asarray(x, dtype=float)
    single = x.ndim <= 1
    x = np.atleast_2d(x).reshape(-1, p.dim)
    diff = (x - p.loc).T
    sol = linalg.solve_triangular(p.chol, diff, lower=True)
    maha = np.sum(sol**2, axis=0)
    d, nu = p.dim, p.dof
    half_logdet = np.sum(np.log(np.diag(p.chol)))
    out = (
        gammaln(0.5 * (nu + d))
        - gammaln(0.5 * nu)
        - 0.5 * d * np.log(nu * np.pi)
        - half_logdet
        - 0.5 * (nu + d) * np.log1p(maha / nu)
    )
    return float(out[0]) if single else out


def mvt_sample(p: MvtParams, n: int, rng: np.random.Generator):
    """``n`` draws as an (n, d) array via the inverse-gamma mixture."""
    if n < 1:
        raise ValueError("n must be at least 1")
    s2 = InvGamma(0.5 * p.dof, 0.5 * p.dof).sample(n, rng)
    z = rng.standard_normal((n, p.dim))
    return p.loc + np.sqrt(s2)[:, None] * (z @ p.chol.T)


def condition_blocks(dof, s11, s21, s22, resid, jitter_ref=None):
    """Block form of MVT conditioning.

    ``resid`` is ``x1 - mu1`` (d1,) or several observations as (d1, m).
    Returns ``(dof', shift, schur, c)`` where the conditional location is
    ``mu2 + shift``, the conditional scale is ``(dof + c) / dof' * schur`` and
    ``c`` is the Mahalanobis term (one per column of ``resid``).
    """
    l11 = robust_cholesky(s11)
    a = linalg.solve_triangular(l11, s21.T, lower=True)
    w = linalg.solve_triangular(l11, resid, lower=True)
    c = np.sum(w**2, axis=0)
    schur = s22 - a.T @ a
    return dof + s11.shape[0], a.T @ w, 0.5 * (schur + schur.T), c


def mvt_condition(p: MvtParams, x1, observed=None) -> MvtParams:
    """Distribution of the unobserved block given the observed one.

    By default the first ``len(x1)`` coordinates are observed; pass
    ``observed`` (an index array) to condition on other coordinates.  The
    result is ``MVT(nu + d1, mu2', (nu + c) / (nu + d1) * Schur)``.
    """
    x1 = np.atleast_1d(np.asarray(x1, dtype=float))
    d1 = x1.size
    if observed is not None:
        observed = np.asarray(observed, dtype=int)
        rest = np.setdiff1d(np.arange(p.dim), observed)
        order = np.concatenate([observed, rest])
        p = MvtParams(p.dof, p.loc[order], p.scale[np.ix_(order, order)])
    if not 1 <= d1 < p.dim:
        raise ValueError(f"observed block size {d1} invalid for dimension {p.dim}")
    s = p.scale
    dof, shift, schur, c = condition_blocks(
        p.dof, s[:d1, :d1], s[d1:, :d1], s[d1:, d1:], x1 - p.loc[:d1]
    )
    factor = (p.dof + float(c)) / dof
    return MvtParams(dof, p.loc[d1:] + shift, factor * schur, jitter_ref=p.jitter_ref)


def mvt_marginalize(p: MvtParams, keep) -> MvtParams:
    keep = np.atleast_1d(np.asarray(keep, dtype=int))
    if keep.size == 0:
        raise ValueError("keep must be non-empty")
    return MvtParams(p.dof, p.loc[keep], p.scale[np.ix_(keep, keep)])


class ScalePrior:
    """A distribution on the readout variance sigma_v^2 > 0."""

    def logpdf(self, s):
        raise NotImplementedError

    def sample(self, n, rng):
        raise NotImplementedError

    def spec(self) -> str:
        raise NotImplementedError

    @staticmethod
    def _check_support(s):
        s = np.asarray(s, dtype=float)
        if np.any(s <= 0) or np.isnan(s).any():
            raise ValueError("scale prior support is s > 0")
        return s


@dataclass(frozen=True)
class InvGamma(ScalePrior):
    """Inverse gamma with shape ``a`` and scale ``b``."""

    a: float
    b: float

    def __post_init__(self):
        if not (self.a > 0 and self.b > 0):
            raise ValueError("InvGamma parameters must be positive")

    def logpdf(self, s):
        s = self._check_support(s)
        return self.a * np.log(self.b) - gammaln(self.a) - (self.a + 1) * np.log(s) - self.b / s

    def sample(self, n, rng):
        return self.b / rng.gamma(self.a, 1.0, size=n)

    def mean(self):
        if self.a <= 1:
            raise ValueError("mean undefined for a <= 1")
        return self.b / (self.a - 1)

    def spec(self):
        return f"invgamma:{self.a:g},{self.b:g}"


@dataclass(frozen=True)
class BurrXII(ScalePrior):
    """Burr type XII, density ``c k s^(c-1) (1 + s^c)^(-k-1)``."""

    c: float
    k: float

    def __post_init__(self):
        if not (self.c > 0 and self.k > 0):
            raise ValueError("BurrXII parameters must be positive")

    def logpdf(self, s):
        s = self._check_support(s)
        return (
            np.log(self.c * self.k)
            + (self.c - 1) * np.log(s)
            - (self.k + 1) * np.log1p(s**self.c)
        )

    def cdf(self, s):
        s = np.asarray(s, dtype=float)
        return -np.expm1(-self.k * np.log1p(np.maximum(s, 0.0) ** self.c))

    def sample(self, n, rng):
        u = rng.uniform(size=n)
        # inverse CDF on the upper tail 1-u for accuracy near s = 0
        return np.expm1(-np.log1p(-u) / self.k) ** (1.0 / self.c)

    def mean(self):
        if self.c * self.k <= 1:
            raise ValueError("mean undefined for c*k <= 1")
        return self.k * beta(self.k - 1.0 / self.c, 1.0 + 1.0 / self.c)

    def spec(self):
        return f"burr:{self.c:g},{self.k:g}"


@dataclass(frozen=True)
class PointMass(ScalePrior):
    """Degenerate prior at ``s``; recovers the plain NNGP."""

    s: float

    def __post_init__(self):
        if not self.s > 0:
            raise ValueError("PointMass location must be positive")

    def logpdf(self, s):
        raise UnsupportedOperationError("PointMass has no density")

    def sample(self, n, rng):
        return np.full(n, float(self.s))

    def mean(self):
        return float(self.s)

    def spec(self):
        return f"point:{self.s:g}"


def parse_prior(spec: str) -> ScalePrior:
    """Parse ``invgamma:a,b``, ``burr:c,k`` or ``point:s``."""
    try:
        kind, _, args = spec.partition(":")
        values = [float(v) for v in args.split(",")]
    except ValueError as err:
        raise ValueError(f"cannot parse prior {spec!r}") from err
    kind = kind.strip().lower()
    table = {"invgamma": (InvGamma, 2), "burr": (BurrXII, 2), "point": (PointMass, 1)}
    if kind not in table or len(values) != table[kind][1]:
        raise ValueError(f"cannot parse prior {spec!r}")
    cls, _ = table[kind]
    return cls(*values)


def prior_logpdf(h: ScalePrior, s):
    return h.logpdf(s)


def prior_sample(h: ScalePrior, n: int, rng: np.random.Generator):
    if n < 1:
        raise ValueError("n must be at least 1")
    return h.sample(n, rng)


def scale_mixture_sample(h: ScalePrior, mu, sigma, n: int, rng: np.random.Generator):
    """Draw ``s ~ h`` then ``x | s ~ N(mu, s * sigma)``; returns (n, d)."""
    mu = np.atleast_1d(np.asarray(mu, dtype=float))
    chol = robust_cholesky(np.atleast_2d(sigma))
    s = prior_sample(h, n, rng)
    z = rng.standard_normal((n, mu.size))
    return mu + np.sqrt(s)[:, None] * (z @ chol.T)
