"""Closed-form NNGP and NTK kernels for fully-connected networks.

The network is

    h^1 = W^1 x + b^1,   h^{l+1} = W^{l+1} phi(h^l) + b^{l+1},   f = v . phi(h^L) / sqrt(n)

with ``W^l ~ N(0, sigma_w^2 / fan_in)`` and ``b^l ~ N(0, sigma_b^2)``.  In the
infinite-width limit the pre-activations are jointly Gaussian with covariance
``k^l`` given by

    k^0(x, x') = sigma_w^2 <x, x'> / I + sigma_b^2
    k^{l+1}    = sigma_w^2 E[phi(u) phi(v)] + sigma_b^2,   (u, v) ~ N(0, k^l)

and the readout-variance-free kernel is ``K = E[phi(u) phi(v)]`` under the last
pre-activation covariance.  The NTK follows the companion recursion
``Theta^{l+1} = k^{l+1} + sigma_w^2 E[phi'(u) phi'(v)] Theta^l`` with the
readout contributing ``K + E[phi'(u) phi'(v)] Theta^L`` (unit readout variance).
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

__all__ = [
    "Activation",
    "NetworkConfig",
    "GramPair",
    "GramKind",
    "NumericalDomainError",
    "dual_expectations",
    "nngp_matrix",
    "nngp_diag",
    "ntk_matrix",
    "nngp_gram",
    "ntk_gram",
]

_CLAMP_SLACK = 1e-12


class NumericalDomainError(ArithmeticError):
    """A kernel intermediate left its mathematical domain."""


class Activation(str, enum.Enum):
    ERF = "erf"
    RELU = "relu"


class GramKind(str, enum.Enum):
    NNGP = "nngp"
    NTK = "ntk"


@dataclass(frozen=True)
class NetworkConfig:
    """Architecture of a fully-connected network.

    Parameters
    ----------
    depth : int
        Number of hidden layers (>= 1).
    activation : Activation or str
        ``"erf"`` or ``"relu"``.
    weight_variance : float
        sigma_w^2, applied as ``sigma_w^2 / fan_in`` in every hidden layer.
    bias_variance : float
        sigma_b^2, width independent.
    input_dim : int
        Input dimension I.
    """

    depth: int = 3
    activation: Activation = Activation.ERF
    weight_variance: float = 8.0
    bias_variance: float = 0.05**2
    input_dim: int = 1

    def __post_init__(self):
        object.__setattr__(self, "activation", Activation(self.activation))
        if int(self.depth) != self.depth or self.depth < 1:
            raise ValueError(f"depth must be a positive integer, got {self.depth}")
        if not self.weight_variance > 0:
            raise ValueError("weight_variance must be positive")
        if not self.bias_variance >= 0:
            raise ValueError("bias_variance must be non-negative")
        if int(self.input_dim) != self.input_dim or self.input_dim < 1:
            raise ValueError("input_dim must be a positive integer")

    def to_dict(self) -> dict:
        return {
            "depth": int(self.depth),
            "activation": self.activation.value,
            "weight_variance": float(self.weight_variance),
            "bias_variance": float(self.bias_variance),
            "input_dim": int(self.input_dim),
        }


@dataclass(frozen=True)
class GramPair:
    """Train/test blocks of an unscaled kernel matrix."""

    k_trtr: np.ndarray
    k_tetr: np.ndarray
    k_tete: np.ndarray
    kind: GramKind = GramKind.NNGP

    @property
    def n_train(self) -> int:
        return self.k_trtr.shape[0]

    @property
    def n_test(self) -> int:
        return self.k_tete.shape[0]

    def full(self) -> np.ndarray:
        """The joint (K+L) x (K+L) matrix, training rows first."""
        return np.block([[self.k_trtr, self.k_tetr.T], [self.k_tetr, self.k_tete]])


def _clamped(arg, layer, what):
    arg = np.asarray(arg, dtype=float)
    if not np.all(np.isfinite(arg)):
        raise NumericalDomainError(f"non-finite {what} at layer {layer}")
    worst = np.max(np.abs(arg), initial=0.0)
    if worst > 1.0 + _CLAMP_SLACK:
        raise NumericalDomainError(
            f"{what} at layer {layer} is {worst!r}, outside [-1, 1] beyond tolerance"
        )
    return np.clip(arg, -1.0, 1.0)


def dual_expectations(activation, q1, q2, c, layer=0):
    """Gaussian expectations ``E[phi(u)phi(v)]`` and ``E[phi'(u)phi'(v)]``.

    ``(u, v)`` is zero-mean Gaussian with ``Var u = q1``, ``Var v = q2`` and
    ``Cov(u, v) = c``; arrays broadcast.
    """
    activation = Activation(activation)
    q1 = np.asarray(q1, dtype=float)
    q2 = np.asarray(q2, dtype=float)
    c = np.asarray(c, dtype=float)
    if activation is Activation.ERF:
        denom = (1.0 + 2.0 * q1) * (1.0 + 2.0 * q2)
        arg = _clamped(2.0 * c / np.sqrt(denom), layer, "arcsin argument")
        e = (2.0 / np.pi) * np.arcsin(arg)
        gap = denom - 4.0 * c**2
        if np.any(gap <= 0):
            raise NumericalDomainError(f"singular erf derivative kernel at layer {layer}")
        ed = (4.0 / np.pi) / np.sqrt(gap)
        return e, ed
    norm = np.sqrt(q1 * q2)
    safe = np.where(norm > 0, norm, 1.0)
    cos = _clamped(np.where(norm > 0, c / safe, 0.0), layer, "arccos argument")
    theta = np.arccos(cos)
    e = norm / (2.0 * np.pi) * (np.sin(theta) + (np.pi - theta) * cos)
    ed = (np.pi - theta) / (2.0 * np.pi)
    return e, ed


def _as_inputs(x, cfg):
    x = np.asarray(x, dtype=float)
    if x.ndim == 1:
        x = x.reshape(-1, cfg.input_dim)
    if x.ndim != 2 or x.shape[1] != cfg.input_dim:
        raise ValueError(f"inputs must have shape (n, {cfg.input_dim}), got {x.shape}")
    if np.isnan(x).any():
        raise ValueError("inputs contain NaN")
    return x


def _recurse(x1, x2, cfg, ntk, diag_only=False):
    """Run the layer recursion for the cross block between ``x1`` and ``x2``.

    Returns ``(K, Theta)``; ``Theta`` is ``None`` unless ``ntk``.  With
    ``diag_only`` the pairs are ``(x1[i], x2[i])`` and 1-D arrays come back.
    """
    sw, sb = cfg.weight_variance, cfg.bias_variance
    I = cfg.input_dim
    q1 = sw * np.einsum("ij,ij->i", x1, x1) / I + sb
    q2 = sw * np.einsum("ij,ij->i", x2, x2) / I + sb
    if diag_only:
        c = sw * np.einsum("ij,ij->i", x1, x2) / I + sb
        Q1, Q2 = q1, q2
    else:
        c = sw * (x1 @ x2.T) / I + sb
        Q1, Q2 = q1[:, None], q2[None, :]
    theta = c.copy() if ntk else None

    for layer in range(1, cfg.depth):
        e, ed = dual_expectations(cfg.activation, Q1, Q2, c, layer)
        e1, _ = dual_expectations(cfg.activation, q1, q1, q1, layer)
        e2, _ = dual_expectations(cfg.activation, q2, q2, q2, layer)
        c_new = sw * e + sb
        if ntk:
            theta = c_new + sw * ed * theta
        c = c_new
        q1, q2 = sw * e1 + sb, sw * e2 + sb
        Q1, Q2 = (q1, q2) if diag_only else (q1[:, None], q2[None, :])

    k, kd = dual_expectations(cfg.activation, Q1, Q2, c, cfg.depth)
    if ntk:
        theta = k + kd * theta
    return k, theta


def _symmetrize(a):
    return 0.5 * (a + a.T)


def nngp_matrix(x1, x2=None, cfg: NetworkConfig = NetworkConfig()):
    """Unscaled NNGP kernel between two input sets."""
    x1 = _as_inputs(x1, cfg)
    if x2 is None:
        return _symmetrize(_recurse(x1, x1, cfg, ntk=False)[0])
    return _recurse(x1, _as_inputs(x2, cfg), cfg, ntk=False)[0]


def nngp_diag(x, cfg: NetworkConfig = NetworkConfig()):
    """Diagonal ``K(x_i, x_i)`` without forming the full matrix."""
    x = _as_inputs(x, cfg)
    return _recurse(x, x, cfg, ntk=False, diag_only=True)[0]


def ntk_matrix(x1, x2=None, cfg: NetworkConfig = NetworkConfig()):
    """Unscaled NTK between two input sets."""
    x1 = _as_inputs(x1, cfg)
    if x2 is None:
        return _symmetrize(_recurse(x1, x1, cfg, ntk=True)[1])
    return _recurse(x1, _as_inputs(x2, cfg), cfg, ntk=True)[1]


def _gram(x_tr, x_te, cfg, ntk):
    x_tr = _as_inputs(x_tr, cfg)
    if x_tr.shape[0] < 1:
        raise ValueError("need at least one training input")
    if x_te is None:
        x_te = np.empty((0, cfg.input_dim))
    x_te = _as_inputs(x_te, cfg)
    pick = 1 if ntk else 0
    trtr = _symmetrize(_recurse(x_tr, x_tr, cfg, ntk)[pick])
    tetr = _recurse(x_te, x_tr, cfg, ntk)[pick]
    tete = _symmetrize(_recurse(x_te, x_te, cfg, ntk)[pick])
    kind = GramKind.NTK if ntk else GramKind.NNGP
    return GramPair(trtr, tetr.reshape(len(x_te), len(x_tr)), tete.reshape(len(x_te), len(x_te)), kind)


def nngp_gram(x_tr, x_te=None, cfg: NetworkConfig = NetworkConfig()) -> GramPair:
    """NNGP kernel blocks for training inputs ``x_tr`` (K x I) and test inputs ``x_te`` (L x I)."""
    return _gram(x_tr, x_te, cfg, ntk=False)


def ntk_gram(x_tr, x_te=None, cfg: NetworkConfig = NetworkConfig()) -> GramPair:
    """NTK blocks with unit readout variance, laid out like :func:`nngp_gram`."""
    return _gram(x_tr, x_te, cfg, ntk=True)
