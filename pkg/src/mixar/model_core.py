"""Experts, mixtures and their conditional likelihood.

An expert is an autoregressive regression function of the last ``lags``
observations plus a centred Gaussian noise with its own scale.  Two kinds
are supported: a linear map ``a . window + b`` and a one-hidden-layer
perceptron ``alpha0 + sum_j alpha_j tanh(beta0_j + beta_j . window)``.

A mixture draws, independently at every time step, which expert produced
the next observation.  Windows are always ordered most-recent-last.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Sequence

import numpy as np
from scipy.special import logsumexp

from .errors import DimensionError, InsufficientDataError, InvariantError

SIGMA_FLOOR = 1e-4
BOUND = 1e6
ETA = 1e-3
LOG_SQRT_2PI = 0.5 * math.log(2.0 * math.pi)


class ExpertKind(str, Enum):
    LINEAR = "linear"
    MLP = "mlp"


def _frozen_array(values, shape=None, name="array"):
    arr = np.array(values, dtype=float)
    if shape is not None:
        if arr.size == 0 and int(np.prod(shape)) == 0:
            arr = arr.reshape(shape)
        if arr.shape != tuple(shape):
            raise DimensionError(f"{name} has shape {arr.shape}, expected {tuple(shape)}")
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class ExpertParams:
    """One regression component and its noise scale.

    Use :meth:`linear` or :meth:`mlp` rather than the raw constructor.
    """

    kind: ExpertKind
    lags: int
    hidden_units: int = 0
    alpha0: float = 0.0
    alpha: np.ndarray = field(default_factory=lambda: np.zeros(0))
    beta0: np.ndarray = field(default_factory=lambda: np.zeros(0))
    beta: np.ndarray = field(default_factory=lambda: np.zeros((0, 0)))
    linear_a: np.ndarray = field(default_factory=lambda: np.zeros(0))
    linear_b: float = 0.0
    sigma: float = 1.0

    def __post_init__(self):
        kind = ExpertKind(self.kind)
        object.__setattr__(self, "kind", kind)
        lags, k = int(self.lags), int(self.hidden_units)
        if lags < 1:
            raise InvariantError(f"lags must be positive, got {lags}")
        if k < 0:
            raise InvariantError(f"hidden_units must be non-negative, got {k}")
        object.__setattr__(self, "lags", lags)
        object.__setattr__(self, "hidden_units", k)
        if kind is ExpertKind.LINEAR:
            if k != 0:
                raise InvariantError("linear experts have no hidden units")
            object.__setattr__(self, "alpha", _frozen_array([], (0,), "alpha"))
            object.__setattr__(self, "beta0", _frozen_array([], (0,), "beta0"))
            object.__setattr__(self, "beta", _frozen_array([], (0, lags), "beta"))
            object.__setattr__(self, "alpha0", 0.0)
            object.__setattr__(self, "linear_a", _frozen_array(self.linear_a, (lags,), "linear_a"))
            object.__setattr__(self, "linear_b", float(self.linear_b))
        else:
            object.__setattr__(self, "alpha0", float(self.alpha0))
            object.__setattr__(self, "alpha", _frozen_array(self.alpha, (k,), "alpha"))
            object.__setattr__(self, "beta0", _frozen_array(self.beta0, (k,), "beta0"))
            object.__setattr__(self, "beta", _frozen_array(self.beta, (k, lags), "beta"))
            object.__setattr__(self, "linear_a", _frozen_array(np.zeros(lags), (lags,), "linear_a"))
            object.__setattr__(self, "linear_b", 0.0)
        object.__setattr__(self, "sigma", float(self.sigma))

        theta = self.to_vector()
        if not np.all(np.isfinite(theta)):
            raise InvariantError("expert parameters must be finite")
        if np.any(np.abs(theta) > BOUND):
            raise InvariantError(f"expert weights must lie within +/-{BOUND:g}")
        if not SIGMA_FLOOR <= self.sigma <= BOUND:
            raise InvariantError(f"sigma={self.sigma!r} outside [{SIGMA_FLOOR}, {BOUND:g}]")

    @classmethod
    def linear(cls, a, b, sigma) -> "ExpertParams":
        a = np.atleast_1d(np.asarray(a, dtype=float))
        return cls(ExpertKind.LINEAR, lags=a.size, linear_a=a, linear_b=b, sigma=sigma)

    @classmethod
    def mlp(cls, alpha0, alpha, beta0, beta, sigma) -> "ExpertParams":
        alpha = np.atleast_1d(np.asarray(alpha, dtype=float))
        beta = np.asarray(beta, dtype=float)
        if beta.ndim == 1:
            beta = beta.reshape(alpha.size, -1)
        return cls(ExpertKind.MLP, lags=beta.shape[1], hidden_units=alpha.size,
                   alpha0=alpha0, alpha=alpha, beta0=beta0, beta=beta, sigma=sigma)

    @property
    def intercept(self) -> float:
        return self.linear_b if self.kind is ExpertKind.LINEAR else self.alpha0

    @property
    def dim(self) -> int:
        """Number of free parameters, sigma included."""
        return expert_dim(self.kind, self.lags, self.hidden_units)

    def to_vector(self) -> np.ndarray:
        """Flatten the free parameters.

        linear: ``[a_1..a_l, b, sigma]``;
        mlp: ``[alpha0, alpha_1..k, beta0_1..k, beta (row-major k x l), sigma]``.
        """
        if self.kind is ExpertKind.LINEAR:
            return np.concatenate([self.linear_a, [self.linear_b, self.sigma]])
        return np.concatenate([[self.alpha0], self.alpha, self.beta0,
                               self.beta.ravel(), [self.sigma]])

    def with_vector(self, theta) -> "ExpertParams":
        """Expert of the same shape whose free parameters are ``theta``."""
        theta = np.asarray(theta, dtype=float)
        if theta.shape != (self.dim,):
            raise DimensionError(f"expected {self.dim} parameters, got {theta.shape}")
        l, k = self.lags, self.hidden_units
        if self.kind is ExpertKind.LINEAR:
            return ExpertParams.linear(theta[:l], theta[l], theta[l + 1])
        return ExpertParams(
            ExpertKind.MLP, lags=l, hidden_units=k,
            alpha0=theta[0], alpha=theta[1:1 + k], beta0=theta[1 + k:1 + 2 * k],
            beta=theta[1 + 2 * k:1 + 2 * k + k * l].reshape(k, l), sigma=theta[-1],
        )

    def with_sigma(self, sigma: float) -> "ExpertParams":
        theta = self.to_vector().copy()
        theta[-1] = sigma
        return self.with_vector(theta)

    def __eq__(self, other):
        if not isinstance(other, ExpertParams):
            return NotImplemented
        return (self.kind is other.kind and self.lags == other.lags
                and self.hidden_units == other.hidden_units
                and np.array_equal(self.to_vector(), other.to_vector()))

    def __hash__(self):
        return hash((self.kind, self.lags, self.hidden_units, self.to_vector().tobytes()))


def expert_dim(kind, lags: int, hidden_units: int = 0) -> int:
    """Free parameters of one expert, the noise scale included."""
    if ExpertKind(kind) is ExpertKind.LINEAR:
        return lags + 2
    return hidden_units * (lags + 2) + 2


def clamp_vector(theta: np.ndarray) -> np.ndarray:
    """Project a parameter vector onto the box of admissible experts."""
    out = np.minimum(np.maximum(theta, -BOUND), BOUND)
    out[-1] = min(max(out[-1], SIGMA_FLOOR), BOUND)
    return out


@dataclass(frozen=True, eq=False)
class MixtureModel:
    """``p`` experts sharing one window length, with mixing weights."""

    experts: tuple
    weights: np.ndarray

    def __post_init__(self):
        experts = tuple(self.experts)
        if not experts:
            raise InvariantError("a mixture needs at least one expert")
        if any(not isinstance(e, ExpertParams) for e in experts):
            raise InvariantError("experts must be ExpertParams instances")
        if len({e.lags for e in experts}) != 1:
            raise InvariantError("all experts must share the same number of lags")
        weights = _frozen_array(self.weights, (len(experts),), "weights")
        if not np.all(np.isfinite(weights)) or np.any(weights <= 0):
            raise InvariantError("mixing weights must be positive")
        if abs(weights.sum() - 1.0) > 1e-12:
            raise InvariantError(f"mixing weights sum to {weights.sum()!r}, not 1")
        object.__setattr__(self, "experts", experts)
        object.__setattr__(self, "weights", weights)

    @property
    def p(self) -> int:
        return len(self.experts)

    @property
    def lags(self) -> int:
        return self.experts[0].lags

    def permuted(self, order: Sequence[int]) -> "MixtureModel":
        order = list(order)
        return MixtureModel(tuple(self.experts[i] for i in order), self.weights[order])

    def canonical(self) -> "MixtureModel":
        """Reorder components by descending weight, then ascending intercept."""
        order = sorted(range(self.p), key=lambda i: (-self.weights[i], self.experts[i].intercept))
        return self.permuted(order)

    def __eq__(self, other):
        if not isinstance(other, MixtureModel):
            return NotImplemented
        return self.experts == other.experts and np.array_equal(self.weights, other.weights)

    __hash__ = None


@dataclass(frozen=True, eq=False)
class SeriesData:
    """Ordered, finite scalar observations."""

    values: np.ndarray

    def __post_init__(self):
        values = _frozen_array(np.ravel(self.values), name="values")
        if not np.all(np.isfinite(values)):
            raise InvariantError("series values must be finite")
        object.__setattr__(self, "values", values)

    def __len__(self):
        return self.values.size

    def windows(self, lags: int):
        """Return ``(X, y)``: lag windows (most recent last) and their targets."""
        n = self.values.size
        if n < lags + 1:
            raise InsufficientDataError(f"series of length {n} is too short for {lags} lags")
        X = np.lib.stride_tricks.sliding_window_view(self.values, lags)[:-1]
        return X, self.values[lags:]


def _unpack_mlp(theta: np.ndarray, k: int, l: int):
    return theta[0], theta[1:1 + k], theta[1 + k:1 + 2 * k], theta[1 + 2 * k:1 + 2 * k + k * l].reshape(k, l)


def _forward_vec(theta: np.ndarray, kind: ExpertKind, k: int, X: np.ndarray):
    """Mean function for a raw parameter vector; also returns hidden activations."""
    l = X.shape[1]
    if kind is ExpertKind.LINEAR:
        return X @ theta[:l] + theta[l], None
    a0, a, b0, b = _unpack_mlp(theta, k, l)
    H = np.tanh(X @ b.T + b0)
    return a0 + H @ a, H


def _gradient_vec(theta: np.ndarray, kind: ExpertKind, k: int, X, y, r) -> np.ndarray:
    F, H = _forward_vec(theta, kind, k, X)
    sigma = theta[-1]
    resid = y - F
    g = r * resid / sigma ** 2  # d/dF of the weighted log density
    dsigma = float(np.dot(r, resid * resid)) / sigma ** 3 - float(r.sum()) / sigma
    if kind is ExpertKind.LINEAR:
        return np.concatenate([X.T @ g, [g.sum(), dsigma]])
    a = theta[1:1 + k]
    dpre = g[:, None] * a * (1.0 - H * H)
    return np.concatenate([[g.sum()], H.T @ g, dpre.sum(axis=0), (dpre.T @ X).ravel(), [dsigma]])


def _forward(expert: ExpertParams, X: np.ndarray):
    if expert.kind is ExpertKind.LINEAR:
        return X @ expert.linear_a + expert.linear_b, None
    H = np.tanh(X @ expert.beta.T + expert.beta0)
    return expert.alpha0 + H @ expert.alpha, H


def predict_many(expert: ExpertParams, X: np.ndarray) -> np.ndarray:
    X = np.asarray(X, dtype=float)
    if X.ndim != 2 or X.shape[1] != expert.lags:
        raise DimensionError(f"windows of shape {X.shape} do not match {expert.lags} lags")
    return _forward(expert, X)[0]


def expert_predict(expert: ExpertParams, window) -> float:
    window = np.atleast_1d(np.asarray(window, dtype=float))
    if window.shape != (expert.lags,):
        raise DimensionError(f"window of length {window.size}, expert expects {expert.lags}")
    return float(_forward(expert, window[None, :])[0][0])


def gaussian_log_density(residual, sigma):
    """Log density of a centred normal with standard deviation ``sigma``.

    Accepts scalars or arrays.
    """
    residual = np.asarray(residual, dtype=float)
    if not np.all(np.isfinite(residual)):
        raise ValueError("residual must be finite")
    if np.any(np.asarray(sigma) < SIGMA_FLOOR):
        raise ValueError(f"sigma below floor {SIGMA_FLOOR}")
    out = -LOG_SQRT_2PI - np.log(sigma) - residual ** 2 / (2.0 * np.asarray(sigma) ** 2)
    return float(out) if out.ndim == 0 else out


def component_log_joint(model: MixtureModel, X: np.ndarray, y: np.ndarray) -> np.ndarray:
    """``log pi_i + log f_i(y_t - F_i(x_t))`` as an (m, p) matrix."""
    cols = []
    for w, e in zip(model.weights, model.experts):
        resid = y - _forward(e, X)[0]
        cols.append(math.log(w) - LOG_SQRT_2PI - math.log(e.sigma) - resid ** 2 / (2.0 * e.sigma ** 2))
    return np.column_stack(cols)


def conditional_density(model: MixtureModel, window, y: float) -> float:
    window = np.atleast_1d(np.asarray(window, dtype=float))
    if window.shape != (model.lags,):
        raise DimensionError(f"window of length {window.size}, model expects {model.lags}")
    logj = component_log_joint(model, window[None, :], np.array([float(y)]))
    return float(np.exp(logsumexp(logj[0])))


def pointwise_log_likelihood(model: MixtureModel, series: SeriesData) -> np.ndarray:
    X, y = series.windows(model.lags)
    return logsumexp(component_log_joint(model, X, y), axis=1)


def log_likelihood(model: MixtureModel, series: SeriesData) -> float:
    """Sum over admissible t of ``ln g(y_t | window_t)``."""
    return float(pointwise_log_likelihood(model, series).sum())


def weighted_gradient(expert: ExpertParams, X: np.ndarray, y: np.ndarray, r: np.ndarray) -> np.ndarray:
    """Gradient of ``sum_t r_t log f(y_t - F(x_t); sigma)`` in the layout of ``to_vector``."""
    return _gradient_vec(expert.to_vector(), expert.kind, expert.hidden_units, X, y, r)


def responsibility_gradient(expert: ExpertParams, window, y: float, weight: float) -> np.ndarray:
    """``weight * grad_theta log f(y - F_theta(window); sigma)`` for one transition."""
    window = np.atleast_1d(np.asarray(window, dtype=float))
    if window.shape != (expert.lags,):
        raise DimensionError(f"window of length {window.size}, expert expects {expert.lags}")
    if not math.isfinite(weight):
        raise ValueError("weight must be finite")
    return weighted_gradient(expert, window[None, :], np.array([float(y)]), np.array([float(weight)]))


def num_components(model: MixtureModel) -> int:
    """Structural component count.

    Duplicated experts are counted separately; no attempt is made to find a
    smaller representation of the same density.
    """
    return model.p
