"""Multi-start EM estimation of a p-component mixture of experts."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import InsufficientDataError, InvariantError, NumericalError
from .model_core import (
    BOUND,
    ETA,
    LOG_SQRT_2PI,
    SIGMA_FLOOR,
    ExpertKind,
    ExpertParams,
    MixtureModel,
    SeriesData,
    _forward_vec,
    clamp_vector,
    _gradient_vec,
)

log = logging.getLogger(__name__)

RIDGE_JITTER = 1e-8
LINE_SEARCH_START = 0.1
LINE_SEARCH_HALVINGS = 20
LINE_SEARCH_MAX_STEP = 1e3
MLP_INIT_RANGE = 0.7


@dataclass(frozen=True)
class ExpertSpec:
    """Shape of the experts to fit: kind, window length and hidden units."""

    kind: ExpertKind = ExpertKind.LINEAR
    lags: int = 1
    hidden_units: int = 0

    def __post_init__(self):
        kind = ExpertKind(self.kind)
        object.__setattr__(self, "kind", kind)
        if int(self.lags) < 1:
            raise InvariantError("lags must be positive")
        if kind is ExpertKind.LINEAR and self.hidden_units:
            raise InvariantError("linear experts have no hidden units")
        if kind is ExpertKind.MLP and int(self.hidden_units) < 1:
            raise InvariantError("perceptron experts need at least one hidden unit")


@dataclass(frozen=True)
class FitConfig:
    max_em_iterations: int = 200
    rel_tolerance: float = 1e-6
    restarts: int = 10
    eta: float = ETA
    inner_max_iterations: int = 50
    inner_tolerance: float = 1e-8
    master_seed: int = 0

    def __post_init__(self):
        if self.max_em_iterations < 1 or self.restarts < 1 or self.inner_max_iterations < 1:
            raise InvariantError("iteration counts and restarts must be positive")
        if not (self.rel_tolerance > 0 and self.inner_tolerance > 0):
            raise InvariantError("tolerances must be positive")
        if not 0 < self.eta < 1:
            raise InvariantError("eta must lie in (0, 1)")


@dataclass
class FitResult:
    model: MixtureModel
    loglik: float
    em_iterations: int
    converged: bool
    best_restart: int
    loglik_trace: list
    restart_logliks: list = field(default_factory=list)
    ridge_fallbacks: int = 0


def derive_seed(*keys: int) -> int:
    """Hash integer keys into a 64-bit seed; order of keys matters."""
    entropy = [int(k) & (2 ** 64 - 1) for k in keys]
    return int(np.random.SeedSequence(entropy).generate_state(1, np.uint64)[0])


# -- E-step -----------------------------------------------------------------

def _log_joint_vec(thetas, weights, kind, k, X, y):
    logj = np.empty((len(y), len(thetas)))
    for i, theta in enumerate(thetas):
        resid = y - _forward_vec(theta, kind, k, X)[0]
        s = theta[-1]
        logj[:, i] = math.log(weights[i]) - LOG_SQRT_2PI - math.log(s) - resid ** 2 / (2 * s * s)
    return logj


def _posterior_vec(thetas, weights, kind, k, X, y):
    logj = _log_joint_vec(thetas, weights, kind, k, X, y)
    top = logj.max(axis=1, keepdims=True)
    joint = np.exp(logj - top)
    total = joint.sum(axis=1, keepdims=True)
    return joint / total, float(np.sum(top[:, 0] + np.log(total[:, 0])))


def e_step(model: MixtureModel, series: SeriesData) -> np.ndarray:
    """Posterior regime probabilities, one row per transition, one column per expert."""
    X, y = series.windows(model.lags)
    thetas = [e.to_vector() for e in model.experts]
    first = model.experts[0]
    return _posterior_vec(thetas, model.weights, first.kind, first.hidden_units, X, y)[0]


# -- M-step -----------------------------------------------------------------

def m_step_weights(resp, eta: float = ETA) -> np.ndarray:
    """Maximise ``sum_i N_i log pi_i`` over the simplex with ``pi_i >= eta``.

    Components whose unconstrained share falls below ``eta`` are pinned to
    it and the remaining mass is shared in proportion to the column sums.
    """
    counts = np.asarray(resp, dtype=float).sum(axis=0)
    p = counts.size
    if not eta * p < 1:
        raise InvariantError(f"eta={eta} infeasible for {p} components")
    pinned = np.zeros(p, dtype=bool)
    while True:
        free_mass = 1.0 - eta * pinned.sum()
        free_total = counts[~pinned].sum()
        pi = np.full(p, eta)
        if free_total > 0:
            pi[~pinned] = free_mass * counts[~pinned] / free_total
        else:
            pi[~pinned] = free_mass / (~pinned).sum()
        low = (~pinned) & (pi < eta)
        if not low.any():
            return pi / pi.sum()
        pinned |= low


def _weighted_ls_batch(A, y, R):
    """Weighted least squares of y on the columns of A, one fit per column of R.

    Returns ``(coefs, sigmas, ridge_count)`` with ``coefs`` of shape (p, d).
    """
    M = np.einsum("ti,tj,tk->kij", A, A, R)
    rhs = (A * y[:, None]).T @ R
    eig = np.linalg.eigvalsh(M)
    singular = ~(eig[:, 0] > 1e-12 * np.abs(eig[:, -1]))
    if singular.any():
        M = M + RIDGE_JITTER * singular[:, None, None] * np.eye(A.shape[1])
    coefs = np.clip(np.linalg.solve(M, rhs.T[:, :, None])[:, :, 0], -BOUND, BOUND)
    resid = y[:, None] - A @ coefs.T
    var = np.sum(R * resid ** 2, axis=0) / R.sum(axis=0)
    sigmas = np.clip(np.sqrt(np.maximum(var, 0.0)), SIGMA_FLOOR, BOUND)
    return coefs, sigmas, int(singular.sum())


def _weighted_ls(X, y, r):
    """Weighted least squares of y on [X, 1]; returns (coef, sigma, used_ridge)."""
    A = np.column_stack([X, np.ones(len(y))])
    coefs, sigmas, ridge = _weighted_ls_batch(A, y, np.asarray(r, dtype=float)[:, None])
    return coefs[0], float(sigmas[0]), bool(ridge)


def m_step_linear(series: SeriesData, column, lags: int) -> ExpertParams:
    """Exact weighted-Gaussian maximiser for a linear expert."""
    X, y = series.windows(lags)
    column = np.asarray(column, dtype=float)
    if column.shape != y.shape:
        raise InvariantError(f"weights of length {column.size}, expected {y.size}")
    if not column.sum() > 0:
        raise InvariantError("responsibility column must have positive mass")
    coef, sigma, used_ridge = _weighted_ls(X, y, column)
    if used_ridge:
        log.debug("singular normal equations; ridge jitter %g applied", RIDGE_JITTER)
    return ExpertParams.linear(coef[:-1], coef[-1], sigma)


def _weighted_loglik_vec(theta, kind, k, X, y, r) -> float:
    resid = y - _forward_vec(theta, kind, k, X)[0]
    s = float(theta[-1])
    return -(LOG_SQRT_2PI + math.log(s)) * float(r.sum()) - float(np.dot(r, resid * resid)) / (2 * s * s)


def weighted_expert_loglik(expert: ExpertParams, series: SeriesData, column) -> float:
    """``sum_t r_t log f(y_t - F(window_t); sigma)`` for one expert."""
    X, y = series.windows(expert.lags)
    return _weighted_loglik_vec(expert.to_vector(), expert.kind, expert.hidden_units, X, y,
                                np.asarray(column, dtype=float))


def _m_step_mlp(X, y, r, start: ExpertParams, cfg: FitConfig) -> ExpertParams:
    kind, k = start.kind, start.hidden_units
    total = float(r.sum())
    theta = start.to_vector().copy()
    q = _weighted_loglik_vec(theta, kind, k, X, y, r)
    step = LINE_SEARCH_START

    def improves(q_new, q_old):
        # margin keeps rounding noise at a stationary point from moving the expert
        return q_new > q_old + 1e-13 * max(1.0, abs(q_old))

    for _ in range(cfg.inner_max_iterations):
        q_iter = q

        resid = y - _forward_vec(theta, kind, k, X)[0]
        trial = theta.copy()
        trial[-1] = min(max(math.sqrt(float(np.dot(r, resid * resid)) / total), SIGMA_FLOOR), BOUND)
        q_trial = _weighted_loglik_vec(trial, kind, k, X, y, r)
        if improves(q_trial, q):
            theta, q = trial, q_trial

        direction = _gradient_vec(theta, kind, k, X, y, r) * (theta[-1] ** 2 / total)
        direction[-1] = 0.0
        if not np.any(direction):
            break
        accepted = False
        for _ in range(LINE_SEARCH_HALVINGS + 1):
            trial = clamp_vector(theta + step * direction)
            q_trial = _weighted_loglik_vec(trial, kind, k, X, y, r)
            if np.isfinite(q_trial) and improves(q_trial, q):
                theta, q = trial, q_trial
                accepted = True
                break
            step *= 0.5
        if not accepted:
            break
        step = min(2.0 * step, LINE_SEARCH_MAX_STEP)
        if q - q_iter <= cfg.inner_tolerance * max(1.0, abs(q_iter)):
            break
    if np.array_equal(theta, start.to_vector()):
        return start
    return start.with_vector(theta)


def m_step_mlp(series: SeriesData, column, start: ExpertParams, cfg: FitConfig = FitConfig()) -> ExpertParams:
    """Ascend the weighted Gaussian log-likelihood of one perceptron expert.

    Alternates a closed-form noise-scale update with a backtracking gradient
    step on the mean-function weights; only improving moves are accepted.
    """
    X, y = series.windows(start.lags)
    column = np.asarray(column, dtype=float)
    if column.shape != y.shape:
        raise InvariantError(f"weights of length {column.size}, expected {y.size}")
    if not column.sum() > 0:
        raise InvariantError("responsibility column must have positive mass")
    return _m_step_mlp(X, y, column, start, cfg)


# -- initialisation and the EM loop -----------------------------------------

def initialize(series: SeriesData, p: int, spec: ExpertSpec, seed: int) -> MixtureModel:
    """Random starting mixture with uniform weights."""
    if p < 1:
        raise InvariantError("p must be at least 1")
    X, y = series.windows(spec.lags)
    coef, sigma, _ = _weighted_ls(X, y, np.ones(len(y)))
    rng = np.random.default_rng(int(seed) & (2 ** 64 - 1))
    experts = []
    for _ in range(p):
        if spec.kind is ExpertKind.LINEAR:
            jittered = coef + rng.normal(size=coef.size) * (0.5 * np.abs(coef) + 0.1)
            experts.append(ExpertParams.linear(np.clip(jittered[:-1], -BOUND, BOUND),
                                               np.clip(jittered[-1], -BOUND, BOUND), sigma))
        else:
            k, l = spec.hidden_units, spec.lags
            w = rng.uniform(-MLP_INIT_RANGE, MLP_INIT_RANGE, size=1 + 2 * k + k * l)
            experts.append(ExpertParams.mlp(w[0], w[1:1 + k], w[1 + k:1 + 2 * k],
                                            w[1 + 2 * k:].reshape(k, l), sigma))
    return MixtureModel(tuple(experts), np.full(p, 1.0 / p))


def _run_chain(X, y, model: MixtureModel, cfg: FitConfig):
    """One EM chain on raw parameter vectors; returns the final model and diagnostics."""
    template = model.experts[0]
    kind, k = template.kind, template.hidden_units
    thetas = [e.to_vector() for e in model.experts]
    weights = model.weights.copy()
    A = np.column_stack([X, np.ones(len(y))]) if kind is ExpertKind.LINEAR else None

    resp, ll = _posterior_vec(thetas, weights, kind, k, X, y)
    trace = [ll]
    converged = False
    ridge = 0
    iterations = 0
    for _ in range(cfg.max_em_iterations):
        iterations += 1
        weights = m_step_weights(resp, cfg.eta)
        live = resp.sum(axis=0) > 1e-300
        if kind is ExpertKind.LINEAR:
            if live.any():
                coefs, sigmas, used = _weighted_ls_batch(A, y, resp[:, live])
                ridge += used
                for j, i in enumerate(np.flatnonzero(live)):
                    thetas[i] = np.append(coefs[j], sigmas[j])
        else:
            for i in np.flatnonzero(live):
                start = template.with_vector(thetas[i])
                thetas[i] = _m_step_mlp(X, y, resp[:, i], start, cfg).to_vector()
        resp, ll_new = _posterior_vec(thetas, weights, kind, k, X, y)
        if not math.isfinite(ll_new):
            raise NumericalError("log-likelihood became non-finite")
        trace.append(ll_new)
        improvement = ll_new - ll
        ll = ll_new
        if improvement < cfg.rel_tolerance * abs(trace[-2]):
            converged = True
            break
    model = MixtureModel(tuple(template.with_vector(t) for t in thetas), weights)
    return model, trace, converged, iterations, ridge


def em_run(series: SeriesData, p: int, spec: ExpertSpec, cfg: FitConfig = FitConfig()) -> FitResult:
    """Best of ``cfg.restarts`` independent EM chains.

    Restart ``i`` is seeded with ``derive_seed(cfg.master_seed, i)`` so each
    chain is reproducible on its own.
    """
    if p < 1:
        raise InvariantError("p must be at least 1")
    if len(series) < spec.lags + p + 1:
        raise InsufficientDataError(
            f"series of length {len(series)} too short for p={p} with {spec.lags} lags")
    if not cfg.eta * p < 1:
        raise InvariantError(f"eta={cfg.eta} infeasible for p={p}")
    X, y = series.windows(spec.lags)
    best = None
    restart_logliks = []
    failures = []
    for i in range(cfg.restarts):
        start = initialize(series, p, spec, derive_seed(cfg.master_seed, i))
        try:
            with np.errstate(over="raise", invalid="raise", divide="raise"):
                model, trace, converged, iters, ridge = _run_chain(X, y, start, cfg)
        except (ArithmeticError, FloatingPointError, InvariantError, np.linalg.LinAlgError) as exc:
            log.warning("restart %d failed: %s", i, exc)
            failures.append(exc)
            restart_logliks.append(float("nan"))
            continue
        restart_logliks.append(trace[-1])
        if best is None or trace[-1] > best.loglik:
            best = FitResult(model=model, loglik=trace[-1], em_iterations=iters,
                             converged=converged, best_restart=i, loglik_trace=trace,
                             ridge_fallbacks=ridge)
    if best is None:
        raise NumericalError(f"all {cfg.restarts} restarts failed; last error: {failures[-1]}")
    best.restart_logliks = restart_logliks
    return best
