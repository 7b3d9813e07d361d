"""Sampling from a mixture of autoregressive experts with iid regimes."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DivergenceError, InvariantError
from .model_core import ExpertKind, MixtureModel, SeriesData, _forward

DEFAULT_BURN_IN = 100


@dataclass(frozen=True)
class GenerativeSpec:
    truth: MixtureModel
    initial_window: np.ndarray = None
    burn_in: int = DEFAULT_BURN_IN

    def __post_init__(self):
        if not isinstance(self.truth, MixtureModel):
            raise InvariantError("truth must be a MixtureModel")
        window = self.initial_window
        if window is None:
            window = np.zeros(self.truth.lags)
        window = np.array(window, dtype=float).ravel()
        if window.size != self.truth.lags or not np.all(np.isfinite(window)):
            raise InvariantError(f"initial_window must hold {self.truth.lags} finite values")
        if int(self.burn_in) < 0:
            raise InvariantError("burn_in must be non-negative")
        window.setflags(write=False)
        object.__setattr__(self, "initial_window", window)
        object.__setattr__(self, "burn_in", int(self.burn_in))


@dataclass(frozen=True)
class SimulationOutput:
    series: SeriesData
    hidden_path: np.ndarray = field(repr=False)  # regimes in 1..p


@dataclass(frozen=True)
class HSCheck:
    sum: float
    passed: bool


def check_hs(spec: GenerativeSpec, s: float = 1.0) -> HSCheck:
    """Sufficient stationarity check ``sum_i pi_i |a_i|^s < 1``.

    For a linear expert ``|a_i|`` is the sum of absolute lag coefficients;
    perceptron experts are bounded and contribute zero.
    """
    if not s > 0:
        raise ValueError("s must be positive")
    total = 0.0
    for w, e in zip(spec.truth.weights, spec.truth.experts):
        if e.kind is ExpertKind.LINEAR:
            total += w * float(np.sum(np.abs(e.linear_a))) ** s
    return HSCheck(sum=float(total), passed=bool(total < 1.0))


def simulate(spec: GenerativeSpec, n: int, seed: int, *, zero_noise: bool = False) -> SimulationOutput:
    """Draw ``n`` observations after discarding ``spec.burn_in`` samples.

    Regimes and innovations come from two independent Philox streams keyed
    on ``seed``, so the output depends only on ``(spec, n, seed)``.
    ``zero_noise`` is a test hook that suppresses the innovations.
    """
    if n < 1:
        raise ValueError("n must be at least 1")
    model = spec.truth
    total = spec.burn_in + n
    regime_ss, noise_ss = np.random.SeedSequence(int(seed) & (2 ** 64 - 1)).spawn(2)
    u = np.random.Generator(np.random.Philox(regime_ss)).random(total)
    z = np.random.Generator(np.random.Philox(noise_ss)).standard_normal(total)
    if zero_noise:
        z[:] = 0.0

    regimes = np.searchsorted(np.cumsum(model.weights), u, side="right")
    np.minimum(regimes, model.p - 1, out=regimes)
    sigmas = np.array([e.sigma for e in model.experts])

    l = model.lags
    buf = np.empty(l + total)
    buf[:l] = spec.initial_window
    with np.errstate(over="ignore", invalid="ignore"):
        for t in range(total):
            e = model.experts[regimes[t]]
            window = buf[t:t + l]
            if e.kind is ExpertKind.LINEAR:
                mean = float(window @ e.linear_a) + e.linear_b
            else:
                mean = float(_forward(e, window[None, :])[0][0])
            y = mean + sigmas[regimes[t]] * z[t]
            if not np.isfinite(y):
                raise DivergenceError(
                    t, f"non-finite value at step {t} (steps counted from the start of burn-in)")
            buf[l + t] = y
    values = buf[l + spec.burn_in:]
    return SimulationOutput(series=SeriesData(values), hidden_path=regimes[spec.burn_in:] + 1)
