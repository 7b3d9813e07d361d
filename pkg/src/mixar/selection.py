"""Penalised-likelihood choice of the number of experts."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from enum import Enum

from .em_fit import ExpertSpec, FitConfig, FitResult, em_run
from .errors import MixarError
from .model_core import SeriesData, expert_dim

log = logging.getLogger(__name__)


class PenaltySpec(str, Enum):
    BIC_PER_COMPONENT = "bic_per_component"
    BIC_PER_PARAMETER = "bic_per_parameter"

    @classmethod
    def parse(cls, value) -> "PenaltySpec":
        aliases = {"per-component": cls.BIC_PER_COMPONENT, "per-parameter": cls.BIC_PER_PARAMETER}
        if isinstance(value, str) and value in aliases:
            return aliases[value]
        return cls(value)


def penalty(spec: PenaltySpec, p: int, n: int, expert_dim: int = 0) -> float:
    """BIC-type penalty ``a_n(p)``.

    ``bic_per_component`` is ``p ln(n) / 2``; ``bic_per_parameter`` counts
    every free parameter, ``p * expert_dim + (p - 1)`` mixing weights included.
    """
    if p < 1 or n < 2:
        raise ValueError("penalty needs p >= 1 and n >= 2")
    spec = PenaltySpec.parse(spec)
    if spec is PenaltySpec.BIC_PER_COMPONENT:
        return 0.5 * p * math.log(n)
    return 0.5 * (p * expert_dim + p - 1) * math.log(n)


@dataclass
class OrderFit:
    p: int
    loglik: float
    penalty: float
    criterion: float
    fit: FitResult


@dataclass
class SelectionResult:
    per_p: list
    chosen: int

    @property
    def criteria(self):
        return [row.criterion for row in self.per_p]


class SelectionError(MixarError):
    def __init__(self, p, cause):
        self.p = p
        super().__init__(f"fit with p={p} failed: {cause}")


def choose(criteria) -> int:
    """1-based index of the largest criterion; ties go to the smallest p."""
    best = 0
    for i, c in enumerate(criteria):
        if c > criteria[best]:
            best = i
    return best + 1


def select_order(series: SeriesData, P: int, spec: ExpertSpec, cfg: FitConfig = FitConfig(),
                 pen: PenaltySpec = PenaltySpec.BIC_PER_COMPONENT) -> SelectionResult:
    """Fit p = 1..P experts and keep the p maximising ``loglik - penalty``."""
    if P < 1:
        raise ValueError("P must be at least 1")
    n = len(series)
    dim = expert_dim(spec.kind, spec.lags, spec.hidden_units)
    rows = []
    for p in range(1, P + 1):
        try:
            fit = em_run(series, p, spec, cfg)
        except MixarError as exc:
            raise SelectionError(p, exc) from exc
        pen_p = penalty(pen, p, n, dim)
        rows.append(OrderFit(p, fit.loglik, pen_p, fit.loglik - pen_p, fit))
    for a, b in zip(rows, rows[1:]):
        if b.loglik < a.loglik - 1e-6 * abs(a.loglik):
            log.warning("loglik decreased from p=%d to p=%d (EM local maximum)", a.p, b.p)
    return SelectionResult(per_p=rows, chosen=choose([r.criterion for r in rows]))
