"""Batch harnesses: the linear-mixture selection grid and the laser study."""

from __future__ import annotations

import csv
import io
import itertools
import logging
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from enum import Enum
from pathlib import Path

import numpy as np

from .em_fit import ExpertSpec, FitConfig, derive_seed
from .errors import IngestionError, MixarError
from .model_core import ExpertKind, ExpertParams, MixtureModel, SeriesData
from .selection import PenaltySpec, SelectionResult, select_order
from .simulator import GenerativeSpec, simulate

log = logging.getLogger(__name__)

FULL_LASER_RESTARTS = 100
_GRID_A_VALUES = (0.1, 0.5, 0.9)


def resolve_workers(workers=None) -> int:
    """Worker count from the argument or ``MIXAR_THREADS`` (0 means one per CPU)."""
    if workers is None:
        try:
            workers = int(os.environ.get("MIXAR_THREADS", "0"))
        except ValueError:
            workers = 0
    if workers <= 0:
        workers = os.cpu_count() or 1
    return workers


def _map(fn, jobs, workers):
    if workers <= 1 or len(jobs) <= 1:
        return [fn(job) for job in jobs]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, jobs))


# -- data ingestion ------------------------------------------------------------

def read_series(path) -> SeriesData:
    """Read one number per line; blank lines are skipped."""
    path = Path(path)
    try:
        text = path.read_text()
    except (OSError, UnicodeDecodeError) as exc:
        raise IngestionError(f"cannot read {path}: {exc}") from exc
    values = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.strip()
        if not line:
            continue
        try:
            value = float(line)
        except ValueError:
            raise IngestionError(f"not a number: {line!r}", line=lineno) from None
        if not np.isfinite(value):
            raise IngestionError(f"non-finite value {line!r}", line=lineno)
        values.append(value)
    if not values:
        raise IngestionError(f"{path} holds no data")
    return SeriesData(np.array(values))


def write_series(series: SeriesData, path) -> None:
    Path(path).write_text("".join(f"{v!r}\n" for v in series.values.tolist()))


# -- the linear grid -------------------------------------------------------------

@dataclass(frozen=True)
class GridConfig:
    pi1_values: tuple = (0.5, 0.7, 0.9)
    a_pairs: tuple = ((0.1, 0.1), (0.1, 0.5), (0.1, 0.9))
    b_pair: tuple = (0.5, -0.5)
    sigma: float = 0.5
    n_values: tuple = (200, 500, 1000, 1500, 2000)
    replications: int = 20
    P: int = 3
    master_seed: int = 0
    penalty: PenaltySpec = PenaltySpec.BIC_PER_PARAMETER
    fit: FitConfig = field(default_factory=FitConfig)

    def __post_init__(self):
        if self.replications < 1 or self.P < 1:
            raise ValueError("replications and P must be positive")
        if any(not 0 < pi < 1 for pi in self.pi1_values):
            raise ValueError("pi1 values must lie in (0, 1)")
        if any(n < 4 for n in self.n_values):
            raise ValueError("series lengths must be at least 4")
        object.__setattr__(self, "penalty", PenaltySpec.parse(self.penalty))

    @classmethod
    def full(cls, **overrides) -> "GridConfig":
        """All nine (a1, a2) pairs over {0.1, 0.5, 0.9}."""
        pairs = tuple(itertools.product(_GRID_A_VALUES, repeat=2))
        return cls(a_pairs=pairs, **overrides)

    def truth(self, pi1: float, a_pair) -> MixtureModel:
        experts = tuple(ExpertParams.linear([a], b, self.sigma) for a, b in zip(a_pair, self.b_pair))
        return MixtureModel(experts, [pi1, 1.0 - pi1])

    def cells(self):
        """Yield ``((pi_idx, a_idx, n_idx), (pi1, a1, a2, n))`` in report order."""
        for a_idx, (a1, a2) in enumerate(self.a_pairs):
            for n_idx, n in enumerate(self.n_values):
                for pi_idx, pi1 in enumerate(self.pi1_values):
                    yield (pi_idx, a_idx, n_idx), (pi1, a1, a2, n)


@dataclass
class GridReport:
    P: int
    cells: dict  # (pi1, a1, a2, n) -> list of counts for p_hat = 1..P
    failures: dict = field(default_factory=dict)


def _grid_job(job):
    cfg, (pi_idx, a_idx, n_idx), (pi1, a1, a2, n), rep = job
    seed = derive_seed(cfg.master_seed, pi_idx, a_idx, n_idx, rep)
    try:
        series = simulate(GenerativeSpec(cfg.truth(pi1, (a1, a2))), n, seed).series
        fit_cfg = replace(cfg.fit, master_seed=seed)
        return select_order(series, cfg.P, ExpertSpec(ExpertKind.LINEAR, 1), fit_cfg, cfg.penalty).chosen
    except MixarError as exc:
        log.warning("cell (%s, %s, %s, %s) replication %d failed: %s", pi1, a1, a2, n, rep, exc)
        return None


def run_linear_grid(cfg: GridConfig = GridConfig(), workers=None) -> GridReport:
    """Tally the selected order over replicated simulations for every grid cell."""
    jobs = [(cfg, idx, cell, rep) for idx, cell in cfg.cells() for rep in range(cfg.replications)]
    chosen = _map(_grid_job, jobs, resolve_workers(workers))
    report = GridReport(P=cfg.P, cells={})
    for (_, _, cell, _), p_hat in zip(jobs, chosen):
        counts = report.cells.setdefault(cell, [0] * cfg.P)
        if p_hat is None:
            report.failures[cell] = report.failures.get(cell, 0) + 1
        else:
            counts[p_hat - 1] += 1
    return report


# -- order-selection reports (laser and single series) -----------------------------

class Normalization(str, Enum):
    STANDARDIZE = "standardize"
    NONE = "none"


@dataclass(frozen=True)
class LaserConfig:
    data_path: str
    lags: int = 10
    hidden_units: int = 5
    P: int = 3
    restarts: int = 10
    normalization: Normalization = Normalization.STANDARDIZE
    penalty: PenaltySpec = PenaltySpec.BIC_PER_PARAMETER
    fit: FitConfig = field(default_factory=FitConfig)

    def __post_init__(self):
        if self.lags < 1 or self.hidden_units < 0:
            raise ValueError("lags must be >= 1 and hidden_units >= 0")
        object.__setattr__(self, "normalization", Normalization(self.normalization))
        object.__setattr__(self, "penalty", PenaltySpec.parse(self.penalty))


@dataclass
class OrderRow:
    p: int
    loglik: float
    penalty: float
    criterion: float
    weights: tuple


@dataclass
class OrderReport:
    rows: list
    chosen: int
    n: int


def order_report(result: SelectionResult, n: int) -> OrderReport:
    rows = [OrderRow(r.p, r.loglik, r.penalty, r.criterion,
                     tuple(r.fit.model.canonical().weights.tolist())) for r in result.per_p]
    return OrderReport(rows=rows, chosen=result.chosen, n=n)


def standardize(series: SeriesData) -> SeriesData:
    v = series.values
    sd = v.std()
    return SeriesData((v - v.mean()) / sd if sd > 0 else v - v.mean())


def run_laser(cfg: LaserConfig) -> OrderReport:
    """Select the number of perceptron experts for a series read from disk."""
    series = read_series(cfg.data_path)
    if len(series) < cfg.lags + 2:
        raise IngestionError(f"{len(series)} values; at least {cfg.lags + 2} needed for {cfg.lags} lags")
    if cfg.normalization is Normalization.STANDARDIZE:
        series = standardize(series)
    if cfg.hidden_units == 0:
        spec = ExpertSpec(ExpertKind.LINEAR, cfg.lags)
    else:
        spec = ExpertSpec(ExpertKind.MLP, cfg.lags, cfg.hidden_units)
    fit_cfg = replace(cfg.fit, restarts=cfg.restarts)
    return order_report(select_order(series, cfg.P, spec, fit_cfg, cfg.penalty), len(series))


# -- rendering -------------------------------------------------------------------

def _num(x) -> str:
    return repr(float(x)) if isinstance(x, (float, np.floating)) else str(x)


def _csv(header, rows) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    writer.writerows(rows)
    return buf.getvalue()


def _grid_markdown(report: GridReport) -> str:
    pis = sorted({c[0] for c in report.cells})
    header = ["a1", "a2", "n"] + [f"pi1={pi:g} p={p}" for pi in pis for p in range(1, report.P + 1)]
    lines = ["| " + " | ".join(header) + " |", "|" + "---|" * len(header)]
    blocks = {}
    for (pi1, a1, a2, n), counts in report.cells.items():
        blocks.setdefault((a1, a2, n), {})[pi1] = counts
    for (a1, a2, n), by_pi in blocks.items():
        row = [f"{a1:g}", f"{a2:g}", str(n)]
        for pi in pis:
            row += [str(c) for c in by_pi.get(pi, [""] * report.P)]
        lines.append("| " + " | ".join(row) + " |")
    return "\n".join(lines) + "\n"


def render_report(report, fmt: str = "csv") -> str:
    """Render a grid or order-selection report as CSV or Markdown text."""
    if fmt in ("md", "markdown"):
        fmt = "markdown"
    elif fmt != "csv":
        raise ValueError(f"unknown report format {fmt!r}")
    if isinstance(report, GridReport):
        if fmt == "markdown":
            return _grid_markdown(report)
        header = ["pi1", "a1", "a2", "n"] + [f"count_p{p}" for p in range(1, report.P + 1)]
        rows = [[_num(pi1), _num(a1), _num(a2), n, *counts]
                for (pi1, a1, a2, n), counts in report.cells.items()]
        return _csv(header, rows)
    if isinstance(report, OrderReport):
        if fmt == "csv":
            rows = [[r.p, _num(r.loglik), _num(r.penalty), _num(r.criterion),
                     ";".join(_num(w) for w in r.weights), int(r.p == report.chosen)]
                    for r in report.rows]
            return _csv(["p", "loglik", "penalty", "criterion", "weights", "chosen"], rows)
        lines = ["| experts | loglik | penalty | criterion | mixture probabilities |",
                 "|---|---|---|---|---|"]
        for r in report.rows:
            mark = " *" if r.p == report.chosen else ""
            probs = "(" + ", ".join(f"{w:.3f}" for w in r.weights) + ")"
            lines.append(f"| {r.p}{mark} | {r.loglik:.4f} | {r.penalty:.4f} | {r.criterion:.4f} | {probs} |")
        lines.append("")
        lines.append(f"chosen: {report.chosen} (n = {report.n})")
        return "\n".join(lines) + "\n"
    raise TypeError(f"cannot render {type(report).__name__}")
