"""Command-line entry point: ``mixar <subcommand> ...``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from .em_fit import ExpertSpec, FitConfig, em_run
from .errors import (
    DivergenceError,
    IngestionError,
    InsufficientDataError,
    InvariantError,
    MixarError,
    NumericalError,
    SchemaError,
)
from .experiments import (
    FULL_LASER_RESTARTS,
    GridConfig,
    LaserConfig,
    Normalization,
    order_report,
    read_series,
    render_report,
    run_laser,
    run_linear_grid,
    write_series,
)
from .model_core import ExpertKind
from .persistence import RunManifest, _now, model_from_dict, save_model
from .selection import PenaltySpec, SelectionError, select_order
from .simulator import DEFAULT_BURN_IN, GenerativeSpec, simulate

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _add_expert_flags(p):
    p.add_argument("--kind", choices=["linear", "mlp"], default="linear")
    p.add_argument("--lags", type=int, default=1)
    p.add_argument("--hidden", type=int, default=0, help="hidden units (mlp only)")


def _add_fit_flags(p):
    d = FitConfig()
    p.add_argument("--seed", type=int, default=d.master_seed, help="master seed")
    p.add_argument("--restarts", type=int, default=d.restarts)
    p.add_argument("--max-iter", type=int, default=d.max_em_iterations)
    p.add_argument("--tol", type=float, default=d.rel_tolerance)
    p.add_argument("--eta", type=float, default=d.eta)
    p.add_argument("--inner-max-iter", type=int, default=d.inner_max_iterations)
    p.add_argument("--inner-tol", type=float, default=d.inner_tolerance)


def _fit_config(args) -> FitConfig:
    return FitConfig(max_em_iterations=args.max_iter, rel_tolerance=args.tol, restarts=args.restarts,
                     eta=args.eta, inner_max_iterations=args.inner_max_iter,
                     inner_tolerance=args.inner_tol, master_seed=args.seed)


def _expert_spec(args) -> ExpertSpec:
    try:
        hidden = args.hidden if args.kind == "mlp" else 0
        return ExpertSpec(ExpertKind(args.kind), args.lags, hidden)
    except InvariantError as exc:
        raise UsageError(str(exc)) from None


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="mixar", allow_abbrev=False,
                     description="Estimate the number of experts in a mixture of autoregressive models.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("simulate", allow_abbrev=False, help="sample a series from a model file")
    p.add_argument("--spec", required=True, help="JSON model file, optionally wrapped with "
                                                 "initial_window and burn_in")
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--hidden-out", help="write the regime path (1-based) here")

    p = sub.add_parser("fit", allow_abbrev=False, help="fit a p-component mixture by EM")
    p.add_argument("--data", required=True)
    p.add_argument("--p", type=int, required=True)
    _add_expert_flags(p)
    _add_fit_flags(p)
    p.add_argument("--out", required=True, help="model file to write")

    p = sub.add_parser("select", allow_abbrev=False, help="choose the number of experts")
    p.add_argument("--data", required=True)
    p.add_argument("--pmax", type=int, required=True)
    _add_expert_flags(p)
    _add_fit_flags(p)
    p.add_argument("--penalty", choices=["per-component", "per-parameter"], default="per-component")
    p.add_argument("--report", required=True)
    p.add_argument("--format", choices=["csv", "md"], default="csv")

    p = sub.add_parser("grid", allow_abbrev=False, help="run the linear-mixture selection grid")
    p.add_argument("--full", action="store_true", help="all nine (a1, a2) pairs")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--report", required=True)
    p.add_argument("--format", choices=["csv", "md"], default="csv")
    p.add_argument("--replications", type=int)
    p.add_argument("--n-values", type=lambda s: tuple(int(v) for v in s.split(",")),
                   help="comma-separated series lengths")
    p.add_argument("--pi1-values", type=lambda s: tuple(float(v) for v in s.split(",")))
    p.add_argument("--restarts", type=int)
    p.add_argument("--penalty", choices=["per-component", "per-parameter"], default="per-parameter")
    p.add_argument("--workers", type=int, help="process count (default: MIXAR_THREADS)")

    p = sub.add_parser("laser", allow_abbrev=False, help="perceptron-expert study of a data file")
    p.add_argument("--data", required=True)
    p.add_argument("--paper-scale", action="store_true", help=f"{FULL_LASER_RESTARTS} restarts")
    p.add_argument("--no-normalize", action="store_true")
    p.add_argument("--report", required=True)
    p.add_argument("--format", choices=["csv", "md"], default="csv")
    p.add_argument("--restarts", type=int, default=10)
    p.add_argument("--lags", type=int, default=10)
    p.add_argument("--hidden", type=int, default=5)
    p.add_argument("--pmax", type=int, default=3)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--penalty", choices=["per-component", "per-parameter"], default="per-parameter")
    return parser


def _write_report(command, text, path, config, seed, started):
    Path(path).write_text(text)
    RunManifest.create(command, config, seed, started).write_next_to(path)


def _cmd_simulate(args):
    path = Path(args.spec)
    try:
        raw = json.loads(path.read_text())
    except OSError as exc:
        raise IngestionError(f"cannot read {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise SchemaError("$", f"invalid JSON at line {exc.lineno}: {exc.msg}") from None
    wrapped = isinstance(raw, dict) and "model" in raw
    model = model_from_dict(raw["model"] if wrapped else raw)
    spec = GenerativeSpec(model, raw.get("initial_window") if wrapped else None,
                          raw.get("burn_in", DEFAULT_BURN_IN) if wrapped else DEFAULT_BURN_IN)
    if args.n < 1:
        raise UsageError("--n must be positive")
    out = simulate(spec, args.n, args.seed)
    write_series(out.series, args.out)
    if args.hidden_out:
        Path(args.hidden_out).write_text("".join(f"{int(x)}\n" for x in out.hidden_path))


def _cmd_fit(args):
    series = read_series(args.data)
    if args.p < 1:
        raise UsageError("--p must be positive")
    result = em_run(series, args.p, _expert_spec(args), _fit_config(args))
    save_model(result.model, args.out)
    print(f"loglik {result.loglik!r} iterations {result.em_iterations} "
          f"converged {result.converged} restart {result.best_restart}")


def _cmd_select(args):
    started = _now()
    series = read_series(args.data)
    if args.pmax < 1:
        raise UsageError("--pmax must be positive")
    spec, cfg = _expert_spec(args), _fit_config(args)
    pen = PenaltySpec.parse(args.penalty)
    result = select_order(series, args.pmax, spec, cfg, pen)
    text = render_report(order_report(result, len(series)), args.format)
    config = {"data": str(args.data), "pmax": args.pmax, "expert": spec, "fit": cfg, "penalty": pen}
    _write_report("select", text, args.report, config, cfg.master_seed, started)
    print(f"chosen {result.chosen}")


def _cmd_grid(args):
    started = _now()
    overrides = {"master_seed": args.seed, "penalty": PenaltySpec.parse(args.penalty)}
    if args.replications is not None:
        overrides["replications"] = args.replications
    if args.n_values:
        overrides["n_values"] = args.n_values
    if args.pi1_values:
        overrides["pi1_values"] = args.pi1_values
    cfg = GridConfig.full(**overrides) if args.full else GridConfig(**overrides)
    if args.restarts is not None:
        cfg = replace(cfg, fit=replace(cfg.fit, restarts=args.restarts))
    report = run_linear_grid(cfg, workers=args.workers)
    _write_report("grid", render_report(report, args.format), args.report, cfg, cfg.master_seed, started)


def _cmd_laser(args):
    started = _now()
    restarts = FULL_LASER_RESTARTS if args.paper_scale else args.restarts
    cfg = LaserConfig(
        data_path=args.data, lags=args.lags, hidden_units=args.hidden, P=args.pmax, restarts=restarts,
        normalization=Normalization.NONE if args.no_normalize else Normalization.STANDARDIZE,
        penalty=PenaltySpec.parse(args.penalty), fit=FitConfig(master_seed=args.seed, restarts=restarts),
    )
    report = run_laser(cfg)
    _write_report("laser", render_report(report, args.format), args.report, cfg, args.seed, started)
    print(f"chosen {report.chosen}")


_COMMANDS = {"simulate": _cmd_simulate, "fit": _cmd_fit, "select": _cmd_select,
             "grid": _cmd_grid, "laser": _cmd_laser}


def _exit_code(exc) -> int:
    if isinstance(exc, SelectionError):
        exc = exc.__cause__ or exc
    if isinstance(exc, (NumericalError, DivergenceError, ArithmeticError, np.linalg.LinAlgError)):
        return EXIT_NUMERIC
    return EXIT_DATA


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(f"ERROR {EXIT_USAGE}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        _COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"ERROR {EXIT_USAGE}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (MixarError, InsufficientDataError, OSError) as exc:
        code = _exit_code(exc)
        print(f"ERROR {code}: {' '.join(str(exc).split())}", file=sys.stderr)
        return code
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
