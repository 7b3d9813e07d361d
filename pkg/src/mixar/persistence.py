"""JSON model files and run manifests."""

from __future__ import annotations

import datetime as _dt
import hashlib
import json
from dataclasses import asdict, dataclass, is_dataclass
from enum import Enum
from pathlib import Path

import numpy as np

from . import __version__
from .errors import IngestionError, InvariantError, SchemaError
from .model_core import ExpertKind, ExpertParams, MixtureModel

FORMAT_TAG = "mixar-model"
FORMAT_VERSION = 1


def _dump(obj, indent=0) -> str:
    """JSON text with every float written to 17 significant digits."""
    pad = "  " * (indent + 1)
    end = "  " * indent
    if isinstance(obj, dict):
        if not obj:
            return "{}"
        items = [f"{pad}{json.dumps(str(k))}: {_dump(v, indent + 1)}" for k, v in obj.items()]
        return "{\n" + ",\n".join(items) + "\n" + end + "}"
    if isinstance(obj, (list, tuple)):
        if all(not isinstance(v, (dict, list, tuple)) for v in obj):
            return "[" + ", ".join(_dump(v) for v in obj) + "]"
        return "[\n" + ",\n".join(pad + _dump(v, indent + 1) for v in obj) + "\n" + end + "]"
    if isinstance(obj, bool) or obj is None:
        return json.dumps(obj)
    if isinstance(obj, (int, np.integer)):
        return str(int(obj))
    if isinstance(obj, (float, np.floating)):
        x = float(obj)
        if not np.isfinite(x):
            raise ValueError("cannot serialise non-finite value")
        text = format(x, ".17g")
        if not any(c in text for c in ".en"):
            text += ".0"
        return text
    return json.dumps(obj)


def model_to_dict(model: MixtureModel) -> dict:
    experts = []
    for e in model.experts:
        if e.kind is ExpertKind.LINEAR:
            experts.append({"kind": "linear", "lags": e.lags, "linear_a": e.linear_a.tolist(),
                            "linear_b": e.linear_b, "sigma": e.sigma})
        else:
            experts.append({"kind": "mlp", "lags": e.lags, "hidden_units": e.hidden_units,
                            "alpha0": e.alpha0, "alpha": e.alpha.tolist(), "beta0": e.beta0.tolist(),
                            "beta": e.beta.tolist(), "sigma": e.sigma})
    return {"format": FORMAT_TAG, "version": FORMAT_VERSION,
            "weights": model.weights.tolist(), "experts": experts}


def dumps_model(model: MixtureModel) -> str:
    return _dump(model_to_dict(model)) + "\n"


def save_model(model: MixtureModel, path) -> None:
    Path(path).write_text(dumps_model(model))


def _number(value, path):
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise SchemaError(path, f"expected a number, got {type(value).__name__}")
    return float(value)


def _int(value, path):
    if isinstance(value, bool) or not isinstance(value, int):
        raise SchemaError(path, f"expected an integer, got {type(value).__name__}")
    return value


def _numbers(value, path, length=None):
    if not isinstance(value, list):
        raise SchemaError(path, "expected a list of numbers")
    if length is not None and len(value) != length:
        raise SchemaError(path, f"expected {length} entries, got {len(value)}")
    return [_number(v, f"{path}[{i}]") for i, v in enumerate(value)]


def _field(obj, key, path):
    if key not in obj:
        raise SchemaError(f"{path}.{key}" if path else key, "missing field")
    return obj[key]


def _expert_from_dict(d, path) -> ExpertParams:
    if not isinstance(d, dict):
        raise SchemaError(path, "expected an object")
    kind = _field(d, "kind", path)
    lags = _int(_field(d, "lags", path), f"{path}.lags")
    try:
        if kind == "linear":
            a = _numbers(_field(d, "linear_a", path), f"{path}.linear_a", lags)
            return ExpertParams.linear(a, _number(_field(d, "linear_b", path), f"{path}.linear_b"),
                                       _number(_field(d, "sigma", path), f"{path}.sigma"))
        if kind == "mlp":
            k = _int(_field(d, "hidden_units", path), f"{path}.hidden_units")
            beta = _field(d, "beta", path)
            if not isinstance(beta, list) or len(beta) != k:
                raise SchemaError(f"{path}.beta", f"expected {k} rows")
            beta = [_numbers(row, f"{path}.beta[{j}]", lags) for j, row in enumerate(beta)]
            return ExpertParams(
                ExpertKind.MLP, lags=lags, hidden_units=k,
                alpha0=_number(_field(d, "alpha0", path), f"{path}.alpha0"),
                alpha=_numbers(_field(d, "alpha", path), f"{path}.alpha", k),
                beta0=_numbers(_field(d, "beta0", path), f"{path}.beta0", k),
                beta=np.array(beta).reshape(k, lags),
                sigma=_number(_field(d, "sigma", path), f"{path}.sigma"),
            )
    except InvariantError as exc:
        raise InvariantError(f"{path}: {exc}") from None
    raise SchemaError(f"{path}.kind", f"unknown expert kind {kind!r}")


def model_from_dict(d) -> MixtureModel:
    if not isinstance(d, dict):
        raise SchemaError("$", "expected an object")
    if d.get("format", FORMAT_TAG) != FORMAT_TAG:
        raise SchemaError("format", f"expected {FORMAT_TAG!r}")
    experts = _field(d, "experts", "")
    if not isinstance(experts, list) or not experts:
        raise SchemaError("experts", "expected a non-empty list")
    parsed = [_expert_from_dict(e, f"experts[{i}]") for i, e in enumerate(experts)]
    weights = _numbers(_field(d, "weights", ""), "weights", len(parsed))
    try:
        return MixtureModel(tuple(parsed), weights)
    except InvariantError as exc:
        raise InvariantError(f"weights: {exc}") from None


def loads_model(text: str) -> MixtureModel:
    try:
        d = json.loads(text)
    except json.JSONDecodeError as exc:
        raise SchemaError("$", f"invalid JSON at line {exc.lineno}: {exc.msg}") from None
    return model_from_dict(d)


def load_model(path) -> MixtureModel:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise IngestionError(f"cannot read {path}: {exc}") from exc
    return loads_model(text)


# -- manifests ---------------------------------------------------------------

def _plain(obj):
    if is_dataclass(obj):
        return _plain(asdict(obj))
    if isinstance(obj, Enum):
        return obj.value
    if isinstance(obj, dict):
        return {str(k): _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, np.generic):
        return obj.item()
    return obj


def config_digest(config) -> str:
    """SHA-256 of the canonical JSON form of a resolved configuration."""
    canonical = json.dumps(_plain(config), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode()).hexdigest()


@dataclass
class RunManifest:
    command: str
    config_digest: str
    master_seed: int
    tool_version: str
    started: str
    finished: str
    config: dict

    @classmethod
    def create(cls, command, config, master_seed, started, finished=None):
        finished = finished or _now()
        return cls(command=command, config_digest=config_digest(config), master_seed=int(master_seed),
                   tool_version=__version__, started=started, finished=finished, config=_plain(config))

    def write_next_to(self, report_path) -> Path:
        path = Path(str(report_path) + ".manifest.json")
        path.write_text(json.dumps(asdict(self), indent=2, sort_keys=True) + "\n")
        return path


def _now() -> str:
    return _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds")
