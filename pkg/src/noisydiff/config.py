"""TOML experiment files -> ExperimentConfig."""
from __future__ import annotations

import dataclasses
from pathlib import Path
from typing import Any, Optional

import tomli

from .estimate import BayesConfig, OptimizerConfig
from .harness import ExperimentConfig


class ConfigError(ValueError):
    pass


_SECTIONS = {
    "model": {"name", "alpha_box", "beta_box"},
    "truth": {"alpha", "beta", "lambda", "x0"},
    "noise": {"family"},
    "scheme": {"n", "h", "tau"},
    "experiment": {"estimators", "replications", "master_seed", "substeps", "random_x0", "batch_size",
                   "threads", "out", "bound"},
    "optimizer": {f.name for f in dataclasses.fields(OptimizerConfig)},
    "bayes": {f.name for f in dataclasses.fields(BayesConfig)},
    "tail": {"r_grid", "radii", "directions_per_pair"},
    "surface": {"objective", "alpha", "beta"},
}


def _check_keys(section: str, table: Any) -> dict:
    if not isinstance(table, dict):
        raise ConfigError(f"[{section}] must be a table")
    unknown = set(table) - _SECTIONS[section]
    if unknown:
        raise ConfigError(f"unknown key(s) in [{section}]: {sorted(unknown)}")
    return table


def _tuple(value) -> tuple:
    if isinstance(value, (list, tuple)):
        return tuple(_tuple(v) for v in value)
    return value


def _lambda(value) -> tuple:
    if isinstance(value, (int, float)):
        return ((float(value),),)
    return _tuple(value)


def parse_config(doc: dict, overrides: Optional[dict] = None) -> ExperimentConfig:
    """Build a validated config from a parsed TOML document.

    ``overrides`` may set ``master_seed``, ``replications``, ``out`` and ``threads``.
    """
    unknown = set(doc) - set(_SECTIONS)
    if unknown:
        raise ConfigError(f"unknown section(s): {sorted(unknown)}")
    model = _check_keys("model", doc.get("model", {}))
    truth = _check_keys("truth", doc.get("truth", {}))
    noise = _check_keys("noise", doc.get("noise", {}))
    exp = _check_keys("experiment", doc.get("experiment", {}))
    opt = _check_keys("optimizer", doc.get("optimizer", {}))
    bayes = _check_keys("bayes", doc.get("bayes", {}))
    tail = _check_keys("tail", doc.get("tail", {}))
    if "surface" in doc:
        _check_keys("surface", doc["surface"])

    schemes = doc.get("scheme")
    if isinstance(schemes, dict):
        schemes = [schemes]
    if not schemes:
        raise ConfigError("at least one [[scheme]] table (n, h, tau) is required")
    scheme_list = []
    for s in schemes:
        s = _check_keys("scheme", s)
        missing = {"n", "h", "tau"} - set(s)
        if missing:
            raise ConfigError(f"[[scheme]] missing {sorted(missing)}")
        scheme_list.append((int(s["n"]), float(s["h"]), float(s["tau"])))

    for key in ("alpha", "beta", "lambda"):
        if key not in truth:
            raise ConfigError(f"[truth] needs '{key}'")

    kwargs = dict(
        alpha=_tuple(truth["alpha"]),
        beta=_tuple(truth["beta"]),
        lam=_lambda(truth["lambda"]),
        x0=_tuple(truth["x0"]) if "x0" in truth else None,
        schemes=tuple(scheme_list),
        model_name=model.get("name", "ou1d"),
        alpha_box=_tuple(model["alpha_box"]) if "alpha_box" in model else None,
        beta_box=_tuple(model["beta_box"]) if "beta_box" in model else None,
        noise_family=noise.get("family", "gaussian"),
        replications=int(exp.get("replications", 1)),
        master_seed=int(exp.get("master_seed", 0)),
        estimators=tuple(exp.get("estimators", ("ml",))),
        substeps=int(exp.get("substeps", 10)),
        random_x0=bool(exp.get("random_x0", False)),
        batch_size=int(exp.get("batch_size", 100)),
        threads=int(exp.get("threads", 1)),
        out=str(exp.get("out", "out")),
        bound=float(exp.get("bound", 1e12)),
    )
    if "r_grid" in tail:
        kwargs["r_grid"] = tuple(float(r) for r in tail["r_grid"])
    if "radii" in tail:
        kwargs["tail_radii"] = int(tail["radii"])
    if "directions_per_pair" in tail:
        kwargs["directions_per_pair"] = int(tail["directions_per_pair"])
    for key, val in (overrides or {}).items():
        if val is not None:
            kwargs[key] = val
    try:
        if "starts" in opt:
            opt = {**opt, "starts": _tuple(opt["starts"])}
        kwargs["optimizer"] = OptimizerConfig(**opt)
        kwargs["bayes"] = BayesConfig(**bayes)
        return ExperimentConfig(**kwargs)
    except (ValueError, KeyError, TypeError) as exc:
        raise ConfigError(str(exc)) from exc


def load_document(path) -> dict:
    try:
        with open(path, "rb") as fh:
            return tomli.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except tomli.TOMLDecodeError as exc:
        raise ConfigError(f"invalid TOML in {path}: {exc}") from exc


def load_config(path, overrides: Optional[dict] = None) -> ExperimentConfig:
    return parse_config(load_document(Path(path)), overrides)
