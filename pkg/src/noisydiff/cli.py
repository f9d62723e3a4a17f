"""Command line entry point: ``noisydiff <subcommand> CONFIG [options]``.

Exit codes: 0 success, 2 configuration error, 3 every replication failed.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .asymptotics import rates
from .config import ConfigError, load_config, load_document
from .estimate import adaptive_bayes_from_context, adaptive_ml_from_context
from .harness import (
    AllReplicationsFailed,
    ExperimentConfig,
    McReport,
    emit_report,
    pldi_tail_table,
    run_monte_carlo,
    theoretical_covariance,
)
from .model import build_scheme
from .quasilik import QuasiLikContext, objective_surface
from .simulate import MCMC_STREAM, ObservationSeries, SimSeed, contaminate, read_csv_columns, simulate_path, \
    write_path_csv, write_series_csv

EXIT_OK, EXIT_CONFIG, EXIT_ALL_FAILED = 0, 2, 3

log = logging.getLogger("noisydiff")


def _series(cfg: ExperimentConfig, args) -> ObservationSeries:
    scheme = cfg.scheme(args.scheme)
    if args.series:
        t, y = read_csv_columns(args.series)
        if y.shape[0] != scheme.n + 1:
            raise ConfigError(f"{args.series} has {y.shape[0]} rows but scheme {args.scheme} needs n+1 = {scheme.n + 1}")
        return ObservationSeries(scheme=scheme, values=y)
    seed = SimSeed(cfg.master_seed, args.rep)
    path = simulate_path(cfg.model(), cfg.truth(), scheme, cfg.substeps, seed, cfg.bound, cfg.random_x0)
    return contaminate(path, cfg.noise(), seed, scheme=scheme)


def cmd_simulate(cfg: ExperimentConfig, args) -> int:
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    scheme = cfg.scheme(args.scheme)
    seed = SimSeed(cfg.master_seed, args.rep)
    path = simulate_path(cfg.model(), cfg.truth(), scheme, cfg.substeps, seed, cfg.bound, cfg.random_x0)
    series = contaminate(path, cfg.noise(), seed, scheme=scheme)
    write_path_csv(path, out / "path.csv")
    write_series_csv(series, out / "series.csv")
    print(f"wrote {out / 'path.csv'} and {out / 'series.csv'} (n={scheme.n}, p={scheme.p}, k={scheme.k})")
    return EXIT_OK


def cmd_estimate(cfg: ExperimentConfig, args) -> int:
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    ctx = QuasiLikContext.from_series(_series(cfg, args), cfg.model())
    reports = []
    for method in cfg.estimators:
        if method == "ml":
            reports.append(adaptive_ml_from_context(ctx, cfg.optimizer))
        else:
            rng = SimSeed(cfg.master_seed, args.rep).generator(MCMC_STREAM)
            reports.append(adaptive_bayes_from_context(ctx, bcfg=cfg.bayes, opt=cfg.optimizer, rng=rng))
    with open(out / "estimate.json", "w", encoding="utf-8") as fh:
        json.dump([r.to_dict() for r in reports], fh, indent=1, sort_keys=True)
        fh.write("\n")
    with open(out / "estimate.csv", "w", encoding="utf-8") as fh:
        fh.write(",".join(reports[0].csv_header()) + "\n")
        for r in reports:
            fh.write(",".join(r.csv_row()) + "\n")
    for r in reports:
        print(f"{r.method}: lambda={r.theta_eps.tolist()} alpha={r.alpha.tolist()} beta={r.beta.tolist()}")
    return EXIT_OK


def cmd_asymptotics(cfg: ExperimentConfig, args) -> int:
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    result = []
    for si, triple in enumerate(cfg.schemes):
        scheme = build_scheme(*triple)
        ac = theoretical_covariance(cfg, scheme.tau)
        sqrt_n, sqrt_k, sqrt_t = rates(scheme)
        result.append({"scheme_index": si, "n": scheme.n, "h": scheme.h, "tau": scheme.tau,
                       "rates": {"noise": sqrt_n, "alpha": sqrt_k, "beta": sqrt_t}, **ac.to_dict()})
    with open(out / "asymptotics.json", "w", encoding="utf-8") as fh:
        json.dump(result, fh, indent=1)
        fh.write("\n")
    print(f"sandwich diagonal: {np.diag(np.array(result[0]['sandwich'])).tolist()}")
    return EXIT_OK


def _axis(spec, name: str) -> np.ndarray:
    if not (isinstance(spec, list) and len(spec) == 3):
        raise ConfigError(f"[surface] {name} axes must be [low, high, count] triples")
    lo, hi, count = spec
    return np.linspace(float(lo), float(hi), int(count))


def cmd_surface(cfg: ExperimentConfig, args) -> int:
    surf = load_document(args.config).get("surface")
    if not surf:
        raise ConfigError("surface needs a [surface] table with objective and axis grids")
    objective = surf.get("objective", "h1")
    if objective not in ("h1", "h2"):
        raise ConfigError("[surface] objective must be 'h1' or 'h2'")
    key = "alpha" if objective == "h1" else "beta"
    if key not in surf:
        raise ConfigError(f"[surface] needs '{key}' = list of [low, high, count] axes")
    axes = [_axis(a, key) for a in surf[key]]
    ctx = QuasiLikContext.from_series(_series(cfg, args), cfg.model())
    plugin = None
    if objective == "h2":
        plugin = adaptive_ml_from_context(ctx, cfg.optimizer).alpha
    rows = objective_surface(objective, ctx, axes, plugin)
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    header = ",".join([f"{key}_{i + 1}" for i in range(len(axes))] + ["value"])
    np.savetxt(out / "surface.csv", rows, fmt="%.17g", delimiter=",", header=header, comments="")
    print(f"wrote {out / 'surface.csv'} ({rows.shape[0]} points)")
    return EXIT_OK


def _print_summary(report: McReport) -> None:
    for s in report.summaries:
        print(f"scheme {s.scheme_index} ({s.method}): failures {s.failures}/{s.replications}")
        for i, label in enumerate(s.labels):
            var = s.covariance[i][i] if s.covariance != "n/a" else float("nan")
            print(f"  {label:>10}: mean {s.mean[i]: .4f}  var {var:.4f}  sandwich {s.sandwich[i][i]:.4f}")


def cmd_mc(cfg: ExperimentConfig, args) -> int:
    report = run_monte_carlo(cfg, with_tail=args.tail)
    paths = emit_report(report, cfg.out)
    _print_summary(report)
    print(f"wrote {', '.join(str(p) for p in paths.values())}")
    return EXIT_OK


def cmd_tail(cfg: ExperimentConfig, args) -> int:
    tables = pldi_tail_table(cfg)
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "tail.json", "w", encoding="utf-8") as fh:
        json.dump([t.to_dict() for t in tables], fh, indent=1, sort_keys=True)
        fh.write("\n")
    fields = sorted({f for t in tables for f in t.frequency})
    with open(out / "tail.csv", "w", encoding="utf-8") as fh:
        fh.write(",".join(["scheme_index", "r"] + fields) + "\n")
        for t in tables:
            for i, r in enumerate(t.r_grid):
                fh.write(",".join([str(t.scheme_index), format(r, ".17g")]
                                  + [format(t.frequency[f][i], ".17g") if f in t.frequency else "" for f in fields])
                         + "\n")
    for t in tables:
        for f in fields:
            print(f"scheme {t.scheme_index} {f}: " + "  ".join(
                f"r={r:g}:{p:.3f}" for r, p in zip(t.r_grid, t.frequency.get(f, []))))
    return EXIT_OK


COMMANDS = {
    "simulate": (cmd_simulate, "simulate one latent path and its noisy observations"),
    "estimate": (cmd_estimate, "run the configured estimators on one series"),
    "asymptotics": (cmd_asymptotics, "write information matrices and the sandwich covariance"),
    "surface": (cmd_surface, "dump a quasi-likelihood surface over a grid"),
    "mc": (cmd_mc, "Monte Carlo study: report.json, errors.csv, tail.csv"),
    "tail": (cmd_tail, "empirical tail frequencies of the random fields"),
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="noisydiff", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, (_, help_text) in COMMANDS.items():
        p = sub.add_parser(name, help=help_text)
        p.add_argument("config", help="TOML experiment file")
        p.add_argument("--seed", type=int, help="override experiment.master_seed")
        p.add_argument("--reps", type=int, help="override experiment.replications")
        p.add_argument("--out", help="override experiment.out")
        p.add_argument("--threads", type=int, help="override experiment.threads")
        if name in ("simulate", "estimate", "surface"):
            p.add_argument("--rep", type=int, default=0, help="replication index used for seeding")
            p.add_argument("--scheme", type=int, default=0, help="index into the scheme list")
        if name in ("estimate", "surface"):
            p.add_argument("--series", help="observation CSV (t,y1,..) instead of simulating")
        if name == "mc":
            p.add_argument("--tail", action="store_true", help="also compute the tail table")
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    overrides = {"master_seed": args.seed, "replications": args.reps, "out": args.out, "threads": args.threads}
    try:
        cfg = load_config(args.config, overrides)
        if getattr(args, "scheme", 0) >= len(cfg.schemes) or getattr(args, "scheme", 0) < 0:
            raise ConfigError(f"--scheme {args.scheme} out of range (config has {len(cfg.schemes)})")
        if getattr(args, "rep", 0) < 0:
            raise ConfigError("--rep must be nonnegative")
        return COMMANDS[args.command][0](cfg, args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except AllReplicationsFailed as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ALL_FAILED


if __name__ == "__main__":
    sys.exit(main())
