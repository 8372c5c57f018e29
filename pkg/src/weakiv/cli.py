"""Command line front end.

Subcommands: ``simulate`` (run an experiment config), ``estimate``
(single-shot estimators on a CSV dataset), ``replicate`` (the bundled
benchmark experiment with reference values), ``concentration`` (exact
concentration parameter of a DGP config).

Exit codes: 0 success, 2 configuration or data error, 3 I/O error,
4 numerical rank failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import re
import sys
from pathlib import Path

import numpy as np

from .core import Dataset
from .dgp import benchmark_dgp, concentration_parameter, dgp_from_dict, load_dgp
from .estimators import (
    VarianceConvention,
    fuller,
    optimal_iv,
    tsls,
    two_step_gmm,
    unbiased_scalar,
)
from .exceptions import ConfigError, Degenerate, DimensionError, NonPSD, RankDeficient
from .harness import (
    ExperimentConfig,
    ExperimentResult,
    default_estimators,
    experiment_from_dict,
    export_result,
    run_experiment,
)
from .reduced_form import ols_reduced_form

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_IO = 3
EXIT_RANK = 4

#: Reference loss values for the bundled benchmark experiment.
REFERENCE_LOSSES = {
    "weak": {
        "tsls": {"mse": 0.841, "mae": 0.633},
        "rb_tsls": {"mse": 0.196, "mae": 0.428},
        "optimal_iv": {"mse": 1.159, "mae": 0.604},
        "rb_optimal_iv": {"mse": 0.174, "mae": 0.394},
    },
    "strong": {
        "tsls": {"mse": 0.001, "mae": 0.030},
        "rb_tsls": {"mse": 0.000, "mae": 0.009},
        "optimal_iv": {"mse": 0.000, "mae": 0.009},
        "rb_optimal_iv": {"mse": 0.000, "mae": 0.009},
    },
}

_DISPLAY = {
    "tsls": "2SLS",
    "rb_tsls": "RB 2SLS",
    "optimal_iv": "Optimal IV",
    "rb_optimal_iv": "RB optimal IV",
    "gmm": "Two-step GMM",
    "fuller": "Fuller",
    "unbiased": "Unbiased",
}

_REPLICATE_SEED = 9


def load_csv_dataset(path) -> Dataset:
    """Load a dataset CSV with header columns y, x1..xd, z1..zk.

    Column order is free; the numbers of regressors and instruments are
    declared by the header names.  Values must be plain decimal numbers.
    Full column rank of the instrument block is checked here.
    """
    try:
        table = np.genfromtxt(path, delimiter=",", names=True, dtype=np.float64)
    except OSError:
        raise
    except Exception as exc:
        raise ConfigError(f"{path}: cannot parse CSV: {exc}") from exc
    names = table.dtype.names
    if names is None:
        raise ConfigError(f"{path}: missing header row")
    table = np.atleast_1d(table)
    xs, zs, seen_y = {}, {}, False
    for name in names:
        if name == "y":
            seen_y = True
            continue
        m = re.fullmatch(r"([xz])(\d+)", name)
        if not m:
            raise ConfigError(f"{path}: unexpected column {name!r}; expected y, x1..xd, z1..zk")
        (xs if m.group(1) == "x" else zs)[int(m.group(2))] = name
    if not seen_y:
        raise ConfigError(f"{path}: no 'y' column")
    if not xs or sorted(xs) != list(range(1, len(xs) + 1)):
        raise ConfigError(f"{path}: x columns must be x1..xd, got {sorted(xs.values())}")
    if not zs or sorted(zs) != list(range(1, len(zs) + 1)):
        raise ConfigError(f"{path}: z columns must be z1..zk, got {sorted(zs.values())}")
    y = table["y"]
    x = np.column_stack([table[xs[i]] for i in range(1, len(xs) + 1)])
    z = np.column_stack([table[zs[i]] for i in range(1, len(zs) + 1)])
    try:
        data = Dataset(y=y, x=x, z=z)
    except DimensionError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    if np.linalg.matrix_rank(data.z) < data.dims.k:
        raise RankDeficient(f"{path}: instrument columns are not of full column rank")
    return data


def _print_err(message: str) -> None:
    print(f"error: {message}", file=sys.stderr)


def _loss_cell(entry: dict, loss: str) -> float | None:
    cell = entry["losses"].get(loss)
    return None if cell is None else cell["value"]


def render_loss_table(result: ExperimentResult, reference: dict | None = None) -> str:
    """Fixed-width text table of losses, optionally with reference columns."""
    losses = list(result.config["losses"])
    header = ["estimator"]
    for loss in losses:
        header.append(loss.upper())
        header.append("mc se")
        if reference is not None:
            header.append(f"ref {loss.upper()}")
    rows = [header]
    for label, entry in result.estimators.items():
        row = [_DISPLAY.get(entry["name"], label) if label == entry["name"] else label]
        for loss in losses:
            cell = entry["losses"][loss]
            row.append("-" if cell["value"] is None else f"{cell['value']:.3f}")
            row.append("-" if cell["mc_se"] is None else f"{cell['mc_se']:.4f}")
            if reference is not None:
                ref = reference.get(entry["name"], {}).get(loss)
                row.append("-" if ref is None else f"{ref:.3f}")
        rows.append(row)
    widths = [max(len(r[i]) for r in rows) for i in range(len(header))]
    lines = []
    for idx, row in enumerate(rows):
        lines.append("  ".join(cell.ljust(w) for cell, w in zip(row, widths)).rstrip())
        if idx == 0:
            lines.append("  ".join("-" * w for w in widths))
    lines.append("")
    lines.append(f"iterations: {result.iterations}   concentration: {result.concentration}")
    return "\n".join(lines)


def _apply_overrides(cfg: ExperimentConfig, args) -> ExperimentConfig:
    changes = {}
    if getattr(args, "seed", None) is not None:
        changes["master_seed"] = args.seed
    if getattr(args, "iterations", None) is not None:
        changes["iterations"] = args.iterations
    draws = getattr(args, "draws", None)
    inner = getattr(args, "inner_draws", None)
    if draws is not None or inner is not None:
        specs = []
        for spec in cfg.estimators:
            updates = {}
            if draws is not None and spec.name in ("rb_tsls", "rb_optimal_iv"):
                updates["draws"] = draws
            if inner is not None and spec.name == "rb_optimal_iv":
                updates["inner_draws"] = inner
            specs.append(dataclasses.replace(spec, **updates) if updates else spec)
        changes["estimators"] = tuple(specs)
    return dataclasses.replace(cfg, **changes) if changes else cfg


def _emit_result(result: ExperimentResult, args, reference: dict | None = None) -> None:
    payload = result.to_dict()
    if reference is not None:
        payload = {"mode": args.mode, "reference": reference, "result": payload}
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        name = f"replicate_{args.mode}.json" if reference is not None else "result.json"
        (out / name).write_text(json.dumps(payload, indent=2) + "\n", encoding="utf-8")
        if args.format == "csv":
            export_result(result, out, "csv")
    if args.format == "table":
        print(render_loss_table(result, reference))
    elif args.format == "json":
        print(json.dumps(payload, indent=2))
    elif args.format == "csv" and not args.out:
        raise ConfigError("--format csv requires --out DIRECTORY")


def cmd_simulate(args) -> int:
    try:
        with open(args.config, encoding="utf-8") as fh:
            doc = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{args.config}: not valid JSON: {exc}") from exc
    except FileNotFoundError as exc:
        raise ConfigError(f"{args.config}: {exc}") from exc
    cfg = _apply_overrides(experiment_from_dict(doc), args)
    result = run_experiment(cfg, workers=args.workers)
    _emit_result(result, args)
    return EXIT_OK


def cmd_replicate(args) -> int:
    dgp = benchmark_dgp(args.mode, n=1000, seed=0)
    cfg = ExperimentConfig(
        dgp=dgp,
        iterations=5000,
        estimators=default_estimators(),
        master_seed=_REPLICATE_SEED,
    )
    cfg = _apply_overrides(cfg, args)
    result = run_experiment(cfg, workers=args.workers)
    _emit_result(result, args, reference=REFERENCE_LOSSES[args.mode])
    return EXIT_OK


def cmd_estimate(args) -> int:
    data = load_csv_dataset(args.data)
    if args.estimator == "tsls":
        est = tsls(data)
    elif args.estimator == "gmm":
        est = two_step_gmm(data)
    elif args.estimator == "fuller":
        est = fuller(data, args.fuller_c)
    elif args.estimator == "optimal-iv":
        est = optimal_iv(data)
    else:
        fit = ols_reduced_form(data)
        est = unbiased_scalar(fit, VarianceConvention(args.variance_convention))
    out = {
        "estimator": est.estimator,
        "beta": est.beta.tolist(),
        "diagnostics": est.diagnostics,
    }
    if est.pi is not None:
        out["pi"] = est.pi.tolist()
    print(json.dumps(out, indent=2))
    return EXIT_OK


def cmd_concentration(args) -> int:
    try:
        with open(args.config, encoding="utf-8") as fh:
            doc = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{args.config}: not valid JSON: {exc}") from exc
    except FileNotFoundError as exc:
        raise ConfigError(f"{args.config}: {exc}") from exc
    dgp = dgp_from_dict(doc["dgp"] if isinstance(doc, dict) and "dgp" in doc else doc)
    value = concentration_parameter(dgp.design, dgp.errors, dgp.effective_pi())
    scalar = value.shape == (1, 1)
    out = {
        "k": dgp.dims.k,
        "d": dgp.dims.d,
        "n": dgp.dims.n,
        "mode": dgp.params.mode.value,
        "concentration": float(value[0, 0]) if scalar else value.tolist(),
    }
    if args.format == "table":
        print(f"concentration parameter ({out['mode']}, n={out['n']}): {out['concentration']}")
    else:
        print(json.dumps(out, indent=2))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="weakiv",
        description="Estimation and Monte Carlo tools for weakly identified IV models.",
    )
    sub = parser.add_subparsers(dest="subcommand", required=True)

    sim = sub.add_parser("simulate", help="run an experiment config (JSON)")
    sim.add_argument("--config", required=True, help="experiment config JSON path")
    sim.add_argument("--out", help="output directory")
    sim.add_argument("--seed", type=int, help="override master seed")
    sim.add_argument("--iterations", type=int, help="override iteration count")
    sim.add_argument("--draws", type=int, help="override RB outer draw count")
    sim.add_argument("--inner-draws", type=int, dest="inner_draws", help="override RB inner draw count")
    sim.add_argument("--workers", type=int, default=1, help="worker process count")
    sim.add_argument("--format", choices=("json", "csv", "table"), default="json")
    sim.set_defaults(func=cmd_simulate)

    rep = sub.add_parser("replicate", help="run the bundled benchmark experiment")
    rep.add_argument("mode", choices=("weak", "strong"))
    rep.add_argument("--out", help="output directory")
    rep.add_argument("--seed", type=int, help="override master seed (published default 9)")
    rep.add_argument("--iterations", type=int, help="override iteration count (default 5000)")
    rep.add_argument("--draws", type=int, help="override RB outer draw count")
    rep.add_argument("--inner-draws", type=int, dest="inner_draws", help="override RB inner draw count")
    rep.add_argument("--workers", type=int, default=1)
    rep.add_argument("--format", choices=("json", "csv", "table"), default="table")
    rep.set_defaults(func=cmd_replicate)

    est = sub.add_parser("estimate", help="single-shot estimate from a CSV dataset")
    est.add_argument("--data", required=True, help="CSV with columns y, x1..xd, z1..zk")
    est.add_argument(
        "--estimator",
        choices=("tsls", "gmm", "fuller", "optimal-iv", "unbiased"),
        default="tsls",
    )
    est.add_argument("--fuller-c", type=float, default=1.0, dest="fuller_c")
    est.add_argument(
        "--variance-convention",
        choices=tuple(v.value for v in VarianceConvention),
        default=VarianceConvention.AS_PRINTED.value,
        dest="variance_convention",
    )
    est.add_argument("--format", choices=("json",), default="json")
    est.set_defaults(func=cmd_estimate)

    conc = sub.add_parser("concentration", help="concentration parameter of a DGP config")
    conc.add_argument("--config", required=True, help="DGP (or experiment) config JSON path")
    conc.add_argument("--format", choices=("json", "table"), default="json")
    conc.set_defaults(func=cmd_concentration)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except RankDeficient as exc:
        _print_err(str(exc))
        return EXIT_RANK
    except (ConfigError, DimensionError, Degenerate, NonPSD, KeyError, ValueError) as exc:
        _print_err(str(exc))
        return EXIT_CONFIG
    except OSError as exc:
        _print_err(str(exc))
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
