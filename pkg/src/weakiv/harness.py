"""Seeded parallel Monte Carlo harness.

Draws datasets from a DGP, evaluates a configured set of estimators on each,
and aggregates loss tables, histograms, and diagnostics.  Reproducibility
contract: every random quantity of iteration i derives from the stream keyed
by (master_seed, i), and aggregation runs over arrays indexed by iteration,
so results are bitwise identical across worker counts and repeated runs.

Stream tags within an iteration: 0 data, 1 RB-2SLS draws, 2 RB-optimal-IV
draws.  The tags are fixed so adding or removing estimators from a config
never changes the draws seen by the others.
"""

from __future__ import annotations

import csv
import json
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .dgp import DGPConfig, concentration_parameter, dgp_from_dict, dgp_to_dict, draw_dataset
from .exceptions import ConfigError, WeakIVError
from .estimators import (
    VarianceConvention,
    fuller,
    optimal_iv,
    tsls,
    two_step_gmm,
    unbiased_scalar,
)
from .rao_blackwell import RBConfig, rb_optimal_iv, rb_tsls
from .reduced_form import (
    CellPartition,
    fgls_reduced_form,
    noise_covariance,
    ols_reduced_form,
)
from .streams import root_stream

SCHEMA_VERSION = 1

_TAG_DATA = 0
_TAG_RB_TSLS = 1
_TAG_RB_OPT = 2

ESTIMATOR_NAMES = ("tsls", "rb_tsls", "optimal_iv", "rb_optimal_iv", "gmm", "fuller", "unbiased")
LOSS_NAMES = ("mse", "mae")


@dataclass(frozen=True)
class HistogramSpec:
    """Fixed-width histogram bins over [low, high), everything else tallied."""

    low: float = -3.0
    high: float = 5.0
    bins: int = 80

    def __post_init__(self) -> None:
        if not (np.isfinite(self.low) and np.isfinite(self.high) and self.low < self.high):
            raise ConfigError(f"histogram range [{self.low}, {self.high}) is not valid")
        if self.bins < 1:
            raise ConfigError(f"need at least one histogram bin, got {self.bins}")

    def to_dict(self) -> dict:
        return {"low": self.low, "high": self.high, "bins": self.bins}


@dataclass(frozen=True)
class EstimatorSpec:
    """One estimator entry of an experiment: a name plus its options.

    ``label`` keys the output tables (defaults to the name; set it to run the
    same estimator twice with different options).  ``draws`` is the RB outer
    draw count, ``inner_draws`` the RB-optimal-IV inner count.
    """

    name: str
    label: str = ""
    fuller_c: float = 1.0
    draws: int = 100
    inner_draws: int = 100
    variance_convention: str = VarianceConvention.AS_PRINTED.value
    trim: float = 0.0

    def __post_init__(self) -> None:
        if self.name not in ESTIMATOR_NAMES:
            raise ConfigError(f"unknown estimator {self.name!r}; known: {ESTIMATOR_NAMES}")
        if not self.label:
            object.__setattr__(self, "label", self.name)
        if self.draws < 1 or self.inner_draws < 1:
            raise ConfigError("draw counts must be >= 1")
        if self.fuller_c < 0:
            raise ConfigError(f"fuller_c must be nonnegative, got {self.fuller_c}")
        VarianceConvention(self.variance_convention)
        if not 0.0 <= self.trim < 0.5:
            raise ConfigError(f"trim must be in [0, 0.5), got {self.trim}")

    def to_dict(self) -> dict:
        return {
            "name": self.name, "label": self.label, "fuller_c": self.fuller_c,
            "draws": self.draws, "inner_draws": self.inner_draws,
            "variance_convention": self.variance_convention, "trim": self.trim,
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "EstimatorSpec":
        if not isinstance(doc, dict) or "name" not in doc:
            raise ConfigError("estimator entries must be objects with a 'name' field")
        known = {"name", "label", "fuller_c", "draws", "inner_draws", "variance_convention", "trim"}
        extra = set(doc) - known
        if extra:
            raise ConfigError(f"unknown estimator option(s): {sorted(extra)}")
        return cls(**doc)


def default_estimators() -> tuple[EstimatorSpec, ...]:
    """The benchmark set: 2SLS and optimal IV with their RB versions."""
    return (
        EstimatorSpec(name="tsls"),
        EstimatorSpec(name="rb_tsls", draws=100),
        EstimatorSpec(name="optimal_iv"),
        EstimatorSpec(name="rb_optimal_iv", draws=50, inner_draws=100),
    )


@dataclass(frozen=True)
class ExperimentConfig:
    dgp: DGPConfig
    iterations: int
    estimators: tuple[EstimatorSpec, ...] = field(default_factory=default_estimators)
    losses: tuple[str, ...] = LOSS_NAMES
    histogram: HistogramSpec = field(default_factory=HistogramSpec)
    master_seed: int = 0

    def __post_init__(self) -> None:
        if self.iterations < 1:
            raise ConfigError(f"need at least one iteration, got {self.iterations}")
        object.__setattr__(self, "estimators", tuple(self.estimators))
        object.__setattr__(self, "losses", tuple(str(x).lower() for x in self.losses))
        labels = [s.label for s in self.estimators]
        if len(labels) != len(set(labels)):
            raise ConfigError(f"estimator labels must be unique, got {labels}")
        unknown = set(self.losses) - set(LOSS_NAMES)
        if unknown:
            raise ConfigError(f"unknown loss(es): {sorted(unknown)}; known: {LOSS_NAMES}")
        for s in self.estimators:
            if s.name == "unbiased" and (self.dgp.dims.k != 1 or self.dgp.dims.d != 1):
                raise ConfigError("the unbiased estimator requires a DGP with k = d = 1")


def experiment_to_dict(cfg: ExperimentConfig) -> dict:
    return {
        "dgp": dgp_to_dict(cfg.dgp),
        "iterations": cfg.iterations,
        "estimators": [s.to_dict() for s in cfg.estimators],
        "losses": list(cfg.losses),
        "histogram": cfg.histogram.to_dict(),
        "master_seed": cfg.master_seed,
    }


def experiment_from_dict(doc: dict) -> ExperimentConfig:
    if not isinstance(doc, dict):
        raise ConfigError("experiment config must be a JSON object")
    if "dgp" not in doc:
        raise ConfigError("experiment config needs a 'dgp' object")
    known = {"dgp", "iterations", "estimators", "losses", "histogram", "master_seed"}
    extra = set(doc) - known
    if extra:
        raise ConfigError(f"unknown experiment field(s): {sorted(extra)}")
    dgp = dgp_from_dict(doc["dgp"])
    est_docs = doc.get("estimators")
    estimators = (
        default_estimators()
        if est_docs is None
        else tuple(EstimatorSpec.from_dict(e) for e in est_docs)
    )
    hist_doc = doc.get("histogram")
    if hist_doc is None:
        histogram = HistogramSpec()
    else:
        try:
            histogram = HistogramSpec(**hist_doc)
        except TypeError as exc:
            raise ConfigError(f"bad histogram spec: {exc}") from exc
    try:
        iterations = int(doc.get("iterations", 1000))
        master_seed = int(doc.get("master_seed", dgp.seed))
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad numeric field: {exc}") from exc
    return ExperimentConfig(
        dgp=dgp,
        iterations=iterations,
        estimators=estimators,
        losses=tuple(doc.get("losses", LOSS_NAMES)),
        histogram=histogram,
        master_seed=master_seed,
    )


# -- per-iteration evaluation --------------------------------------------------


def _iteration_estimates(cfg: ExperimentConfig, i: int) -> tuple[dict, dict]:
    """Evaluate all configured estimators on iteration i's dataset.

    Returns (label -> beta array, label -> excluded RB draw count).  Never
    raises on numerical trouble: failed estimates are NaN vectors.
    """
    stream = root_stream(cfg.master_seed).child(i)
    data = draw_dataset(cfg.dgp, stream.child(_TAG_DATA))
    d = cfg.dgp.dims.d
    nan = np.full(d, np.nan)

    names = {s.name for s in cfg.estimators}
    need_rb = bool(names & {"rb_tsls", "rb_optimal_iv"})
    need_fit = need_rb or "unbiased" in names

    partition = CellPartition.from_dataset(data, cfg.dgp.design)
    zz = data.z.T @ data.z

    ols = gls = noise = None
    if need_fit:
        try:
            ols = ols_reduced_form(data, partition)
        except (WeakIVError, np.linalg.LinAlgError):
            ols = None
    if need_rb and ols is not None:
        try:
            gls = fgls_reduced_form(data, partition, initial=ols)
            noise = noise_covariance(ols, gls)
        except (WeakIVError, np.linalg.LinAlgError):
            gls = noise = None

    betas: dict[str, np.ndarray] = {}
    excluded: dict[str, int] = {}
    for spec in cfg.estimators:
        value = nan
        try:
            if spec.name == "tsls":
                value = tsls(data, check=False).beta
            elif spec.name == "gmm":
                value = two_step_gmm(data, check=False).beta
            elif spec.name == "fuller":
                value = fuller(data, spec.fuller_c, check=False).beta
            elif spec.name == "optimal_iv":
                value = optimal_iv(data, check=False).beta
            elif spec.name == "unbiased":
                if ols is not None:
                    value = unbiased_scalar(ols, spec.variance_convention).beta
            elif spec.name == "rb_tsls":
                if gls is not None and noise is not None:
                    rb = rb_tsls(
                        gls, noise, zz,
                        RBConfig(m=spec.draws, stream=stream.child(_TAG_RB_TSLS), trim=spec.trim),
                    )
                    value = rb.beta
                    excluded[spec.label] = int(rb.diagnostics.get("non_finite_draws", 0))
            elif spec.name == "rb_optimal_iv":
                if gls is not None and noise is not None:
                    rb = rb_optimal_iv(
                        data, gls, noise,
                        RBConfig(
                            m=spec.draws, m_inner=spec.inner_draws,
                            stream=stream.child(_TAG_RB_OPT), trim=spec.trim,
                        ),
                        partition=partition,
                    )
                    value = rb.beta
                    excluded[spec.label] = int(rb.diagnostics.get("non_finite_draws", 0))
        except (WeakIVError, np.linalg.LinAlgError):
            value = nan
        betas[spec.label] = np.asarray(value, dtype=np.float64).reshape(d)
    return betas, excluded


def _run_range(cfg: ExperimentConfig, start: int, stop: int) -> tuple[dict, dict]:
    d = cfg.dgp.dims.d
    arrays = {s.label: np.full((stop - start, d), np.nan) for s in cfg.estimators}
    excluded = {s.label: 0 for s in cfg.estimators}
    for i in range(start, stop):
        betas, ex = _iteration_estimates(cfg, i)
        for label, value in betas.items():
            arrays[label][i - start] = value
        for label, count in ex.items():
            excluded[label] += count
    return arrays, excluded


def _run_range_task(args: tuple) -> tuple[dict, dict]:
    return _run_range(*args)


def gather_estimates(cfg: ExperimentConfig, workers: int = 1) -> tuple[dict, dict]:
    """Per-iteration estimates for every configured estimator.

    Returns (label -> (iterations, d) array, label -> excluded RB draw count).
    The arrays are indexed by iteration, identical for any ``workers``.
    """
    if workers < 1:
        raise ConfigError(f"workers must be >= 1, got {workers}")
    if workers == 1:
        return _run_range(cfg, 0, cfg.iterations)
    edges = np.linspace(0, cfg.iterations, workers + 1, dtype=int)
    tasks = [(cfg, int(a), int(b)) for a, b in zip(edges[:-1], edges[1:]) if a < b]
    d = cfg.dgp.dims.d
    arrays = {s.label: np.full((cfg.iterations, d), np.nan) for s in cfg.estimators}
    excluded = {s.label: 0 for s in cfg.estimators}
    with ProcessPoolExecutor(max_workers=workers) as pool:
        for (_, start, stop), (chunk, ex) in zip(tasks, pool.map(_run_range_task, tasks)):
            for label, block in chunk.items():
                arrays[label][start:stop] = block
            for label, count in ex.items():
                excluded[label] += count
    return arrays, excluded


# -- aggregation ---------------------------------------------------------------


def loss_metrics(estimates, beta_true, losses: tuple[str, ...] = LOSS_NAMES) -> dict:
    """Loss table for a set of estimates of a true d-vector.

    MSE is the mean squared Euclidean error, MAE the mean Euclidean norm of
    the error (absolute error when d = 1).  Monte Carlo standard errors come
    from the sample variance of the per-iteration losses.  Non-finite
    estimates are excluded; with no finite estimates values are None.
    """
    est = np.atleast_2d(np.asarray(estimates, dtype=np.float64))
    beta_true = np.asarray(beta_true, dtype=np.float64).reshape(est.shape[1])
    err = est - beta_true
    finite = np.all(np.isfinite(err), axis=1)
    sq = np.einsum("ij,ij->i", err, err)[finite]
    out = {}
    for name in losses:
        per_draw = sq if name == "mse" else np.sqrt(sq)
        if per_draw.size == 0:
            out[name] = {"value": None, "mc_se": None}
            continue
        value = float(np.mean(per_draw))
        se = float(np.std(per_draw, ddof=1) / np.sqrt(per_draw.size)) if per_draw.size > 1 else 0.0
        out[name] = {"value": value, "mc_se": se}
    return out


def _histogram(values: np.ndarray, spec: HistogramSpec) -> dict:
    v = np.asarray(values, dtype=np.float64)
    nan_count = int(np.isnan(v).sum())
    under = int(np.sum(v < spec.low))
    over = int(np.sum(v >= spec.high))
    in_range = v[(v >= spec.low) & (v < spec.high)]
    counts, _ = np.histogram(in_range, bins=spec.bins, range=(spec.low, spec.high))
    return {
        "low": spec.low, "high": spec.high, "bins": spec.bins,
        "counts": [int(c) for c in counts],
        "underflow": under, "overflow": over, "invalid": nan_count,
    }


@dataclass
class ExperimentResult:
    """Aggregated experiment output; JSON-native field types throughout.

    ``wall_time`` is excluded from equality so determinism checks compare
    only the reproducible content.
    """

    schema_version: int
    config: dict
    iterations: int
    concentration: float | list
    estimators: dict
    wall_time: float = field(default=0.0, compare=False)

    def to_dict(self) -> dict:
        return {
            "schema_version": self.schema_version,
            "config": self.config,
            "iterations": self.iterations,
            "concentration": self.concentration,
            "estimators": self.estimators,
            "meta": {"wall_time_s": self.wall_time},
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "ExperimentResult":
        return cls(
            schema_version=doc["schema_version"],
            config=doc["config"],
            iterations=doc["iterations"],
            concentration=doc["concentration"],
            estimators=doc["estimators"],
            wall_time=doc.get("meta", {}).get("wall_time_s", 0.0),
        )


def run_experiment(cfg: ExperimentConfig, workers: int = 1) -> ExperimentResult:
    """Run the configured Monte Carlo experiment.

    Per iteration i: draw a dataset from the stream keyed (master_seed, i),
    evaluate every configured estimator on it, and record beta estimates.
    Aggregates losses against the true beta, histograms of the first beta
    coordinate, and diagnostics.  Numerical extremes inside iterations are
    recorded, never fatal; only configuration problems raise.
    """
    t0 = time.perf_counter()
    estimates, excluded = gather_estimates(cfg, workers)
    beta_true = cfg.dgp.params.beta
    conc = concentration_parameter(cfg.dgp.design, cfg.dgp.errors, cfg.dgp.effective_pi())
    concentration = float(conc[0, 0]) if conc.shape == (1, 1) else conc.tolist()

    table: dict[str, dict] = {}
    for spec in cfg.estimators:
        est = estimates[spec.label]
        finite_rows = np.all(np.isfinite(est), axis=1)
        table[spec.label] = {
            "name": spec.name,
            "losses": loss_metrics(est, beta_true, cfg.losses),
            "histogram": _histogram(est[:, 0], cfg.histogram),
            "diagnostics": {
                "non_finite_estimates": int((~finite_rows).sum()),
                "non_finite_draws": int(excluded[spec.label]),
            },
        }
    return ExperimentResult(
        schema_version=SCHEMA_VERSION,
        config=experiment_to_dict(cfg),
        iterations=cfg.iterations,
        concentration=concentration,
        estimators=table,
        wall_time=time.perf_counter() - t0,
    )


# -- export --------------------------------------------------------------------


def export_result(result: ExperimentResult, path, format: str = "json") -> list[Path]:
    """Write result files; returns the paths written.

    JSON: one file (named result.json when ``path`` is a directory) that
    round-trips through :func:`import_result`.  CSV: losses.csv with one row
    per (estimator, loss) and histograms.csv with per-bin rows plus
    under/overflow and invalid tallies.
    """
    path = Path(path)
    if format == "json":
        target = path if path.suffix == ".json" else path / "result.json"
        target.parent.mkdir(parents=True, exist_ok=True)
        target.write_text(json.dumps(result.to_dict(), indent=2) + "\n", encoding="utf-8")
        return [target]
    if format == "csv":
        path.mkdir(parents=True, exist_ok=True)
        losses_path = path / "losses.csv"
        with open(losses_path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(["estimator", "loss", "value", "mc_se"])
            for label, entry in result.estimators.items():
                for loss, cell in entry["losses"].items():
                    writer.writerow([label, loss, cell["value"], cell["mc_se"]])
        hist_path = path / "histograms.csv"
        with open(hist_path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(["estimator", "bin_left", "bin_right", "count"])
            for label, entry in result.estimators.items():
                h = entry["histogram"]
                edges = np.linspace(h["low"], h["high"], h["bins"] + 1)
                writer.writerow([label, "-inf", h["low"], h["underflow"]])
                for b, count in enumerate(h["counts"]):
                    writer.writerow([label, edges[b], edges[b + 1], count])
                writer.writerow([label, h["high"], "inf", h["overflow"]])
                writer.writerow([label, "nan", "nan", h["invalid"]])
        return [losses_path, hist_path]
    raise ConfigError(f"unknown export format {format!r}; known: json, csv")


def import_result(path) -> ExperimentResult:
    """Read back a JSON export."""
    with open(path, encoding="utf-8") as fh:
        return ExperimentResult.from_dict(json.load(fh))
