"""Conditional Monte Carlo improvement of estimators built on the reduced form.

Any estimator of beta that can be written as a map T applied to an inefficient
reduced-form estimate psi_tilde can be improved by averaging T over the
conditional distribution of psi_tilde given an efficient estimate psi_hat.
Locally, psi_tilde | psi_hat is Gaussian centered at psi_hat with covariance
Var(psi_tilde) - Var(psi_hat), so the feasible version draws

    e_1, ..., e_m ~ N(0, Var(psi_OLS - psi_GLS | Z))

and returns the average of T(psi_hat + e_j).  The averaging strictly reduces
convex losses whenever T is nonlinear, which is exactly the weak-identification
regime where the plug-in map 1/pi blows up.

Two concrete instances are provided: the RB form of 2SLS (one noise level) and
the RB form of the optimal IV estimator, whose weighting matrices themselves
depend on an inconsistent initial beta and therefore carry a second noise
level to integrate out.

Stream layout: within a config's stream, child 0 carries the (outer) noise
draws and child 1 + j the inner draws of outer replicate j, so every draw is
addressable by (stream key, j, l) and independent of evaluation order.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .core import Dataset, plug_in_beta
from .exceptions import ConfigError, DimensionError
from .reduced_form import (
    CellPartition,
    NoiseModel,
    ReducedFormFit,
    cell_cross_moments,
    cell_sums,
    split_psi,
    structural_residual_moments,
)
from .estimators import StructuralEstimate, optimal_wls_pieces
from .streams import Stream, root_stream


@dataclass(frozen=True)
class RBConfig:
    """Draw counts and stream for Rao-Blackwellization.

    ``m`` outer draws; ``m_inner`` inner draws per outer draw (two-level
    procedures only); ``trim`` an optional symmetric trimming fraction for
    the draw average, 0 meaning the plain mean used everywhere by default.
    """

    m: int
    m_inner: int = 100
    stream: Stream = field(default_factory=lambda: root_stream(0))
    trim: float = 0.0

    def __post_init__(self) -> None:
        if self.m < 1:
            raise ConfigError(f"need m >= 1 outer draws, got {self.m}")
        if self.m_inner < 1:
            raise ConfigError(f"need m_inner >= 1 inner draws, got {self.m_inner}")
        if not 0.0 <= self.trim < 0.5:
            raise ConfigError(f"trim must be in [0, 0.5), got {self.trim}")


def _draw_average(values: np.ndarray, trim: float) -> tuple[np.ndarray, int]:
    """Average draw outputs, excluding non-finite rows; returns (mean, n_excluded)."""
    finite = np.all(np.isfinite(values), axis=1)
    excluded = int(values.shape[0] - finite.sum())
    kept = values[finite]
    if kept.shape[0] == 0:
        return np.full(values.shape[1], np.nan), excluded
    if trim > 0.0:
        cut = int(np.floor(trim * kept.shape[0]))
        if cut > 0:
            kept = np.sort(kept, axis=0)[cut:-cut]
    return kept.mean(axis=0), excluded


def rao_blackwellize(
    transform: Callable[[np.ndarray], np.ndarray],
    psi_hat: np.ndarray,
    noise: NoiseModel,
    cfg: RBConfig,
    report: dict | None = None,
) -> np.ndarray:
    """Monte Carlo conditional expectation of ``transform`` around ``psi_hat``.

    Returns the (optionally trimmed) average of transform(psi_hat + e_j) over
    m draws e_j ~ N(0, noise.cov).  Draws at which the transform is
    non-finite are excluded from the average and counted in ``report``
    (key ``"non_finite_draws"``) when a dict is supplied.  With zero noise
    the result is transform(psi_hat) exactly.
    """
    psi_hat = np.asarray(psi_hat, dtype=np.float64)
    if noise.dim != psi_hat.shape[0]:
        raise DimensionError(
            f"noise dimension {noise.dim} does not match psi dimension {psi_hat.shape[0]}"
        )
    if not noise.factor.any():
        value = np.atleast_1d(np.asarray(transform(psi_hat), dtype=np.float64))
        if report is not None:
            report["non_finite_draws"] = 0 if np.all(np.isfinite(value)) else cfg.m
        return value
    draws = noise.draw(cfg.stream.child(0), cfg.m)
    values = np.stack(
        [np.atleast_1d(np.asarray(transform(psi_hat + e), dtype=np.float64)) for e in draws]
    )
    mean, excluded = _draw_average(values, cfg.trim)
    if report is not None:
        report["non_finite_draws"] = excluded
    return mean


def rb_tsls(
    gls: ReducedFormFit, noise: NoiseModel, m: np.ndarray, cfg: RBConfig
) -> StructuralEstimate:
    """Rao-Blackwellized 2SLS.

    Averages the 2SLS plug-in map with weight ``m`` (Z'Z in the standard
    pipeline) over noise draws added to the GLS reduced-form coefficients:

        mean_j [ (pi+e_pi)' m (pi+e_pi) ]^{-1} (pi+e_pi)' m (gamma+e_gamma).
    """
    k, d = gls.k, gls.d
    m = np.asarray(m, dtype=np.float64)

    def transform(psi: np.ndarray) -> np.ndarray:
        gamma, pi = split_psi(psi, k, d)
        return plug_in_beta(gamma, pi, m, check=False)

    report: dict = {}
    beta = rao_blackwellize(transform, gls.psi, noise, cfg, report)
    report.update({"m": cfg.m})
    return StructuralEstimate(beta=beta, estimator="rb_tsls", weight=m, diagnostics=report)


def rb_optimal_iv(
    data: Dataset,
    gls: ReducedFormFit,
    noise: NoiseModel,
    cfg: RBConfig,
    partition: CellPartition | None = None,
) -> StructuralEstimate:
    """Two-level Rao-Blackwellized optimal IV.

    The optimal-IV map carries two separate pieces of first-step noise:

    * the structural residuals behind the cell weight matrices require an
      initial beta, which is not consistently estimable;
    * the final estimate is a left-inverse applied to a WLS estimate of the
      reduced-form stack under those weights.

    Outer level (j = 1..m): draw e_j ~ N(0, noise.cov), perturb the GLS
    coefficients, recompute the initial 2SLS beta and the per-cell weight
    matrices from the perturbed residuals.  Inner level (l = 1..m_inner):
    draw e_jl from the same noise model, add it to the WLS reduced-form
    estimate under the outer weights, and evaluate the optimal-IV map.  The
    estimate is the grand mean of the beta coordinate over all finite draws.
    """
    if partition is None:
        partition = gls.partition
    dims = data.dims
    k, d = dims.k, dims.d
    if noise.dim != k * (1 + d):
        raise DimensionError(
            f"noise dimension {noise.dim} does not match psi dimension {k * (1 + d)}"
        )
    zz = data.z.T @ data.z
    moments = cell_cross_moments(partition, data)
    sums = cell_sums(partition, data)
    counts = partition.counts
    cells = partition.cells

    zero_noise = not noise.factor.any()
    n_outer = 1 if zero_noise else cfg.m
    n_inner = 1 if zero_noise else cfg.m_inner
    outer = (
        np.zeros((1, noise.dim))
        if zero_noise
        else noise.draw(cfg.stream.child(0), cfg.m)
    )

    betas = np.full((n_outer, n_inner, d), np.nan)
    for j in range(n_outer):
        gamma_j, pi_j = split_psi(gls.psi + outer[j], k, d)
        beta_init = plug_in_beta(gamma_j, pi_j, zz, check=False)
        if not np.all(np.isfinite(beta_init)):
            continue
        m_cells = structural_residual_moments(moments, counts, cells, beta_init, pi_j)
        try:
            inverse = np.linalg.inv(m_cells)
        except np.linalg.LinAlgError:
            continue
        w, h_y, h = optimal_wls_pieces(partition, sums, inverse, dims.n)
        try:
            sol = np.linalg.solve(w, np.column_stack([h_y, h]))
        except np.linalg.LinAlgError:
            continue
        psi_wls = sol[:, 0]
        s = sol[:, 1:]
        inner = (
            np.zeros((1, noise.dim))
            if zero_noise
            else noise.draw(cfg.stream.child(1 + j), cfg.m_inner)
        )
        gram = s.T @ s
        rhs = s.T @ (psi_wls[:, None] + inner.T)
        try:
            theta = np.linalg.solve(gram, rhs)
        except np.linalg.LinAlgError:
            continue
        betas[j] = theta[:d].T

    flat = betas.reshape(n_outer * n_inner, d)
    mean, excluded = _draw_average(flat, cfg.trim)
    report = {"non_finite_draws": excluded, "m": cfg.m, "m_inner": cfg.m_inner}
    return StructuralEstimate(beta=mean, estimator="rb_optimal_iv", diagnostics=report)
