"""Data generating processes with discrete instruments and cell heteroskedasticity.

Instruments take finitely many values ("cells").  Within a cell the structural
errors ``(eps, v)`` are mean-zero normal with a cell-specific covariance, so
conditional second moments are estimable by within-cell averages without any
smoothing.  The package ships one benchmark design of this kind (three binary
instruments, eight cells) used by the ``replicate`` command.

A DGP is described by a small JSON document::

    {
      "k": 3, "d": 1, "n": 1000,
      "beta": [1.0],
      "pi_base": [[1.0], [1.0], [1.0]],
      "mode": "weak",
      "cells": [{"z": [-1, -1, -1], "cov": [[7.32, -2.91], [-2.91, 1.16]]}, ...],
      "cell_probs": [0.125, ...],   # optional, uniform when absent
      "seed": 0                      # optional
    }

``mode`` is "weak" or "strong"; under "weak" the first stage actually used for
a sample of size n is ``pi_base / sqrt(n)``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

import numpy as np

from .core import Dims, Dataset, IdentificationMode, StructuralParams, as_array, psd_factor
from .exceptions import ConfigError, DimensionError, NonPSD
from .streams import Stream, root_stream

_BENCHMARK_RESOURCE = "benchmark_dgp.json"

# Fixed stream-tag layout under a dataset stream: tag 0 draws cell memberships,
# tag 1 draws the error innovations.  Keeping the tags fixed means the same
# stream always yields the same dataset no matter who consumes it.
_TAG_CELLS = 0
_TAG_ERRORS = 1


@dataclass(frozen=True)
class InstrumentDesign:
    """Discrete instrument distribution: support points and probabilities.

    ``cells`` has one row per support point of z; ``probs`` are the point
    masses.  The support must span R^k, otherwise E[zz'] is singular and no
    reduced form is identified.
    """

    cells: np.ndarray
    probs: np.ndarray

    def __post_init__(self) -> None:
        cells = as_array(self.cells, "cells")
        if cells.ndim != 2:
            raise DimensionError(f"cells must be (c, k), got shape {cells.shape}")
        c = cells.shape[0]
        if c != len({tuple(row) for row in cells.tolist()}):
            raise ConfigError("instrument cells must be distinct")
        probs = as_array(self.probs, "probs")
        if probs.shape != (c,):
            raise DimensionError(f"probs has shape {probs.shape}, expected ({c},)")
        if np.any(probs <= 0.0) or abs(float(probs.sum()) - 1.0) > 1e-12:
            raise ConfigError("cell probabilities must be positive and sum to 1")
        if np.linalg.matrix_rank(cells) < cells.shape[1]:
            raise ConfigError("instrument support does not span the instrument space")
        object.__setattr__(self, "cells", cells)
        object.__setattr__(self, "probs", probs)

    @property
    def n_cells(self) -> int:
        return self.cells.shape[0]

    @property
    def k(self) -> int:
        return self.cells.shape[1]

    def second_moment(self) -> np.ndarray:
        """Population E[zz'] under the design."""
        return np.einsum("c,ci,cj->ij", self.probs, self.cells, self.cells)


@dataclass(frozen=True)
class HeteroskedasticitySpec:
    """Conditional covariance of the structural errors ``(eps, v)`` per cell.

    ``covariances[c]`` is the (1+d) x (1+d) covariance of (eps_i, v_i') given
    that z_i falls in cell c, ordered as in the companion
    :class:`InstrumentDesign`.  Every matrix must be positive semidefinite.
    """

    covariances: np.ndarray

    def __post_init__(self) -> None:
        cov = as_array(self.covariances, "covariances")
        if cov.ndim != 3 or cov.shape[1] != cov.shape[2] or cov.shape[1] < 2:
            raise DimensionError(
                f"covariances must be (c, 1+d, 1+d) with d >= 1, got shape {cov.shape}"
            )
        for idx in range(cov.shape[0]):
            m = cov[idx]
            if not np.allclose(m, m.T, atol=1e-12):
                raise NonPSD(f"cell {idx} covariance is not symmetric")
            vals = np.linalg.eigvalsh(0.5 * (m + m.T))
            if vals[0] < -1e-10 * max(float(vals[-1]), 1.0):
                raise NonPSD(f"cell {idx} covariance has negative eigenvalue {vals[0]:.3e}")
        object.__setattr__(self, "covariances", cov)

    @property
    def n_cells(self) -> int:
        return self.covariances.shape[0]

    @property
    def d(self) -> int:
        return self.covariances.shape[1] - 1

    def error_factors(self) -> np.ndarray:
        """Per-cell factors F with F F' = covariance, for sampling."""
        return np.stack(
            [psd_factor(m, name=f"cell {i} covariance").factor for i, m in enumerate(self.covariances)]
        )

    def regressor_error_cov(self) -> np.ndarray:
        """Per-cell covariance of v alone, shape (c, d, d)."""
        return self.covariances[:, 1:, 1:]

    def expand_with_reduced_form(self, beta: np.ndarray) -> np.ndarray:
        """Per-cell covariance of (eps, u, v) where u = eps + v'beta.

        The reduced-form error u is a linear function of (eps, v), so the
        expanded (2+d) x (2+d) matrices always have rank at most 1+d.
        """
        beta = as_array(beta, "beta")
        d = self.d
        if beta.shape != (d,):
            raise DimensionError(f"beta has shape {beta.shape}, expected ({d},)")
        lift = np.zeros((2 + d, 1 + d))
        lift[0, 0] = 1.0
        lift[1, 0] = 1.0
        lift[1, 1:] = beta
        lift[2:, 1:] = np.eye(d)
        return np.einsum("ij,cjk,lk->cil", lift, self.covariances, lift)


@dataclass(frozen=True)
class DGPConfig:
    """Complete description of a simulation design."""

    dims: Dims
    params: StructuralParams
    design: InstrumentDesign
    errors: HeteroskedasticitySpec
    seed: int = 0
    name: str = ""

    def __post_init__(self) -> None:
        if self.design.k != self.dims.k:
            raise DimensionError(
                f"design has k={self.design.k} but dims declare k={self.dims.k}"
            )
        if self.params.k != self.dims.k or self.params.d != self.dims.d:
            raise DimensionError(
                f"params are ({self.params.k}, {self.params.d}) but dims declare ({self.dims.k}, {self.dims.d})"
            )
        if self.errors.d != self.dims.d:
            raise DimensionError(
                f"error spec has d={self.errors.d} but dims declare d={self.dims.d}"
            )
        if self.errors.n_cells != self.design.n_cells:
            raise DimensionError(
                f"error spec has {self.errors.n_cells} cells but design has {self.design.n_cells}"
            )

    def effective_pi(self) -> np.ndarray:
        return self.params.effective_pi(self.dims.n)


def draw_dataset(config: DGPConfig, stream: Stream | None = None) -> Dataset:
    """Draw one dataset from the design.

    Cell memberships come from stream tag 0 (one uniform per observation) and
    error innovations from stream tag 1 (1+d normals per observation), so the
    draw for observation i depends only on the stream key and i.

    Parameters
    ----------
    config : DGPConfig
    stream : Stream, optional
        Defaults to the stream derived from ``config.seed``.
    """
    if stream is None:
        stream = root_stream(config.seed)
    n = config.dims.n
    d = config.dims.d

    u = stream.child(_TAG_CELLS).uniforms(n)
    edges = np.cumsum(config.design.probs)
    cell_idx = np.searchsorted(edges, u, side="right")
    cell_idx = np.minimum(cell_idx, config.design.n_cells - 1)

    innovations = stream.child(_TAG_ERRORS).normals((n, 1 + d))
    factors = config.errors.error_factors()
    errors = np.einsum("nij,nj->ni", factors[cell_idx], innovations)
    eps = errors[:, 0]
    v = errors[:, 1:]

    z = config.design.cells[cell_idx]
    pi = config.effective_pi()
    x = z @ pi + v
    y = x @ config.params.beta + eps
    return Dataset(y=y, x=x, z=z)


def concentration_parameter(
    design: InstrumentDesign, errors: HeteroskedasticitySpec, pi: np.ndarray
) -> np.ndarray:
    """Heteroskedasticity-adjusted concentration parameter, exact enumeration.

    Computes ``sum_c p_c * V_c^{-1/2} (pi' z_c)(z_c' pi) V_c^{-1/2}`` where
    ``V_c = Var(v | cell c)``, returning a (d, d) matrix (a 1x1 matrix for a
    single endogenous regressor).  ``pi`` is the effective first stage, so a
    weak design should pass ``pi_base / sqrt(n)``.

    The value is homogeneous of degree 2 in ``pi``.
    """
    pi = as_array(pi, "pi")
    if pi.ndim != 2 or pi.shape[0] != design.k:
        raise DimensionError(f"pi must be (k, d) with k={design.k}, got shape {pi.shape}")
    if errors.d != pi.shape[1]:
        raise DimensionError(
            f"error spec has d={errors.d} but pi has {pi.shape[1]} columns"
        )
    d = pi.shape[1]
    total = np.zeros((d, d))
    for c in range(design.n_cells):
        v_cov = errors.regressor_error_cov()[c]
        vals, vecs = np.linalg.eigh(0.5 * (v_cov + v_cov.T))
        if vals[0] <= 0.0:
            raise NonPSD(f"cell {c} regressor error covariance is not positive definite")
        inv_sqrt = (vecs / np.sqrt(vals)) @ vecs.T
        signal = pi.T @ np.outer(design.cells[c], design.cells[c]) @ pi
        total += design.probs[c] * (inv_sqrt @ signal @ inv_sqrt)
    return total


# -- JSON interchange ---------------------------------------------------------


def dgp_from_dict(doc: dict) -> DGPConfig:
    """Build a :class:`DGPConfig` from the JSON document format."""
    if not isinstance(doc, dict):
        raise ConfigError("DGP document must be a JSON object")
    try:
        k = int(doc["k"])
        d = int(doc["d"])
        beta = as_array(doc["beta"], "beta")
        pi_base = as_array(doc["pi_base"], "pi_base")
        mode_text = str(doc["mode"])
        cells_doc = doc["cells"]
    except KeyError as exc:
        raise ConfigError(f"DGP document is missing required field {exc}") from exc
    try:
        mode = IdentificationMode(mode_text)
    except ValueError as exc:
        raise ConfigError(f"mode must be 'weak' or 'strong', got {mode_text!r}") from exc
    if not isinstance(cells_doc, list) or not cells_doc:
        raise ConfigError("cells must be a nonempty list")
    try:
        z_rows = np.array([as_array(c["z"], "cell z") for c in cells_doc])
        covs = np.array([as_array(c["cov"], "cell cov") for c in cells_doc])
    except (KeyError, TypeError) as exc:
        raise ConfigError("each cell needs 'z' and 'cov' fields") from exc
    n = int(doc.get("n", 1000))
    n_cells = len(cells_doc)
    probs = doc.get("cell_probs")
    probs = np.full(n_cells, 1.0 / n_cells) if probs is None else as_array(probs, "cell_probs")
    try:
        dims = Dims(n=n, k=k, d=d)
        params = StructuralParams(beta=beta, pi_base=pi_base, mode=mode)
        design = InstrumentDesign(cells=z_rows, probs=probs)
        errors = HeteroskedasticitySpec(covariances=covs)
        return DGPConfig(
            dims=dims,
            params=params,
            design=design,
            errors=errors,
            seed=int(doc.get("seed", 0)),
            name=str(doc.get("name", "")),
        )
    except (DimensionError, NonPSD) as exc:
        raise ConfigError(f"invalid DGP document: {exc}") from exc


def dgp_to_dict(config: DGPConfig) -> dict:
    """Inverse of :func:`dgp_from_dict`; suitable for config echo."""
    return {
        "name": config.name,
        "k": config.dims.k,
        "d": config.dims.d,
        "n": config.dims.n,
        "beta": config.params.beta.tolist(),
        "pi_base": config.params.pi_base.tolist(),
        "mode": config.params.mode.value,
        "seed": config.seed,
        "cell_probs": config.design.probs.tolist(),
        "cells": [
            {"z": z.tolist(), "cov": cov.tolist()}
            for z, cov in zip(config.design.cells, config.errors.covariances)
        ],
    }


def load_dgp(path: str | Path) -> DGPConfig:
    """Load a DGP JSON file."""
    try:
        with open(path, encoding="utf-8") as fh:
            doc = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: not valid JSON: {exc}") from exc
    return dgp_from_dict(doc)


def _benchmark_doc() -> dict:
    text = resources.files("weakiv.data").joinpath(_BENCHMARK_RESOURCE).read_text(encoding="utf-8")
    return json.loads(text)


def benchmark_design() -> InstrumentDesign:
    """Instrument design of the bundled benchmark: uniform on {-1, 1}^3."""
    return dgp_from_dict(_benchmark_doc()).design


def benchmark_spec() -> HeteroskedasticitySpec:
    """Error heteroskedasticity of the bundled benchmark design."""
    return dgp_from_dict(_benchmark_doc()).errors


def benchmark_dgp(
    mode: IdentificationMode | str = IdentificationMode.WEAK,
    n: int = 1000,
    seed: int = 0,
) -> DGPConfig:
    """The bundled benchmark design with a chosen identification mode.

    Parameters
    ----------
    mode : IdentificationMode or {"weak", "strong"}
    n : int
        Sample size per dataset (the reference configuration uses 1000).
    seed : int
        Default seed for single-shot draws.
    """
    doc = _benchmark_doc()
    doc["mode"] = mode.value if isinstance(mode, IdentificationMode) else str(mode)
    doc["n"] = int(n)
    doc["seed"] = int(seed)
    return dgp_from_dict(doc)
