"""Reduced-form estimation: stacked OLS and feasible GLS, and the RB noise model.

The structural system with k instruments and d endogenous regressors has the
reduced form

    y_i = z_i' gamma + u_i,      x_i = pi' z_i + v_i,

which stacks into one big regression with identical regressors per equation:

    [Y; vec(X)] = (I_{1+d} (x) Z) psi + [U; vec(V)],    psi = (gamma, vec(pi)).

Because the errors (u_i, v_i') are correlated across equations and their
covariance varies with z_i, GLS on the stacked system is strictly more
efficient than OLS.  Both estimators and their conditional covariances are
computed here from within-cell sufficient statistics; the explicit stacked
matrix is also available (:class:`StackedSystem`) as a direct, if slower,
representation.

The difference Var(psi_OLS | Z) - Var(psi_GLS | Z) equals
Var(psi_OLS - psi_GLS | Z) by GLS orthogonality, and is the covariance of the
noise injected by the Rao-Blackwellization engine (:class:`NoiseModel`).

Vectors ``vec(pi)`` stack columns of pi (column-major / Fortran order).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import Dataset, psd_factor
from .exceptions import ConfigError, Degenerate, DimensionError, RankDeficient
from .streams import Stream


def join_psi(gamma: np.ndarray, pi: np.ndarray) -> np.ndarray:
    """Stack reduced-form coefficients into psi = (gamma, vec(pi))."""
    return np.concatenate([gamma, pi.ravel(order="F")])


def split_psi(psi: np.ndarray, k: int, d: int) -> tuple[np.ndarray, np.ndarray]:
    """Inverse of :func:`join_psi`."""
    psi = np.asarray(psi, dtype=np.float64)
    if psi.shape != (k * (1 + d),):
        raise DimensionError(f"psi has shape {psi.shape}, expected ({k * (1 + d)},)")
    return psi[:k], psi[k:].reshape((k, d), order="F")


@dataclass(frozen=True)
class CellPartition:
    """Assignment of observations to instrument cells.

    ``cells`` holds one representative z per cell, ``index[i]`` the cell of
    observation i, and ``counts`` the cell sizes.  When built against a known
    :class:`~weakiv.dgp.InstrumentDesign` the cell order is the design's and
    unobserved cells keep count zero; otherwise cells are the unique rows of
    the sample in lexicographic order.
    """

    cells: np.ndarray
    index: np.ndarray
    counts: np.ndarray

    @property
    def n_cells(self) -> int:
        return self.cells.shape[0]

    @classmethod
    def from_dataset(cls, data: Dataset, design=None) -> "CellPartition":
        z = data.z
        if design is None:
            cells, index = np.unique(z, axis=0, return_inverse=True)
            index = index.ravel()
            counts = np.bincount(index, minlength=cells.shape[0])
            return cls(cells=cells, index=index, counts=counts)
        cells = design.cells
        if cells.shape[1] != z.shape[1]:
            raise DimensionError(
                f"design has k={cells.shape[1]} but data has k={z.shape[1]}"
            )
        matches = np.all(z[:, None, :] == cells[None, :, :], axis=2)
        found = matches.any(axis=1)
        if not np.all(found):
            bad = z[~found][0]
            raise ConfigError(f"observation with z={bad.tolist()} is not a design cell")
        index = np.argmax(matches, axis=1)
        counts = np.bincount(index, minlength=cells.shape[0])
        return cls(cells=cells, index=index, counts=counts)


def cell_sums(partition: CellPartition, data: Dataset) -> np.ndarray:
    """Within-cell sums of the response stack (y_i, x_i'), shape (c, 1+d)."""
    r = np.column_stack([data.y, data.x])
    out = np.zeros((partition.n_cells, r.shape[1]))
    np.add.at(out, partition.index, r)
    return out


def cell_cross_moments(partition: CellPartition, data: Dataset) -> np.ndarray:
    """Within-cell sums of (1, y_i, x_i')(1, y_i, x_i'), shape (c, 2+d, 2+d).

    These are sufficient for every residual second moment used in this
    package: residuals are linear in (1, y, x) with coefficients constant
    within a cell, so any within-cell residual outer-product sum is a
    congruence L T L' of these matrices.
    """
    w = np.column_stack([np.ones(data.y.shape[0]), data.y, data.x])
    prods = np.einsum("ni,nj->nij", w, w)
    out = np.zeros((partition.n_cells, w.shape[1], w.shape[1]))
    np.add.at(out, partition.index, prods)
    return out


def reduced_residual_moments(
    moments: np.ndarray,
    counts: np.ndarray,
    cells: np.ndarray,
    gamma: np.ndarray,
    pi: np.ndarray,
) -> np.ndarray:
    """Per-cell second moment of reduced-form residuals (u, v), shape (c, 1+d, 1+d).

    u_i = y_i - z_i' gamma and v_i = x_i - pi' z_i are linear in (1, y_i, x_i')
    within a cell, so the average outer product is L_c T_c L_c' / n_c with T_c
    the cross moments.  Cells with zero count get a zero matrix; callers that
    need positive counts must check.
    """
    c = cells.shape[0]
    d = pi.shape[1]
    lift = np.zeros((c, 1 + d, 2 + d))
    lift[:, 0, 0] = -(cells @ gamma)
    lift[:, 0, 1] = 1.0
    lift[:, 1:, 0] = -(cells @ pi)
    lift[:, 1:, 2:] = np.eye(d)
    sums = np.einsum("cij,cjl,cml->cim", lift, moments, lift)
    safe = np.maximum(counts.astype(np.float64), 1.0)
    return sums / safe[:, None, None]


def structural_residual_moments(
    moments: np.ndarray,
    counts: np.ndarray,
    cells: np.ndarray,
    beta: np.ndarray,
    pi: np.ndarray,
) -> np.ndarray:
    """Per-cell second moment of structural residuals (eps, v), shape (c, 1+d, 1+d).

    eps_i = y_i - x_i' beta, v_i = x_i - pi' z_i; same congruence trick as
    :func:`reduced_residual_moments`.
    """
    c = cells.shape[0]
    d = pi.shape[1]
    lift = np.zeros((c, 1 + d, 2 + d))
    lift[:, 0, 1] = 1.0
    lift[:, 0, 2:] = -beta
    lift[:, 1:, 0] = -(cells @ pi)
    lift[:, 1:, 2:] = np.eye(d)
    sums = np.einsum("cij,cjl,cml->cim", lift, moments, lift)
    safe = np.maximum(counts.astype(np.float64), 1.0)
    return sums / safe[:, None, None]


@dataclass(frozen=True)
class StackedSystem:
    """Explicit stacked regression: response (n(1+d),), design (n(1+d), k(1+d)).

    The design matrix is literally ``kron(I_{1+d}, Z)``; observation i of
    equation a sits in row ``a * n + i``.  Used as a direct cross-check of the
    cell-statistic computations and for small-scale diagnostics.
    """

    response: np.ndarray
    design: np.ndarray
    partition: CellPartition

    @classmethod
    def from_dataset(cls, data: Dataset, partition: CellPartition | None = None) -> "StackedSystem":
        if partition is None:
            partition = CellPartition.from_dataset(data)
        response = np.concatenate([data.y, data.x.ravel(order="F")])
        design = np.kron(np.eye(1 + data.dims.d), data.z)
        return cls(response=response, design=design, partition=partition)


@dataclass(frozen=True)
class ReducedFormFit:
    """A fitted stacked reduced form.

    ``cond_cov`` is the estimated conditional covariance of psi_hat given the
    instruments (sandwich form for OLS, inverse information for GLS), on the
    raw (not root-n) scale.  ``cell_cov`` holds the per-cell residual
    covariances used for weighting, aligned with ``partition``.
    """

    gamma: np.ndarray
    pi: np.ndarray
    cond_cov: np.ndarray
    cell_cov: np.ndarray
    partition: CellPartition
    n_obs: int
    method: str

    @property
    def psi(self) -> np.ndarray:
        return join_psi(self.gamma, self.pi)

    @property
    def k(self) -> int:
        return self.gamma.shape[0]

    @property
    def d(self) -> int:
        return self.pi.shape[1]


def _ols_coefficients(data: Dataset) -> tuple[np.ndarray, np.ndarray]:
    coef, _, rank, _ = np.linalg.lstsq(data.z, np.column_stack([data.y, data.x]), rcond=None)
    if rank < data.z.shape[1]:
        raise RankDeficient(f"instrument matrix has rank {rank} < k={data.z.shape[1]}")
    return coef[:, 0], coef[:, 1:]


def estimate_cell_covariance(
    data: Dataset, psi: np.ndarray, partition: CellPartition | None = None
) -> np.ndarray:
    """Within-cell residual covariance estimates, shape (c, 1+d, 1+d).

    Residuals (u, v) are taken at the supplied reduced-form coefficients;
    each cell's estimate is the plain 1/n_c average of residual outer
    products, conditioning on the realized cell sizes.

    Raises
    ------
    Degenerate
        If any cell has fewer than d + 2 observations (including empty
        cells), too few to estimate a (1+d)-dimensional covariance.
    """
    if partition is None:
        partition = CellPartition.from_dataset(data)
    d = data.dims.d
    gamma, pi = split_psi(np.asarray(psi, dtype=np.float64), data.dims.k, d)
    if np.any(partition.counts < d + 2):
        worst = int(partition.counts.min())
        cell = partition.cells[int(np.argmin(partition.counts))]
        raise Degenerate(
            f"cell {cell.tolist()} has {worst} observations; need at least d+2 = {d + 2}"
        )
    moments = cell_cross_moments(partition, data)
    return reduced_residual_moments(moments, partition.counts, partition.cells, gamma, pi)


def ols_reduced_form(data: Dataset, partition: CellPartition | None = None) -> ReducedFormFit:
    """Equation-by-equation OLS on the stacked reduced form.

    With identical regressors in every equation, stacked GLS with any weights
    that ignore the cross-equation correlation reduces to equation-by-equation
    OLS, so the coefficients come from one least-squares solve of [y X] on Z.
    The conditional covariance is the heteroskedasticity-aware sandwich built
    from within-cell residual covariances.
    """
    if partition is None:
        partition = CellPartition.from_dataset(data)
    gamma, pi = _ols_coefficients(data)
    # raw within-cell residual averages; unlike the FGLS weighting path this
    # never needs invertibility, so sparse cells are fine for the sandwich
    moments = cell_cross_moments(partition, data)
    cell_cov = reduced_residual_moments(moments, partition.counts, partition.cells, gamma, pi)

    zz = data.z.T @ data.z
    middle = np.einsum(
        "c,cab,ci,cj->aibj", partition.counts.astype(np.float64), cell_cov,
        partition.cells, partition.cells,
    )
    p = data.dims.k * (1 + data.dims.d)
    middle = middle.reshape(p, p)
    zz_inv = np.linalg.inv(zz)
    bread = np.kron(np.eye(1 + data.dims.d), zz_inv)
    cond_cov = bread @ middle @ bread
    cond_cov = 0.5 * (cond_cov + cond_cov.T)
    return ReducedFormFit(
        gamma=gamma, pi=pi, cond_cov=cond_cov, cell_cov=cell_cov,
        partition=partition, n_obs=data.dims.n, method="ols",
    )


def wls_psi(
    partition: CellPartition, sums: np.ndarray, weights: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Weighted least squares on the stacked system from cell statistics.

    For per-observation (1+d) x (1+d) weights constant within cells, the
    normal equations of the stacked regression reduce to cell sums:

        A = sum_c n_c (Wc (x) z_c z_c'),    b = sum_c ((Wc s_c) (x) z_c),

    with s_c the within-cell sum of (y_i, x_i').  Returns (A, b); the solution
    is ``solve(A, b)`` and A is the (unnormalized) information matrix.
    """
    counts = partition.counts.astype(np.float64)
    a4 = np.einsum("c,cab,ci,cj->aibj", counts, weights, partition.cells, partition.cells)
    p = a4.shape[0] * a4.shape[1]
    a = a4.reshape(p, p)
    b = np.einsum("cab,cb,ci->ai", weights, sums, partition.cells).reshape(p)
    return a, b


def fgls_reduced_form(
    data: Dataset,
    partition: CellPartition | None = None,
    initial: ReducedFormFit | None = None,
    cell_cov: np.ndarray | None = None,
) -> ReducedFormFit:
    """One-step feasible GLS on the stacked reduced form.

    Weights are the inverted within-cell residual covariances from the
    initial OLS fit (no iteration).  The returned ``cell_cov`` is the same
    matrix stack used for weighting, so OLS and FGLS fits built from the same
    data share identical cell covariances; this makes the covariance
    difference used by :func:`noise_covariance` exactly positive
    semidefinite up to rounding.

    Parameters
    ----------
    data : Dataset
    partition : CellPartition, optional
    initial : ReducedFormFit, optional
        OLS fit to take residual covariances from; computed when absent.
    cell_cov : ndarray, optional
        Override the weighting covariances entirely (testing hook).
    """
    if partition is None:
        partition = initial.partition if initial is not None else CellPartition.from_dataset(data)
    if cell_cov is None:
        if initial is None:
            initial = ols_reduced_form(data, partition)
        # recomputes the same within-cell averages the initial fit used, but
        # through the guarded estimator: weighting needs invertible matrices
        cell_cov = estimate_cell_covariance(data, initial.psi, partition)
    try:
        weights = np.linalg.inv(cell_cov)
    except np.linalg.LinAlgError as exc:
        raise Degenerate(f"a cell residual covariance is singular: {exc}") from exc
    sums = cell_sums(partition, data)
    a, b = wls_psi(partition, sums, weights)
    try:
        psi = np.linalg.solve(a, b)
        cond_cov = np.linalg.inv(a)
    except np.linalg.LinAlgError as exc:
        raise RankDeficient(f"GLS information matrix is singular: {exc}") from exc
    cond_cov = 0.5 * (cond_cov + cond_cov.T)
    gamma, pi = split_psi(psi, data.dims.k, data.dims.d)
    return ReducedFormFit(
        gamma=gamma, pi=pi, cond_cov=cond_cov, cell_cov=cell_cov,
        partition=partition, n_obs=data.dims.n, method="fgls",
    )


@dataclass(frozen=True)
class NoiseModel:
    """Gaussian noise N(0, cov) for Rao-Blackwellization draws.

    ``factor`` satisfies factor @ factor.T = cov; ``clipped`` records the
    total magnitude of negative eigenvalues removed when projecting the
    estimated covariance difference onto the PSD cone (rounding dust in
    practice).
    """

    cov: np.ndarray
    factor: np.ndarray
    clipped: float

    @property
    def dim(self) -> int:
        return self.cov.shape[0]

    def draw(self, stream: Stream, m: int) -> np.ndarray:
        """m draws from N(0, cov), shape (m, dim)."""
        return stream.normals((m, self.dim)) @ self.factor.T

    @classmethod
    def zero(cls, dim: int) -> "NoiseModel":
        z = np.zeros((dim, dim))
        return cls(cov=z, factor=z, clipped=0.0)


def noise_covariance(ols: ReducedFormFit, gls: ReducedFormFit) -> NoiseModel:
    """Noise model with covariance Var(psi_OLS - psi_GLS | Z).

    By efficiency of GLS within the class of linear unbiased estimators, the
    OLS-GLS difference is orthogonal to GLS, so its conditional covariance is
    the difference of the two conditional covariances.  The difference is
    projected onto the PSD cone (clipping eigenvalue dust) and factored for
    sampling.
    """
    if ols.cond_cov.shape != gls.cond_cov.shape:
        raise DimensionError(
            f"fit covariance shapes differ: {ols.cond_cov.shape} vs {gls.cond_cov.shape}"
        )
    diff = ols.cond_cov - gls.cond_cov
    f = psd_factor(diff, name="OLS-GLS covariance difference")
    return NoiseModel(cov=f.matrix, factor=f.factor, clipped=f.clipped)
