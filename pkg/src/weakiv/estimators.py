"""Structural estimators of beta: 2SLS, optimal IV, two-step GMM, Fuller, unbiased.

All estimators are pure functions of one dataset (plus options) returning a
:class:`StructuralEstimate`.  Each has two failure modes controlled by
``check``: single-shot mode (default) raises :class:`RankDeficient` when a
required inversion is ill-conditioned past the cap, while simulation mode
(``check=False``) computes in full precision and lets extreme draws flow
through as large or non-finite values for the harness to record.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np
from scipy.special import erfcx

from .core import COND_CAP, Dataset, plug_in_beta
from .exceptions import ConfigError, Degenerate, DimensionError, RankDeficient
from .reduced_form import (
    CellPartition,
    ReducedFormFit,
    _ols_coefficients,
    cell_cross_moments,
    cell_sums,
    split_psi,
    structural_residual_moments,
)


@dataclass
class StructuralEstimate:
    """An estimate of beta with optional auxiliaries.

    ``pi`` carries a first-stage estimate when the estimator produces one,
    ``weight`` the weighting matrix actually used, and ``diagnostics`` free
    scalars such as condition numbers or excluded-draw counts.
    """

    beta: np.ndarray
    estimator: str
    pi: np.ndarray | None = None
    weight: np.ndarray | None = None
    diagnostics: dict = field(default_factory=dict)


def tsls(data: Dataset, *, check: bool = True) -> StructuralEstimate:
    """Two-stage least squares through the reduced form.

    Computes OLS reduced-form coefficients (gamma_hat, pi_hat) and applies the
    plug-in map with weight Z'Z:

        beta_hat = (pi' (Z'Z) pi)^{-1} pi' (Z'Z) gamma.

    This is algebraically the classical projection form
    (X'PX)^{-1} X'PY with P the projection onto the instrument columns.
    """
    gamma, pi = _ols_coefficients(data)
    zz = data.z.T @ data.z
    beta = plug_in_beta(gamma, pi, zz, check=check)
    return StructuralEstimate(beta=beta, estimator="tsls", pi=pi, weight=zz)


def tsls_from_fit(fit: ReducedFormFit, weight: np.ndarray, *, check: bool = True) -> StructuralEstimate:
    """The 2SLS plug-in map applied to an existing reduced-form fit."""
    beta = plug_in_beta(fit.gamma, fit.pi, weight, check=check)
    return StructuralEstimate(beta=beta, estimator="tsls", pi=fit.pi, weight=np.asarray(weight, dtype=np.float64))


@dataclass(frozen=True)
class OptimalWeights:
    """Estimated per-cell weighting for the optimal IV estimator.

    ``moments[c]`` is the within-cell second moment of the structural
    residuals (eps_hat, v_hat) and ``inverse[c]`` its inverse.  The implied
    optimal instrument for an observation in cell c is
    ``(I_{1+d} (x) z_c) @ inverse[c]``, available via :meth:`instrument`.
    """

    partition: CellPartition
    moments: np.ndarray
    inverse: np.ndarray
    beta_initial: np.ndarray
    pi: np.ndarray

    def instrument(self, cell: int) -> np.ndarray:
        """Instrument matrix for cell, shape ((1+d) k, 1+d)."""
        return np.kron(self.inverse[cell], self.partition.cells[cell][:, None])


def build_optimal_weights(
    data: Dataset,
    beta_initial: np.ndarray,
    pi_fit: np.ndarray,
    partition: CellPartition | None = None,
) -> OptimalWeights:
    """Estimate the optimal-IV weighting from initial estimates.

    Structural residuals eps_hat = y - x' beta_initial (2SLS residuals in the
    default pipeline; beta itself is not consistently estimable under weak
    identification, which is exactly the noise the two-level RB procedure
    integrates out) and v_hat = x - pi_fit' z are formed per cell, and their
    joint second-moment matrix is estimated by the within-cell average.

    Raises
    ------
    Degenerate
        If a cell has fewer than d + 2 observations or a singular moment
        matrix.
    """
    if partition is None:
        partition = CellPartition.from_dataset(data)
    d = data.dims.d
    beta_initial = np.asarray(beta_initial, dtype=np.float64).reshape(d)
    pi_fit = np.asarray(pi_fit, dtype=np.float64)
    if pi_fit.shape != (data.dims.k, d):
        raise DimensionError(f"pi_fit has shape {pi_fit.shape}, expected {(data.dims.k, d)}")
    if np.any(partition.counts < d + 2):
        worst = int(partition.counts.min())
        raise Degenerate(f"smallest cell has {worst} observations; need at least d+2 = {d + 2}")
    moments = cell_cross_moments(partition, data)
    m = structural_residual_moments(moments, partition.counts, partition.cells, beta_initial, pi_fit)
    try:
        inverse = np.linalg.inv(m)
    except np.linalg.LinAlgError as exc:
        raise Degenerate(f"a cell residual moment matrix is singular: {exc}") from exc
    return OptimalWeights(
        partition=partition, moments=m, inverse=inverse,
        beta_initial=beta_initial, pi=pi_fit,
    )


def optimal_wls_pieces(
    partition: CellPartition,
    sums: np.ndarray,
    inverse: np.ndarray,
    n: int,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Moment matrices of the optimal-IV weighted least squares step.

    With instrument A_i = (I (x) z_i) Mc^{-1} for cell c(i), returns

        W   = E_n[A_i (I (x) z_i')]           ((1+d)k square),
        h_y = E_n[A_i (y_i, x_i')']           ((1+d)k,),
        H   = E_n[A_i G_i]                    ((1+d)k, d + dk),

    where G_i = [[x_i', 0], [0, I_d (x) z_i']] is the regressor block of the
    moment system (y_i, x_i')' = G_i (beta, vec pi)' + (eps_i, v_i')'.
    W^{-1} h_y is the WLS estimate of psi and W^{-1} H its expected Jacobian.
    All three reduce to sums over cells.
    """
    counts = partition.counts.astype(np.float64)
    z = partition.cells
    k = z.shape[1]
    one_d = inverse.shape[1]
    d = one_d - 1
    fn = float(n)
    a4 = np.einsum("c,cab,ci,cj->aibj", counts, inverse, z, z)
    p = one_d * k
    w = a4.reshape(p, p) / fn
    h_y = np.einsum("cab,cb,ci->ai", inverse, sums, z).reshape(p) / fn
    h_beta = np.einsum("ca,ci,cm->aim", inverse[:, :, 0], z, sums[:, 1:]).reshape(p, d) / fn
    h_pi = a4[:, :, 1:, :].reshape(p, d * k) / fn
    return w, h_y, np.concatenate([h_beta, h_pi], axis=1)


def solve_optimal_theta(
    w: np.ndarray, h_y: np.ndarray, h: np.ndarray, *, check: bool = True
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Solve the optimal-IV WLS system.

    Returns (theta, psi_wls, s) where psi_wls = W^{-1} h_y, s = W^{-1} H, and
    theta = (s's)^{-1} s' psi_wls is the left-inverse solution stacking
    (beta, vec pi).
    """
    stacked = np.column_stack([h_y, h])
    if check:
        cond = np.linalg.cond(w)
        if not np.isfinite(cond) or cond >= COND_CAP:
            raise RankDeficient(f"WLS moment matrix condition number {cond:.3e} at or above cap")
        sol = np.linalg.solve(w, stacked)
    else:
        try:
            sol = np.linalg.solve(w, stacked)
        except np.linalg.LinAlgError:
            q = h.shape[1]
            nanv = np.full(q, np.nan)
            return nanv, np.full(h_y.shape[0], np.nan), np.full(h.shape, np.nan)
    psi_wls = sol[:, 0]
    s = sol[:, 1:]
    gram = s.T @ s
    rhs = s.T @ psi_wls
    if check:
        cond = np.linalg.cond(gram)
        if not np.isfinite(cond) or cond >= COND_CAP:
            raise RankDeficient(f"Jacobian gram matrix condition number {cond:.3e} at or above cap")
        theta = np.linalg.solve(gram, rhs)
    else:
        try:
            theta = np.linalg.solve(gram, rhs)
        except np.linalg.LinAlgError:
            theta = np.full(s.shape[1], np.nan)
    return theta, psi_wls, s


def optimal_iv(
    data: Dataset, weights: OptimalWeights | None = None, *, check: bool = True
) -> StructuralEstimate:
    """Optimal instrumental variables under cell heteroskedasticity.

    The conditional-moment-optimal instrument is A(z) = (I (x) z) M(z)^{-1}
    with M(z) the conditional second moment of (eps, v) given z.  The
    estimator solves the implied weighted least squares problem: first the
    WLS estimate of the reduced-form stack psi under the estimated weights,
    then the left inverse of the averaged regressor Jacobian maps psi to
    theta = (beta, vec pi).

    When ``weights`` is omitted they are built from 2SLS residuals and the
    OLS first stage.
    """
    if weights is None:
        init = tsls(data, check=check)
        weights = build_optimal_weights(data, init.beta, init.pi, None)
    partition = weights.partition
    d = data.dims.d
    sums = cell_sums(partition, data)
    w, h_y, h = optimal_wls_pieces(partition, sums, weights.inverse, data.dims.n)
    theta, _, _ = solve_optimal_theta(w, h_y, h, check=check)
    beta = theta[:d]
    pi_hat = theta[d:].reshape((data.dims.k, d), order="F")
    return StructuralEstimate(beta=beta, estimator="optimal_iv", pi=pi_hat, weight=w)


def two_step_gmm(data: Dataset, *, check: bool = True) -> StructuralEstimate:
    """Two-step GMM on the unconditional moments E[z (y - x' beta)] = 0.

    First step: 2SLS.  Second step minimizes the quadratic form
    (gamma - pi b)' Z'Z W Z'Z (gamma - pi b) where the weight is
    W = E_n[eps_hat^2 z z']^{-1} at the first-step residuals, via the plug-in
    map with weight Z'Z W Z'Z.
    """
    gamma, pi = _ols_coefficients(data)
    zz = data.z.T @ data.z
    beta0 = plug_in_beta(gamma, pi, zz, check=check)
    if not np.all(np.isfinite(beta0)):
        return StructuralEstimate(beta=np.full(data.dims.d, np.nan), estimator="two_step_gmm", pi=pi)
    eps = data.y - data.x @ beta0
    meat = np.einsum("n,ni,nj->ij", eps * eps, data.z, data.z) / data.dims.n
    if check:
        cond = np.linalg.cond(meat)
        if not np.isfinite(cond) or cond >= COND_CAP:
            raise RankDeficient(f"GMM weight condition number {cond:.3e} at or above cap")
        w_inner = np.linalg.inv(meat)
    else:
        try:
            w_inner = np.linalg.inv(meat)
        except np.linalg.LinAlgError:
            return StructuralEstimate(beta=np.full(data.dims.d, np.nan), estimator="two_step_gmm", pi=pi)
    weight = zz @ w_inner @ zz
    beta = plug_in_beta(gamma, pi, weight, check=check)
    return StructuralEstimate(beta=beta, estimator="two_step_gmm", pi=pi, weight=weight)


def fuller(data: Dataset, c: float = 1.0, *, check: bool = True) -> StructuralEstimate:
    """Fuller-type adjustment: shrink the projection toward the identity.

    Replaces the instrument projection P by P_c = P + (c/n)(I - P) in the
    projection form of 2SLS:

        beta_hat = (X' P_c X)^{-1} X' P_c Y.

    c = 0 recovers 2SLS exactly; as c grows the estimator tends to OLS of
    y on x.  Computed through k x k cross products, never an n x n matrix.
    """
    if c < 0:
        raise ConfigError(f"fuller adjustment must be nonnegative, got {c}")
    n = data.dims.n
    zz = data.z.T @ data.z
    zxy = data.z.T @ np.column_stack([data.y, data.x])
    sol = np.linalg.solve(zz, zxy)
    xpy = zxy[:, 1:].T @ sol[:, 0]
    xpx = zxy[:, 1:].T @ sol[:, 1:]
    xx = data.x.T @ data.x
    xy = data.x.T @ data.y
    frac = c / float(n)
    lhs = xpx + frac * (xx - xpx)
    rhs = xpy + frac * (xy - xpy)
    if check:
        cond = np.linalg.cond(lhs)
        if not np.isfinite(cond) or cond >= COND_CAP:
            raise RankDeficient(f"X' P_c X condition number {cond:.3e} at or above cap")
        beta = np.linalg.solve(lhs, rhs)
    else:
        try:
            beta = np.linalg.solve(lhs, rhs)
        except np.linalg.LinAlgError:
            beta = np.full(data.dims.d, np.nan)
    return StructuralEstimate(beta=beta, estimator="fuller", diagnostics={"c": float(c)})


class VarianceConvention(enum.Enum):
    """Denominator convention in the unbiased estimator's covariance ratio.

    AS_PRINTED divides the gamma-pi covariance by the gamma variance; the
    construction of the underlying unbiased ratio argument suggests the pi
    variance instead (PI_VARIANCE).  Both are implemented; neither is treated
    as the silently correct one.
    """

    AS_PRINTED = "printed"
    PI_VARIANCE = "pi"


def mills_ratio(t: np.ndarray | float) -> np.ndarray | float:
    """Inverse Mills ratio (1 - Phi(t)) / phi(t), numerically stable.

    Uses the scaled complementary error function:
    (1 - Phi(t)) / phi(t) = sqrt(pi/2) * erfcx(t / sqrt(2)), accurate in
    double precision for all practically reachable t (no 0/0 for large t).
    """
    return np.sqrt(np.pi / 2.0) * erfcx(np.asarray(t, dtype=np.float64) / np.sqrt(2.0))


def unbiased_scalar(
    fit: ReducedFormFit,
    variance_convention: VarianceConvention | str = VarianceConvention.AS_PRINTED,
) -> StructuralEstimate:
    """Unbiased estimator of beta for the scalar just-identified model (d = k = 1).

    With a known sign pi > 0, an unbiased estimator of the ratio gamma / pi
    exists.  Writing t = sqrt(n) pi_hat / sigma_pi and r for the covariance
    ratio (convention-dependent denominator), the estimator is

        beta_hat = [(1 - Phi(t)) / (sigma_pi phi(t))] (gamma_hat - r pi_hat) + r,

    where sigma terms are on the root-n scale, i.e. sigma^2 = n * cond_cov
    entries of the fit.
    """
    convention = VarianceConvention(variance_convention)
    if fit.k != 1 or fit.d != 1:
        raise DimensionError(f"unbiased estimator needs d = k = 1, got k={fit.k}, d={fit.d}")
    n = float(fit.n_obs)
    cov = fit.cond_cov
    sigma2_gamma = n * cov[0, 0]
    sigma2_pi = n * cov[1, 1]
    sigma_gamma_pi = n * cov[0, 1]
    if sigma2_pi <= 0.0:
        raise RankDeficient("first-stage variance estimate is not positive")
    sigma_pi = np.sqrt(sigma2_pi)
    pi_hat = fit.pi[0, 0]
    gamma_hat = fit.gamma[0]
    t = np.sqrt(n) * pi_hat / sigma_pi
    denom = sigma2_gamma if convention is VarianceConvention.AS_PRINTED else sigma2_pi
    if denom <= 0.0:
        raise RankDeficient("variance denominator is not positive")
    ratio = sigma_gamma_pi / denom
    beta = mills_ratio(t) / sigma_pi * (gamma_hat - ratio * pi_hat) + ratio
    return StructuralEstimate(
        beta=np.array([beta]),
        estimator="unbiased",
        pi=fit.pi.copy(),
        diagnostics={"t": float(t), "variance_convention": convention.value},
    )
