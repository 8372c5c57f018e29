"""Shared vocabulary: problem dimensions, data containers, basic IV algebra.

The model throughout the package is a linear IV system with ``k`` instruments
and ``d`` endogenous regressors,

    y_i = x_i' beta + eps_i,        x_i = pi' z_i + v_i,

with E[eps | z] = E[v | z] = 0.  Substituting gives the reduced form
``y_i = z_i' gamma + u_i`` with ``gamma = pi @ beta``: beta enters the data
distribution only through the reduced-form coefficients, which is what every
estimator here ultimately exploits.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Protocol, runtime_checkable

import numpy as np

from .exceptions import DimensionError, NonPSD, RankDeficient

#: Condition-number cap for matrices that single-shot calls must invert.
COND_CAP = 1e12

#: Eigenvalue tolerance for positive-semidefinite checks and projections.
PSD_TOL = 1e-10


def as_array(a, name: str) -> np.ndarray:
    out = np.asarray(a, dtype=np.float64)
    if not np.all(np.isfinite(out)):
        raise DimensionError(f"{name} contains non-finite entries")
    return out


def check_shape(a: np.ndarray, shape: tuple[int, ...], name: str) -> np.ndarray:
    if a.shape != shape:
        raise DimensionError(f"{name} has shape {a.shape}, expected {shape}")
    return a


@dataclass(frozen=True)
class Dims:
    """Problem dimensions: ``n`` observations, ``k`` instruments, ``d`` regressors."""

    n: int
    k: int
    d: int

    def __post_init__(self) -> None:
        if self.d < 1:
            raise DimensionError(f"d must be >= 1, got {self.d}")
        if self.k < self.d:
            raise DimensionError(f"need k >= d, got k={self.k}, d={self.d}")
        if self.n < 1:
            raise DimensionError(f"n must be >= 1, got {self.n}")

    @property
    def psi(self) -> int:
        """Length of the stacked reduced-form coefficient vector, k + k*d."""
        return self.k * (1 + self.d)


@dataclass(frozen=True)
class Dataset:
    """One sample: outcome ``y`` (n,), regressors ``x`` (n, d), instruments ``z`` (n, k).

    Construction validates shapes and finiteness.  Full column rank of ``z``
    is checked at load time (:func:`weakiv.cli.load_csv_dataset`), not here,
    so simulation loops stay cheap.
    """

    y: np.ndarray
    x: np.ndarray
    z: np.ndarray

    def __post_init__(self) -> None:
        y = as_array(self.y, "y")
        x = as_array(self.x, "x")
        z = as_array(self.z, "z")
        if y.ndim != 1:
            raise DimensionError(f"y must be 1-d, got shape {y.shape}")
        n = y.shape[0]
        if x.ndim != 2 or x.shape[0] != n:
            raise DimensionError(f"x must be (n, d) with n={n}, got {x.shape}")
        if z.ndim != 2 or z.shape[0] != n:
            raise DimensionError(f"z must be (n, k) with n={n}, got {z.shape}")
        if z.shape[1] < x.shape[1]:
            raise DimensionError(
                f"need at least as many instruments as regressors, got k={z.shape[1]} < d={x.shape[1]}"
            )
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "z", z)

    @property
    def dims(self) -> Dims:
        return Dims(n=self.y.shape[0], k=self.z.shape[1], d=self.x.shape[1])


class IdentificationMode(enum.Enum):
    """Whether the first-stage coefficients are held fixed or shrink with n."""

    WEAK = "weak"
    STRONG = "strong"


@dataclass(frozen=True)
class StructuralParams:
    """True structural parameters of a simulation design.

    ``pi_base`` is the unscaled first-stage matrix.  Under
    ``IdentificationMode.WEAK`` the effective first stage for a sample of size
    n is ``pi_base / sqrt(n)`` (local-to-zero identification); under STRONG it
    is ``pi_base`` itself.
    """

    beta: np.ndarray
    pi_base: np.ndarray
    mode: IdentificationMode = IdentificationMode.STRONG

    def __post_init__(self) -> None:
        beta = as_array(self.beta, "beta")
        pi = as_array(self.pi_base, "pi_base")
        if beta.ndim != 1:
            raise DimensionError(f"beta must be 1-d, got shape {beta.shape}")
        if pi.ndim != 2:
            raise DimensionError(f"pi_base must be (k, d), got shape {pi.shape}")
        if pi.shape[1] != beta.shape[0]:
            raise DimensionError(
                f"pi_base has {pi.shape[1]} columns but beta has length {beta.shape[0]}"
            )
        if pi.shape[0] < pi.shape[1]:
            raise DimensionError(f"pi_base must be tall, got shape {pi.shape}")
        object.__setattr__(self, "beta", beta)
        object.__setattr__(self, "pi_base", pi)

    @property
    def d(self) -> int:
        return self.beta.shape[0]

    @property
    def k(self) -> int:
        return self.pi_base.shape[0]

    def effective_pi(self, n: int) -> np.ndarray:
        """First-stage matrix actually generating a sample of size ``n``."""
        if self.mode is IdentificationMode.WEAK:
            return self.pi_base / np.sqrt(float(n))
        return self.pi_base.copy()

    def effective_gamma(self, n: int) -> np.ndarray:
        """Reduced-form coefficient ``pi(n) @ beta`` for a sample of size ``n``."""
        return self.effective_pi(n) @ self.beta


@runtime_checkable
class LeftInvertible(Protocol):
    """Anything carrying a full-column-rank matrix representation."""

    def left_inverse(self) -> np.ndarray: ...


def left_inverse(a: np.ndarray, *, cond_cap: float = COND_CAP, check: bool = True) -> np.ndarray:
    """Left inverse ``(a' a)^{-1} a'`` of a tall full-column-rank matrix.

    Parameters
    ----------
    a : ndarray, shape (m, p)
        Matrix with m >= p.
    cond_cap : float
        Condition-number cap applied to ``a' a`` when ``check`` is true.
    check : bool
        If true (single-shot mode), raise :class:`RankDeficient` when
        ``a' a`` is singular or has condition number at or above the cap.
        If false (simulation mode), compute in full precision regardless;
        an exactly singular gram matrix yields non-finite output that the
        caller records as an extreme draw.

    Returns
    -------
    ndarray, shape (p, m)
        The unique matrix L with ``L @ a = I_p`` (when it exists).
    """
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] < a.shape[1]:
        raise DimensionError(f"left inverse needs a tall matrix, got shape {a.shape}")
    gram = a.T @ a
    if check:
        cond = np.linalg.cond(gram)
        if not np.isfinite(cond) or cond >= cond_cap:
            raise RankDeficient(
                f"gram matrix condition number {cond:.3e} at or above cap {cond_cap:.1e}"
            )
        return np.linalg.solve(gram, a.T)
    try:
        return np.linalg.solve(gram, a.T)
    except np.linalg.LinAlgError:
        return np.full((a.shape[1], a.shape[0]), np.nan)


def plug_in_beta(
    gamma: np.ndarray,
    pi: np.ndarray,
    weight: np.ndarray,
    *,
    cond_cap: float = COND_CAP,
    check: bool = True,
) -> np.ndarray:
    """Weighted plug-in map from reduced-form coefficients to beta.

    Computes ``(pi' W pi)^{-1} pi' W gamma`` for a positive (semi)definite
    weight ``W``.  With ``W = Z'Z`` this is exactly the two-stage least
    squares estimator expressed through the reduced form.

    Parameters
    ----------
    gamma : ndarray, shape (k,)
    pi : ndarray, shape (k, d)
    weight : ndarray, shape (k, k)
    cond_cap, check
        As in :func:`left_inverse`, applied to ``pi' W pi``.
    """
    gamma = np.asarray(gamma, dtype=np.float64)
    pi = np.asarray(pi, dtype=np.float64)
    weight = np.asarray(weight, dtype=np.float64)
    if pi.ndim != 2:
        raise DimensionError(f"pi must be (k, d), got shape {pi.shape}")
    k, d = pi.shape
    check_shape(gamma, (k,), "gamma")
    check_shape(weight, (k, k), "weight")
    wpi = weight @ pi
    gram = pi.T @ wpi
    rhs = wpi.T @ gamma
    if check:
        cond = np.linalg.cond(gram)
        if not np.isfinite(cond) or cond >= cond_cap:
            raise RankDeficient(
                f"pi' W pi condition number {cond:.3e} at or above cap {cond_cap:.1e}"
            )
        return np.linalg.solve(gram, rhs)
    try:
        return np.linalg.solve(gram, rhs)
    except np.linalg.LinAlgError:
        return np.full(d, np.nan)


@dataclass(frozen=True)
class PSDFactorization:
    """Result of projecting a symmetric matrix onto the PSD cone.

    ``matrix`` is the projected matrix, ``factor`` satisfies
    ``factor @ factor.T == matrix`` up to rounding, and ``clipped`` is the
    total magnitude of negative eigenvalues that were set to zero.
    """

    matrix: np.ndarray
    factor: np.ndarray
    clipped: float


def psd_factor(matrix: np.ndarray, *, tol: float = PSD_TOL, name: str = "matrix") -> PSDFactorization:
    """Symmetrize, check, and factor a nominally-PSD matrix.

    Eigenvalues in ``[-tol * scale, 0)`` are treated as rounding noise and
    clipped to zero; anything more negative raises :class:`NonPSD`.  The
    relative scale is the largest absolute eigenvalue (or 1 for a zero
    matrix), so the tolerance is meaningful across magnitudes.
    """
    m = np.asarray(matrix, dtype=np.float64)
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise DimensionError(f"{name} must be square, got shape {m.shape}")
    sym = 0.5 * (m + m.T)
    vals, vecs = np.linalg.eigh(sym)
    scale = max(float(np.max(np.abs(vals))), 1.0)
    if vals[0] < -tol * scale:
        raise NonPSD(
            f"{name} has eigenvalue {vals[0]:.6e} below -{tol:.1e} * scale; not positive semidefinite"
        )
    clipped = float(-np.sum(vals[vals < 0.0]))
    vals = np.clip(vals, 0.0, None)
    factor = vecs * np.sqrt(vals)
    projected = factor @ factor.T
    return PSDFactorization(matrix=0.5 * (projected + projected.T), factor=factor, clipped=clipped)
