"""Normalization and block analysis of IV models with nearly singular first stage.

When the first-stage matrix pi drifts toward a rank-deficient limit, the model
can be rotated into coordinates where the failure is isolated in a corner
block.  Whitening the instruments by E[zz']^{-1/2} and applying the singular
value decomposition of the whitened first stage puts the model in a normal
form with E[zz'] = I and pi diagonal with nonnegative, sorted entries: the
first ``rank`` diagonal entries are the strongly identified directions and the
rest vanish in the limit.

In these coordinates 2SLS decouples asymptotically into a strong block solved
exactly and a weak block solved by least squares on the residual instruments;
:func:`block_tsls` evaluates that two-block formula so the decoupling is a
checkable numerical identity rather than a purely asymptotic statement.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import COND_CAP, Dataset
from .exceptions import DimensionError, NonPSD, RankDeficient

_SIGN_EPS = 1e-12


@dataclass(frozen=True)
class NormalizedModel:
    """Transforms putting a model into whitened, diagonal-first-stage form.

    For original data (y, x, z) the transformed model uses
    z* = U' W z, x* = V' x (y unchanged), where ``whitening`` W = E[zz']^{-1/2}
    and (U, V) are the rotations of the SVD of the whitened first stage.  The
    transformed first stage is ``pi``: a k x d matrix, zero off the main
    diagonal, with entries sorted descending and the first ``rank`` strictly
    positive.  Structural coefficients map as beta* = V' beta.
    """

    whitening: np.ndarray
    u: np.ndarray
    v: np.ndarray
    pi: np.ndarray
    rank: int
    rank_detected: bool

    @property
    def singular_values(self) -> np.ndarray:
        return np.diagonal(self.pi).copy()


def _first_nonzero_sign(col: np.ndarray) -> float:
    idx = np.flatnonzero(np.abs(col) > _SIGN_EPS)
    if idx.size == 0:
        return 1.0
    return 1.0 if col[idx[0]] > 0 else -1.0


def normalize_model(
    ezz: np.ndarray, pi: np.ndarray, tol: float = 1e-10, rank: int | None = None
) -> NormalizedModel:
    """Whiten instruments and diagonalize the first stage.

    Parameters
    ----------
    ezz : ndarray, shape (k, k)
        Population (or sample) second moment of the instruments; must be
        symmetric positive definite.
    pi : ndarray, shape (k, d)
        First-stage coefficient matrix in the original coordinates.
    tol : float
        Relative threshold: singular values below ``tol`` times the largest
        are treated as exact zeros.
    rank : int, optional
        Number of nonzero diagonal entries to keep.  When omitted the rank is
        detected by thresholding and reported via ``rank_detected``.

    Returns
    -------
    NormalizedModel
        Deterministic up to nothing: signs are pinned by requiring each
        column of U to have a positive first nonzero entry (columns of V are
        flipped jointly where the singular value is positive, independently
        where it is zero, preserving U S V' exactly).
    """
    ezz = np.asarray(ezz, dtype=np.float64)
    pi = np.asarray(pi, dtype=np.float64)
    if ezz.ndim != 2 or ezz.shape[0] != ezz.shape[1]:
        raise DimensionError(f"ezz must be square, got shape {ezz.shape}")
    k = ezz.shape[0]
    if pi.ndim != 2 or pi.shape[0] != k:
        raise DimensionError(f"pi must be (k, d) with k={k}, got shape {pi.shape}")
    d = pi.shape[1]
    if not np.allclose(ezz, ezz.T, atol=1e-10 * max(1.0, float(np.abs(ezz).max()))):
        raise NonPSD("ezz is not symmetric")
    vals, vecs = np.linalg.eigh(0.5 * (ezz + ezz.T))
    if vals[0] <= tol * max(float(vals[-1]), 1.0):
        raise NonPSD(f"ezz has eigenvalue {vals[0]:.3e}; not positive definite")
    whitening = (vecs / np.sqrt(vals)) @ vecs.T
    sqrt_ezz = (vecs * np.sqrt(vals)) @ vecs.T

    u, s, vt = np.linalg.svd(sqrt_ezz @ pi, full_matrices=True)
    v = vt.T

    top = float(s[0]) if s.size else 0.0
    kept = s.copy()
    if rank is None:
        detected = int(np.sum(kept > tol * top)) if top > 0.0 else 0
        rank_value, rank_detected = detected, True
    else:
        if not 0 <= rank <= min(k, d):
            raise DimensionError(f"rank must be in [0, {min(k, d)}], got {rank}")
        rank_value, rank_detected = int(rank), False
    kept[rank_value:] = 0.0

    # Sign pinning: where the singular value is positive, U and V columns flip
    # together; where it is zero (or the U column is beyond d), each side is
    # free and is pinned independently.
    for j in range(k):
        paired = j < d and j < kept.size and kept[j] > 0.0
        sign = _first_nonzero_sign(u[:, j])
        u[:, j] *= sign
        if paired:
            v[:, j] *= sign
    for j in range(d):
        paired = j < kept.size and kept[j] > 0.0
        if not paired:
            v[:, j] *= _first_nonzero_sign(v[:, j])

    pi_norm = np.zeros((k, d))
    np.fill_diagonal(pi_norm, kept[: min(k, d)])
    return NormalizedModel(
        whitening=whitening, u=u, v=v, pi=pi_norm,
        rank=rank_value, rank_detected=rank_detected,
    )


def apply_normalization(model: NormalizedModel, data: Dataset) -> Dataset:
    """Transform a dataset into the normalized coordinates of ``model``."""
    if data.z.shape[1] != model.u.shape[0]:
        raise DimensionError(
            f"data has k={data.z.shape[1]} but model expects k={model.u.shape[0]}"
        )
    if data.x.shape[1] != model.v.shape[0]:
        raise DimensionError(
            f"data has d={data.x.shape[1]} but model expects d={model.v.shape[0]}"
        )
    return Dataset(
        y=data.y.copy(),
        x=data.x @ model.v,
        z=data.z @ model.whitening @ model.u,
    )


@dataclass(frozen=True)
class BlockFit:
    """Reduced-form estimates partitioned at the identification rank.

    In normalized coordinates with rank ``l``, gamma splits into (gamma1: l,
    gamma2: k-l) and pi into [[pi11, pi12], [pi21, pi22]] with pi11 of shape
    (l, l) and pi22 of shape (k-l, d-l).
    """

    gamma1: np.ndarray
    gamma2: np.ndarray
    pi11: np.ndarray
    pi12: np.ndarray
    pi21: np.ndarray
    pi22: np.ndarray

    def __post_init__(self) -> None:
        l = self.gamma1.shape[0]
        km = self.gamma2.shape[0]
        if self.pi11.shape != (l, l):
            raise DimensionError(f"pi11 has shape {self.pi11.shape}, expected ({l}, {l})")
        dm = self.pi12.shape[1]
        if self.pi12.shape != (l, dm):
            raise DimensionError(f"pi12 has shape {self.pi12.shape}, expected ({l}, {dm})")
        if self.pi21.shape != (km, l):
            raise DimensionError(f"pi21 has shape {self.pi21.shape}, expected ({km}, {l})")
        if self.pi22.shape != (km, dm):
            raise DimensionError(f"pi22 has shape {self.pi22.shape}, expected ({km}, {dm})")

    @property
    def rank(self) -> int:
        return self.gamma1.shape[0]

    @property
    def d(self) -> int:
        return self.rank + self.pi12.shape[1]

    @property
    def k(self) -> int:
        return self.rank + self.gamma2.shape[0]

    @classmethod
    def from_fit(cls, gamma: np.ndarray, pi: np.ndarray, rank: int) -> "BlockFit":
        gamma = np.asarray(gamma, dtype=np.float64)
        pi = np.asarray(pi, dtype=np.float64)
        if pi.ndim != 2 or gamma.ndim != 1 or pi.shape[0] != gamma.shape[0]:
            raise DimensionError(
                f"need gamma (k,) and pi (k, d); got {gamma.shape} and {pi.shape}"
            )
        k, d = pi.shape
        if not 0 <= rank <= min(k, d):
            raise DimensionError(f"rank must be in [0, {min(k, d)}], got {rank}")
        return cls(
            gamma1=gamma[:rank], gamma2=gamma[rank:],
            pi11=pi[:rank, :rank], pi12=pi[:rank, rank:],
            pi21=pi[rank:, :rank], pi22=pi[rank:, rank:],
        )


def block_tsls(fit: BlockFit, n: int, *, check: bool = True) -> np.ndarray:
    """Two-block closed form of 2SLS in normalized coordinates.

    The strong block solves the square system pi11 b1 = gamma1; the weak
    block regresses the residual gamma2 - pi21 b1 on pi22:

        b1 = pi11^{-1} gamma1,
        b2 = (pi22' pi22)^{-1} pi22' (gamma2 - pi21 b1).

    The root-n normalization factors in the underlying asymptotics cancel in
    both blocks, so ``n`` does not enter the arithmetic; it is kept in the
    signature because the fit is only meaningful relative to a sample size.
    Returns the stacked (d,) vector.
    """
    if n < 1:
        raise DimensionError(f"n must be >= 1, got {n}")
    l = fit.rank
    if l > 0:
        if check:
            cond = np.linalg.cond(fit.pi11)
            if not np.isfinite(cond) or cond >= COND_CAP:
                raise RankDeficient(
                    f"strong-block matrix condition number {cond:.3e} at or above cap"
                )
        try:
            b1 = np.linalg.solve(fit.pi11, fit.gamma1)
        except np.linalg.LinAlgError:
            if check:
                raise RankDeficient("strong-block matrix is singular") from None
            b1 = np.full(l, np.nan)
    else:
        b1 = np.zeros(0)
    if fit.d - l > 0:
        gram = fit.pi22.T @ fit.pi22
        rhs = fit.pi22.T @ (fit.gamma2 - fit.pi21 @ b1)
        if check:
            cond = np.linalg.cond(gram)
            if not np.isfinite(cond) or cond >= COND_CAP:
                raise RankDeficient(
                    f"weak-block gram matrix condition number {cond:.3e} at or above cap"
                )
        try:
            b2 = np.linalg.solve(gram, rhs)
        except np.linalg.LinAlgError:
            if check:
                raise RankDeficient("weak-block gram matrix is singular") from None
            b2 = np.full(fit.d - l, np.nan)
    else:
        b2 = np.zeros(0)
    return np.concatenate([b1, b2])
