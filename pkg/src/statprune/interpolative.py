"""Interpolative decompositions built from a pivoted QR.

``a ~= a[:, I] @ t`` where ``I`` are actual columns of ``a`` and
``t = [I_k, R11^{-1} R12] P^T``. The spectral error of that approximation is
exactly ``||R22||_2``, which is what makes the trailing block of R a usable
per-layer error proxy.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from scipy.linalg import solve_triangular

from .errors import SingularFactorError, ValidationError
from .linalg import QrFactorization, as_matrix, cpqr, spectral_norm

log = logging.getLogger(__name__)

# |R[k-1, k-1]| below this fraction of |R[0, 0]| means R11 is singular
SINGULAR_RTOL = 1e-12
# interpolation coefficients larger than this get a diagnostic
LARGE_T = 1e3
# dense SVD for ||R22||_2 below this many columns, power iteration above
_EXACT_NORM_MAX_COLS = 2048


@dataclass
class IDResult:
    indices: np.ndarray  # kept columns, ascending
    t: np.ndarray  # k x m, t[:, indices] == I_k
    err2: float
    err_f: float
    rdiag: np.ndarray

    @property
    def k(self):
        return len(self.indices)


def _block_norm2(block):
    if block.size == 0:
        return 0.0
    if min(block.shape) <= _EXACT_NORM_MAX_COLS:
        return float(np.linalg.norm(block, 2))
    return spectral_norm(block, iters=200, seed=0)


def id_from_factorization(f: QrFactorization, k: int) -> IDResult:
    """Truncate a pivoted factorization at rank ``k`` and build the ID.

    ``f`` must carry at least ``k`` completed steps; a full factorization can
    be reused for every ``k`` without refactoring.
    """
    if not f.pivoted:
        raise ValidationError("an ID needs a column-pivoted factorization")
    m = f.r.shape[1]
    if not 0 <= k <= f.rank_used:
        raise ValidationError(f"k={k} exceeds the {f.rank_used} factorization steps available")
    r = f.r
    rd = f.rdiag()
    if k > 0 and rd[k - 1] <= SINGULAR_RTOL * rd[0]:
        raise SingularFactorError(
            f"R11 is singular at k={k} (|R[k-1,k-1]|={rd[k - 1]:.3e}); reduce k"
        )
    coeff = np.zeros((k, m))
    coeff[:, :k] = np.eye(k)
    if 0 < k < m:
        coeff[:, k:] = solve_triangular(r[:k, :k], r[:k, k:], lower=False)
    # rows in pivot order -> rows in ascending index order, columns back to original order
    kept = f.perm[:k]
    row_order = np.argsort(kept, kind="stable")
    t = np.empty((k, m))
    t[:, f.perm] = coeff[row_order]
    if k and np.abs(t).max() > LARGE_T:
        log.warning("interpolation matrix has entries up to %.3g", np.abs(t).max())
    trailing = r[k:, k:]
    return IDResult(
        indices=kept[row_order].copy(),
        t=t,
        err2=_block_norm2(trailing),
        err_f=float(np.linalg.norm(trailing)),
        rdiag=rd[: f.rank_used].copy(),
    )


def interpolative_decomposition(a, rank=None, tol=None, stop_rule="block") -> IDResult:
    """Column ID of ``a`` with ``rank`` columns, or the fewest columns meeting ``tol``."""
    a = as_matrix(a)
    if rank is None and tol is None:
        raise ValidationError("give rank or tol")
    f = cpqr(a, pivot=True, rank=rank, tol=tol, stop_rule=stop_rule)
    return id_from_factorization(f, f.rank_used)


def error_curve(f: QrFactorization) -> np.ndarray:
    """``tail[k] = ||R[k:, k:]||_F`` for ``k = 0..cols``, from a full pivoted run."""
    if not f.pivoted:
        raise ValidationError("error_curve needs a column-pivoted factorization")
    ell, m = f.r.shape
    if f.rank_used < ell:
        raise ValidationError("error_curve needs a full factorization")
    # R is upper trapezoidal, so the trailing block of row i starts at or after column i
    row_sq = np.einsum("ij,ij->i", f.r, f.r)
    tail = np.zeros(m + 1)
    tail[:ell] = np.cumsum(row_sq[::-1])[::-1]
    return np.sqrt(tail)


def next_layer_weighting(z, w_next):
    """Scale column j of ``z`` by the 2-norm of row j of ``w_next``."""
    z = np.asarray(z, dtype=np.float64)
    w_next = np.asarray(w_next, dtype=np.float64)
    if z.ndim != 2 or w_next.ndim != 2 or w_next.shape[0] != z.shape[1]:
        raise ValidationError(
            f"w_next needs one row per column of z: z {z.shape}, w_next {w_next.shape}"
        )
    return z * np.linalg.norm(w_next, axis=1)[None, :]
