"""Dense linear algebra kernel.

Householder QR with optional Businger-Golub column pivoting, minimum-norm
least squares built on top of it, and a power-iteration spectral norm.
Everything runs in float64 regardless of the input dtype.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import solve_triangular

from .errors import ValidationError

_EPS = np.finfo(np.float64).eps
# relative slack for treating two residual column norms as tied
_TIE_RTOL = 8 * _EPS
# pivots below this fraction of |R[0, 0]| count as zero in least squares
LSTSQ_RCOND = 1e-12


def as_matrix(a, name="matrix"):
    """Return ``a`` as a finite, nonempty 2-D float64 array (always a copy)."""
    arr = np.array(a, dtype=np.float64, copy=True)
    if arr.ndim != 2:
        raise ValidationError(f"{name} must be 2-D, got shape {arr.shape}")
    if arr.size == 0:
        raise ValidationError(f"{name} is empty (shape {arr.shape})")
    if not np.all(np.isfinite(arr)):
        raise ValidationError(f"{name} contains non-finite entries")
    return arr


@dataclass
class QrFactorization:
    """Result of :func:`cpqr`: ``a[:, perm] = Q @ r``.

    ``r`` has ``min(rows, cols)`` rows. When the factorization stopped early
    at ``rank_used`` steps, rows past ``rank_used`` hold a triangularized copy
    of the untouched trailing block, so ``r[k:, k:]`` always carries the
    spectrum of R22 for ``k = rank_used``.
    """

    perm: np.ndarray
    r: np.ndarray
    rank_used: int
    pivoted: bool
    q: np.ndarray | None = None
    reflectors: list = field(default_factory=list, repr=False)

    @property
    def q_applied(self):
        return self.q is not None

    def rdiag(self):
        d = min(self.r.shape)
        return np.abs(np.diag(self.r[:d, :d]))

    def apply_qt(self, b):
        """Return ``Q^T b`` restricted to the Householder steps taken (``b`` is overwritten in a copy)."""
        out = np.array(b, dtype=np.float64, copy=True)
        vec = out.ndim == 1
        if vec:
            out = out[:, None]
        for i, (v, tau) in enumerate(self.reflectors):
            if tau == 0.0:
                continue
            out[i:] -= tau * np.outer(v, v @ out[i:])
        return out[:, 0] if vec else out


def _pick_pivot(norms, orig_index):
    mx = norms.max()
    if mx == 0.0:
        cand = np.arange(len(norms))
    else:
        cand = np.flatnonzero(norms >= mx * (1.0 - _TIE_RTOL))
    return int(cand[np.argmin(orig_index[cand])])


def _trailing_below(block, threshold, seed=0):
    if block.size == 0:
        return True
    if np.linalg.norm(block) <= threshold:
        return True
    return spectral_norm(block, iters=20, seed=seed) <= threshold


def cpqr(a, pivot=True, rank=None, tol=None, keep_q=False, stop_rule="block"):
    """Householder QR, column-pivoted by default.

    Parameters
    ----------
    a : array_like, shape (n, m)
    pivot : bool
        Greedy max-residual-norm pivoting (ties go to the lowest original column).
    rank : int, optional
        Stop after ``rank`` steps.
    tol : float, optional
        Stop at the smallest k with ``||R22||_2 <= tol * ||a||_2``
        (``stop_rule="block"``) or ``|R[k, k]| <= tol * |R[0, 0]|`` (``"diag"``).
    keep_q : bool
        Form Q explicitly (n x min(n, m)).
    """
    a = as_matrix(a)
    n, m = a.shape
    ell = min(n, m)
    if rank is not None and tol is not None:
        raise ValidationError("give at most one of rank and tol")
    if rank is not None:
        rank = int(rank)
        if not 0 <= rank <= ell:
            raise ValidationError(f"rank {rank} out of range [0, {ell}]")
    if tol is not None and not tol >= 0:
        raise ValidationError(f"tol must be >= 0, got {tol}")
    if stop_rule not in ("block", "diag"):
        raise ValidationError(f"unknown stop_rule {stop_rule!r}")

    w = a
    perm = np.arange(m)
    reflectors = []
    target = ell if rank is None else rank
    every = 1 if m <= 512 else 32
    threshold = None
    if tol is not None and stop_rule == "block":
        threshold = tol * spectral_norm(a, iters=30, seed=0)
    r00 = None

    k = 0
    while k < target:
        if threshold is not None and k % every == 0 and _trailing_below(w[k:, k:], threshold):
            # the spectrum of w[j:, j:] is frozen once step j starts, so we can scan back
            lo = max(0, k - every + 1)
            for j in range(lo, k + 1):
                if _trailing_below(w[j:, j:], threshold):
                    k = j
                    break
            break
        if pivot:
            norms = np.sqrt(np.einsum("ij,ij->j", w[k:, k:], w[k:, k:]))
            j = k + _pick_pivot(norms, perm[k:])
            if j != k:
                w[:, [k, j]] = w[:, [j, k]]
                perm[[k, j]] = perm[[j, k]]
        x = w[k:, k]
        alpha = float(np.linalg.norm(x))
        if tol is not None and stop_rule == "diag":
            if r00 is None:
                r00 = alpha
            if alpha <= tol * r00:
                break
        if alpha == 0.0:
            reflectors.append((np.zeros(n - k), 0.0))
        else:
            sign = 1.0 if x[0] >= 0 else -1.0
            v = x.copy()
            v[0] += sign * alpha
            v /= v[0]
            tau = 2.0 / float(v @ v)
            if k + 1 < m:
                sub = w[k:, k + 1:]
                sub -= tau * np.outer(v, v @ sub)
            w[k, k] = -sign * alpha
            w[k + 1:, k] = 0.0
            reflectors.append((v, tau))
        k += 1

    trailing_q = None
    if k < ell and n > m:
        # compress the (n-k) x (m-k) trailing block to (m-k) rows
        qt, rt = np.linalg.qr(w[k:, k:])
        r = np.zeros((ell, m))
        r[:k] = w[:k]
        r[k:, k:] = rt
        trailing_q = qt
    else:
        r = w[:ell].copy()

    q = None
    if keep_q:
        q = np.zeros((n, ell))
        q[:k, :k] = np.eye(k)
        if k < ell:
            q[k:, k:] = trailing_q if trailing_q is not None else np.eye(n - k, ell - k)
        for i in range(len(reflectors) - 1, -1, -1):
            v, tau = reflectors[i]
            if tau != 0.0:
                q[i:] -= tau * np.outer(v, v @ q[i:])

    return QrFactorization(perm=perm, r=r, rank_used=k, pivoted=pivot, q=q, reflectors=reflectors)


def least_squares(a, b):
    """Minimum-norm minimizer of ``||a X - b||_F``.

    Rank is decided from the pivoted R diagonal with a relative threshold of
    ``LSTSQ_RCOND``; the rank-deficient case goes through a second QR of the
    leading rows (complete orthogonal decomposition).
    """
    a = as_matrix(a, "a")
    b_arr = np.asarray(b, dtype=np.float64)
    vec = b_arr.ndim == 1
    b2 = b_arr[:, None] if vec else b_arr
    if b2.ndim != 2 or b2.shape[0] != a.shape[0]:
        raise ValidationError(f"row mismatch: a is {a.shape}, b is {b_arr.shape}")
    if not np.all(np.isfinite(b2)):
        raise ValidationError("b contains non-finite entries")
    p = a.shape[1]
    f = cpqr(a, pivot=True)
    d = f.rdiag()
    if d.size == 0 or d[0] == 0.0:
        x = np.zeros((p, b2.shape[1]))
        return x[:, 0] if vec else x
    rnk = int(np.count_nonzero(d > LSTSQ_RCOND * d[0]))
    c = f.apply_qt(b2)[:rnk]
    r1 = f.r[:rnk]
    if rnk == p:
        y = solve_triangular(r1[:, :rnk], c, lower=False)
    else:
        g = cpqr(r1.T, pivot=False, keep_q=True)
        u = g.r[:rnk, :rnk]
        s = solve_triangular(u.T, c, lower=True)
        y = g.q @ s
    x = np.empty((p, b2.shape[1]))
    x[f.perm] = y
    return x[:, 0] if vec else x


def spectral_norm(a, iters=20, seed=0):
    """Power-iteration estimate of the largest singular value (never above it)."""
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 2 or a.size == 0:
        raise ValidationError(f"spectral_norm needs a nonempty 2-D matrix, got shape {a.shape}")
    if iters < 1:
        raise ValidationError("iters must be >= 1")
    rng = np.random.default_rng(seed)
    v = rng.standard_normal(a.shape[1])
    v /= np.linalg.norm(v)
    for _ in range(iters):
        v = a.T @ (a @ v)
        nv = np.linalg.norm(v)
        if nv == 0.0:
            return 0.0
        v /= nv
    return float(np.linalg.norm(a @ v))


def singular_values_oracle(a):
    """All singular values, nonincreasing. Dense SVD; meant for tests and small inputs."""
    a = as_matrix(a)
    return np.linalg.svd(a, compute_uv=False)
