"""Streaming row sketches (CountSketch, Gaussian) and grouped column selection.

Random draws come from a counter-based hash keyed by ``(seed, global row)``,
so the accumulated sketch depends only on the row stream and never on how
it was split into blocks.
"""
from __future__ import annotations

import math

import numpy as np

from .errors import ValidationError
from .linalg import as_matrix, cpqr

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)
_LOW32 = np.uint64(0xFFFFFFFF)

# Gaussian sketches commit rows in fixed, globally aligned chunks so BLAS
# summation order never depends on the caller's block sizes
GAUSSIAN_CHUNK = 256


def _mix64(x):
    # splitmix64 finalizer; x is a uint64 array, arithmetic wraps
    z = x ^ (x >> np.uint64(30))
    z = z * _M1
    z = z ^ (z >> np.uint64(27))
    z = z * _M2
    return z ^ (z >> np.uint64(31))


def _stream_key(seed, stream):
    base = np.array([(int(seed) & 0xFFFFFFFFFFFFFFFF) ^ (stream * 0x632BE59BD9B4E019 & 0xFFFFFFFFFFFFFFFF)],
                    dtype=np.uint64)
    return _mix64(base + _GOLDEN)[0]


def counter_bits(seed, counters, stream=0):
    """64 pseudo-random bits per counter, a pure function of ``(seed, stream, counter)``."""
    c = np.asarray(counters, dtype=np.uint64)
    return _mix64(c * _GOLDEN + _stream_key(seed, stream))


def countsketch_hash(seed, rows, s):
    """Bucket in ``[0, s)`` and sign in ``{-1, +1}`` for each global row index."""
    bits = counter_bits(seed, rows, stream=1)
    bucket = ((bits & _LOW32) % np.uint64(s)).astype(np.int64)
    sign = np.where((bits >> np.uint64(63)) == 1, -1.0, 1.0)
    return bucket, sign


def gaussian_block(seed, rows, s):
    """``s x len(rows)`` standard normals (Box-Muller), column r keyed by global row ``rows[r]``."""
    rows = np.asarray(rows, dtype=np.uint64)
    ctr = rows[None, :] * np.uint64(s) + np.arange(s, dtype=np.uint64)[:, None]
    u1 = ((counter_bits(seed, ctr, stream=2) >> np.uint64(11)).astype(np.float64) + 1.0) * 2.0**-53
    u2 = (counter_bits(seed, ctr, stream=3) >> np.uint64(11)).astype(np.float64) * 2.0**-53
    return np.sqrt(-2.0 * np.log(u1)) * np.cos(2.0 * np.pi * u2)


class SketchAccumulator:
    """Accumulates ``S @ Z`` over a stream of row blocks of ``Z``.

    CountSketch uses unscaled +-1 entries (unbiased for squared column
    norms); the Gaussian sketch is scaled by ``1/sqrt(s)``.
    """

    def __init__(self, cols, s=None, kind="countsketch", seed=0):
        if kind not in ("countsketch", "gaussian"):
            raise ValidationError(f"unknown sketch kind {kind!r}")
        if cols < 1:
            raise ValidationError("cols must be >= 1")
        self.kind = kind
        self.cols = int(cols)
        self.s = int(s) if s is not None else 4 * self.cols
        if self.s < 1:
            raise ValidationError("sketch size must be >= 1")
        self.seed = int(seed)
        self.rows_seen = 0
        self._state = np.zeros((self.s, self.cols))
        self._pending = np.zeros((0, self.cols))

    def absorb(self, block):
        block = np.asarray(block, dtype=np.float64)
        if block.ndim != 2 or block.shape[1] != self.cols:
            raise ValidationError(f"block has shape {block.shape}, sketch expects {self.cols} columns")
        if self.kind == "countsketch":
            rows = np.arange(self.rows_seen, self.rows_seen + block.shape[0])
            bucket, sign = countsketch_hash(self.seed, rows, self.s)
            np.add.at(self._state, bucket, sign[:, None] * block)
        else:
            start = self.rows_seen - len(self._pending)
            buf = np.vstack([self._pending, block])
            full = (len(buf) // GAUSSIAN_CHUNK) * GAUSSIAN_CHUNK
            for c0 in range(0, full, GAUSSIAN_CHUNK):
                self._state += self._gaussian_part(start + c0, buf[c0:c0 + GAUSSIAN_CHUNK])
            self._pending = buf[full:].copy()
        self.rows_seen += block.shape[0]
        return self

    def _gaussian_part(self, first_row, rows):
        g = gaussian_block(self.seed, np.arange(first_row, first_row + len(rows)), self.s)
        return (g @ rows) / math.sqrt(self.s)

    @property
    def state(self):
        if self.kind == "gaussian" and len(self._pending):
            return self._state + self._gaussian_part(self.rows_seen - len(self._pending), self._pending)
        return self._state.copy()


def sketch_rows(z, s=None, kind="countsketch", seed=0, block_rows=8192):
    """Sketch a whole matrix by streaming it through a :class:`SketchAccumulator`."""
    z = np.asarray(z, dtype=np.float64)
    acc = SketchAccumulator(z.shape[1], s=s, kind=kind, seed=seed)
    for r0 in range(0, z.shape[0], block_rows):
        acc.absorb(z[r0:r0 + block_rows])
    return acc.state


def default_groups(cols):
    return max(1, math.ceil(cols / 512))


def default_keep_per_group(final_k, groups):
    return max(1, math.ceil(2 * final_k / groups))


def grouped_select(z, groups, keep_per_group, final_k):
    """Pick ``final_k`` columns with a two-level pivoted QR.

    Columns are split into contiguous groups of ``ceil(cols / groups)`` (the
    last one may be short); each group nominates up to ``keep_per_group``
    candidates and a final pivoted QR over all candidates picks the winners.
    Returns ascending column indices.
    """
    z = as_matrix(z)
    n, m = z.shape
    if groups < 1:
        raise ValidationError("groups must be >= 1")
    if keep_per_group < 1:
        raise ValidationError("keep_per_group must be >= 1")
    size = math.ceil(m / groups)
    cand = []
    for c0 in range(0, m, size):
        sub = z[:, c0:c0 + size]
        kp = min(keep_per_group, sub.shape[1], n)
        f = cpqr(sub, pivot=True, rank=kp)
        cand.extend(c0 + f.perm[:kp])
    cand = np.sort(np.asarray(cand, dtype=np.int64))
    if final_k > len(cand):
        raise ValidationError(f"final_k={final_k} exceeds the {len(cand)} candidates nominated")
    if final_k > n:
        raise ValidationError(f"final_k={final_k} exceeds the {n} rows available")
    f = cpqr(z[:, cand], pivot=True, rank=final_k)
    return np.sort(cand[f.perm[:final_k]])
