"""Structured pruning operators with fused corrections.

FFN neurons: pick neurons with a pivoted QR of the (next-layer weighted)
hidden activations, fold the interpolation matrix into ``w2``.

Attention heads, two steps: rank heads with a pivoted QR over one column per
head (each head's outputs flattened), then compute a dense column-level
correction for the kept heads and fold it into ``wo``.

Correction modes:

``fold_qr``     interpolation matrix from an unpivoted QR of the original activations
``refine_ls``   least squares from the current (partly pruned) network's kept
                activations to the original network's activations
``block_diag``  heads only: per-head scalar interpolation from the head-level ID
``drop``        no correction, just delete the units
"""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.linalg import solve_triangular

from .errors import ValidationError
from .interpolative import SINGULAR_RTOL, error_curve, next_layer_weighting
from .linalg import QrFactorization, cpqr, least_squares
from .model import TransformerModel
from .sketch import default_groups, default_keep_per_group, grouped_select, sketch_rows

log = logging.getLogger(__name__)

FFN_MODES = ("fold_qr", "refine_ls", "drop")
HEAD_MODES = ("fold_qr", "refine_ls", "block_diag", "drop")


@dataclass
class SketchConfig:
    """When and how to shrink activation matrices before selection."""

    kind: str = "off"  # off | countsketch | gaussian
    rows: int | None = None  # sketch size; default 4 x columns
    threshold: int = 262144  # sketch only matrices with more rows than this
    groups: int | None = None  # column groups for FFN selection; default ceil(cols / 512)
    seed: int = 0

    def applies(self, rows):
        return self.kind != "off" and rows > self.threshold

    def reduce(self, z):
        if not self.applies(z.shape[0]):
            return z
        s = self.rows or 4 * z.shape[1]
        return sketch_rows(z, s=s, kind=self.kind, seed=self.seed)


@dataclass
class LayerPruneRecord:
    layer: int
    block: str  # ffn | attention
    kept: list  # neuron indices ascending, or kept heads in importance order
    k: int
    full: int
    predicted_err: float
    measured_err: float
    correction_mode: str
    order: list = field(default_factory=list)  # full head ranking (attention only)

    def to_dict(self):
        return asdict(self)


def _interp_matrix(a, keep_cols):
    """``t`` with ``a ~= a[:, keep_cols] @ t``, via unpivoted QR with the kept columns first.

    Falls back to minimum-norm least squares when R11 is singular.
    """
    m = a.shape[1]
    k = len(keep_cols)
    rest = np.setdiff1d(np.arange(m), keep_cols, assume_unique=False)
    order = np.concatenate([np.asarray(keep_cols, dtype=np.int64), rest])
    f = cpqr(a[:, order], pivot=False, rank=min(k, a.shape[0]))
    rd = f.rdiag()[:k]
    if k > a.shape[0] or (k and rd.min() <= SINGULAR_RTOL * max(rd.max(), 1e-300)):
        log.info("R11 singular for %d kept columns; using least squares", k)
        return least_squares(a[:, keep_cols], a)
    coeff = np.zeros((k, m))
    coeff[:, :k] = np.eye(k)
    if k < m:
        coeff[:, k:] = solve_triangular(f.r[:k, :k], f.r[:k, k:], lower=False)
    t = np.empty((k, m))
    t[:, order] = coeff
    return t


def _residual_after(src_kept, t, target, w_out):
    return float(np.linalg.norm((src_kept @ t - target) @ w_out))


# --------------------------------------------------------------------- FFN


def ffn_selection_matrix(hidden, w2, weighted=True):
    return next_layer_weighting(hidden, w2) if weighted else np.asarray(hidden, dtype=np.float64)


def ffn_factorization(hidden, w2, weighted=True, sketch: SketchConfig | None = None) -> QrFactorization:
    """Full pivoted QR of the selection matrix for one FFN block (reused for every k)."""
    z = ffn_selection_matrix(hidden, w2, weighted)
    if sketch is not None:
        z = sketch.reduce(z)
    return cpqr(z, pivot=True)


def prune_ffn(model: TransformerModel, layer, k, captures, mode="fold_qr", current=None,
              weighted=True, sketch: SketchConfig | None = None, factorization=None):
    """Keep ``k`` neurons of FFN ``layer``; return ``(new_model, record)``.

    ``captures`` hold the original network's ``ffn_hidden(layer)``;
    ``current`` (refine_ls only) holds the same point for the network being
    pruned.
    """
    if mode not in FFN_MODES:
        raise ValidationError(f"unknown FFN correction mode {mode!r}")
    ff = model.layers[layer].ffn
    f = ff.f
    if not 1 <= k <= f:
        raise ValidationError(f"layer {layer}: keep count {k} outside [1, {f}]")
    hidden = captures.get("ffn_hidden", layer)
    if hidden.shape[1] != f:
        raise ValidationError(f"layer {layer}: captured hidden width {hidden.shape[1]} != f={f}")
    if mode == "refine_ls":
        if current is None or not current.has("ffn_hidden", layer):
            raise ValidationError(f"layer {layer}: refine_ls needs current ffn_hidden captures")
        src = current.get("ffn_hidden", layer)
    else:
        src = hidden

    groups = (sketch.groups if sketch and sketch.groups else default_groups(f))
    if groups > 1 and k < f:
        z = ffn_selection_matrix(hidden, ff.w2, weighted)
        if sketch is not None:
            z = sketch.reduce(z)
        kept = grouped_select(z, groups, default_keep_per_group(k, groups), k)
        proj = least_squares(z[:, kept], z)
        predicted = float(np.linalg.norm(z - z[:, kept] @ proj))
    else:
        fac = factorization or ffn_factorization(hidden, ff.w2, weighted, sketch)
        kept = np.sort(fac.perm[:k])
        predicted = float(error_curve(fac)[k])

    if k == f:
        t = np.eye(f)
    elif mode == "fold_qr":
        t = _interp_matrix(hidden, kept)
    elif mode == "refine_ls":
        t = least_squares(src[:, kept], hidden)
    else:
        t = np.eye(f)[kept]

    new = model.copy()
    nf = new.layers[layer].ffn
    nf.w1, nf.b1 = ff.w1[:, kept].copy(), ff.b1[kept].copy()
    nf.w2 = ff.w2.copy() if k == f else t @ ff.w2
    rec = LayerPruneRecord(
        layer=int(layer), block="ffn", kept=[int(i) for i in kept], k=int(k), full=int(f),
        predicted_err=predicted,
        measured_err=_residual_after(src[:, kept], t, hidden, ff.w2),
        correction_mode=mode,
    )
    return new, rec


# --------------------------------------------------------------- attention


def head_matrix(h_concat, h):
    """One column per head: that head's (rows x d_h) output flattened row-major."""
    h_concat = np.asarray(h_concat, dtype=np.float64)
    rows, width = h_concat.shape
    if width % h:
        raise ValidationError(f"concat width {width} is not divisible by h={h}")
    d = width // h
    return h_concat.reshape(rows, h, d).transpose(1, 0, 2).reshape(h, rows * d).T


def head_factorization(h_concat, h, sketch: SketchConfig | None = None) -> QrFactorization:
    z = head_matrix(h_concat, h)
    if sketch is not None:
        z = sketch.reduce(z)
    return cpqr(z, pivot=True)


def select_heads(h_concat, h, k, sketch: SketchConfig | None = None):
    """Head ranking, most to least important, from a pivoted QR over per-head columns."""
    if not 1 <= k <= h:
        raise ValidationError(f"head keep count {k} outside [1, {h}]")
    return head_factorization(h_concat, h, sketch).perm.copy()


def _head_cols(heads, d):
    return (np.asarray(heads, dtype=np.int64)[:, None] * d + np.arange(d)[None, :]).ravel()


def head_correction(h_concat, order, k, mode="fold_qr", target=None):
    """Correction ``T`` of shape ``(k*d_h) x (h*d_h)`` so that
    ``h_concat[:, kept_cols] @ T`` approximates the full original concat.

    Rows follow the kept heads in ``order``; columns are in original head order.
    For ``refine_ls`` pass the current network's concat as ``h_concat`` and the
    original one as ``target``.
    """
    if mode not in HEAD_MODES:
        raise ValidationError(f"unknown head correction mode {mode!r}")
    h_concat = np.asarray(h_concat, dtype=np.float64)
    order = np.asarray(order, dtype=np.int64)
    h = len(order)
    if sorted(order.tolist()) != list(range(h)):
        raise ValidationError("order must be a permutation of the heads")
    if not 1 <= k <= h:
        raise ValidationError(f"head keep count {k} outside [1, {h}]")
    width = h_concat.shape[1]
    if width % h:
        raise ValidationError(f"concat width {width} is not divisible by h={h}")
    d = width // h
    kept_cols = _head_cols(order[:k], d)
    if mode == "refine_ls":
        if target is None:
            raise ValidationError("refine_ls needs the original concat as target")
        return least_squares(h_concat[:, kept_cols], target)
    if k == h:
        t = np.zeros((width, width))
        t[np.arange(width), kept_cols] = 1.0
        return t
    if mode == "drop":
        t = np.zeros((k * d, width))
        t[np.arange(k * d), kept_cols] = 1.0
        return t
    if mode == "block_diag":
        z = head_matrix(h_concat, h)
        coef = _interp_matrix(z, order[:k])  # k x h, rows follow order[:k]
        return np.kron(coef, np.eye(d))
    # fold_qr: heads permuted so dropped ones come last, unpivoted QR, columns un-permuted
    return _interp_matrix(h_concat, kept_cols)


def prune_attention(model: TransformerModel, layer, k, captures, mode="fold_qr", current=None,
                    order=None, sketch: SketchConfig | None = None, factorization=None):
    """Keep ``k`` heads of attention ``layer``; return ``(new_model, record)``."""
    if mode not in HEAD_MODES:
        raise ValidationError(f"unknown head correction mode {mode!r}")
    at = model.layers[layer].attention
    h, d = at.h, at.d_h
    if not 1 <= k <= h:
        raise ValidationError(f"layer {layer}: head keep count {k} outside [1, {h}]")
    concat = captures.get("attn_concat", layer)
    if concat.shape[1] != h * d:
        raise ValidationError(f"layer {layer}: captured concat width {concat.shape[1]} != {h * d}")
    fac = factorization
    if order is None:
        fac = fac or head_factorization(concat, h, sketch)
        order = fac.perm
    order = np.asarray(order, dtype=np.int64)
    predicted = float(error_curve(fac)[k]) if fac is not None else float("nan")

    if mode == "refine_ls":
        if current is None or not current.has("attn_concat", layer):
            raise ValidationError(f"layer {layer}: refine_ls needs current attn_concat captures")
        src = current.get("attn_concat", layer)
        t = head_correction(src, order, k, "refine_ls", target=concat)
    else:
        src = concat
        t = head_correction(concat, order, k, mode)
    cols = _head_cols(order[:k], d)

    new = model.copy()
    na = new.layers[layer].attention
    na.h = int(k)
    for nm in ("wq", "wk", "wv"):
        setattr(na, nm, getattr(at, nm)[:, cols].copy())
    for nm in ("bq", "bk", "bv"):
        setattr(na, nm, getattr(at, nm)[cols].copy())
    na.wo = t @ at.wo
    rec = LayerPruneRecord(
        layer=int(layer), block="attention", kept=[int(i) for i in order[:k]], k=int(k), full=int(h),
        predicted_err=predicted,
        measured_err=_residual_after(src[:, cols], t, concat, at.wo),
        correction_mode=mode,
        order=[int(i) for i in order],
    )
    return new, rec
