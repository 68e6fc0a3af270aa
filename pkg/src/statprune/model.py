"""Desk-scale transformer: parameters, masked forward pass with activation capture, FLOPs.

Inputs are raw ``n``-vectors per position (no embeddings). Attention is
bidirectional with key masking by per-example valid length. Weights are held
in float64; the on-disk format stores float32.
"""
from __future__ import annotations

import copy
import math
import re
from dataclasses import dataclass, field

import numpy as np
from scipy.special import erf

from .errors import ValidationError

NORM_EPS = 1e-5
CAPTURE_POINTS = ("attn_concat", "ffn_hidden", "layer_out")
ACTIVATIONS = ("relu", "gelu")


@dataclass
class AttentionLayer:
    h: int
    d_h: int
    wq: np.ndarray  # n x (h*d_h), head i owns columns [i*d_h, (i+1)*d_h)
    wk: np.ndarray
    wv: np.ndarray
    bq: np.ndarray
    bk: np.ndarray
    bv: np.ndarray
    wo: np.ndarray  # (h*d_h) x n
    bo: np.ndarray

    @property
    def width(self):
        return self.h * self.d_h


@dataclass
class FfnLayer:
    w1: np.ndarray  # n x f
    b1: np.ndarray
    w2: np.ndarray  # f x n
    b2: np.ndarray
    activation: str = "gelu"

    @property
    def f(self):
        return self.w1.shape[1]


@dataclass
class Block:
    attention: AttentionLayer
    ffn: FfnLayer
    norm1_g: np.ndarray
    norm1_b: np.ndarray
    norm2_g: np.ndarray
    norm2_b: np.ndarray


@dataclass
class TransformerModel:
    n: int
    layers: list[Block]
    norm_placement: str = "post"  # post: norm(x + sub(x)); pre: x + sub(norm(x))
    norm_kind: str = "layernorm"
    head_w: np.ndarray | None = None  # n x classes, applied to position 0
    head_b: np.ndarray | None = None

    @property
    def classes(self):
        return None if self.head_w is None else self.head_w.shape[1]

    def copy(self):
        return copy.deepcopy(self)

    def validate(self):
        if self.norm_placement not in ("post", "pre"):
            raise ValidationError(f"norm_placement must be 'post' or 'pre', got {self.norm_placement!r}")
        if self.norm_kind not in ("layernorm", "rmsnorm"):
            raise ValidationError(f"norm_kind must be 'layernorm' or 'rmsnorm', got {self.norm_kind!r}")
        n = self.n
        for l, blk in enumerate(self.layers):
            at, ff = blk.attention, blk.ffn
            w = at.h * at.d_h
            if at.h < 1 or at.d_h < 1:
                raise ValidationError(f"layer {l}: h and d_h must be >= 1")
            expect = {
                "wq": (n, w), "wk": (n, w), "wv": (n, w), "bq": (w,), "bk": (w,), "bv": (w,),
                "wo": (w, n), "bo": (n,),
            }
            for name, shape in expect.items():
                _check(getattr(at, name), shape, f"layer {l} attention.{name}")
            f = ff.w1.shape[1] if ff.w1.ndim == 2 else -1
            if f < 1:
                raise ValidationError(f"layer {l}: ffn width must be >= 1")
            for name, shape in {"w1": (n, f), "b1": (f,), "w2": (f, n), "b2": (n,)}.items():
                _check(getattr(ff, name), shape, f"layer {l} ffn.{name}")
            if ff.activation not in ACTIVATIONS:
                raise ValidationError(f"layer {l}: unknown activation {ff.activation!r}")
            for name in ("norm1_g", "norm1_b", "norm2_g", "norm2_b"):
                _check(getattr(blk, name), (n,), f"layer {l} {name}")
        if (self.head_w is None) != (self.head_b is None):
            raise ValidationError("classifier head needs both weight and bias")
        if self.head_w is not None:
            if self.head_w.ndim != 2 or self.head_w.shape[0] != n:
                raise ValidationError(f"head weight must be {n} x classes, got {self.head_w.shape}")
            _check(self.head_b, (self.head_w.shape[1],), "head bias")
        return self


def _check(arr, shape, what):
    if not isinstance(arr, np.ndarray) or arr.shape != shape:
        got = getattr(arr, "shape", type(arr).__name__)
        raise ValidationError(f"{what} has shape {got}, expected {shape}")
    if not np.all(np.isfinite(arr)):
        raise ValidationError(f"{what} contains non-finite values")


@dataclass
class CaptureSet:
    """Activations at named points, rows = valid positions (example-major)."""

    lengths: np.ndarray
    points: dict = field(default_factory=dict)

    def get(self, point, layer):
        key = (point, int(layer))
        if key not in self.points:
            raise ValidationError(f"capture {point}({layer}) not present")
        return self.points[key]

    def has(self, point, layer):
        return (point, int(layer)) in self.points

    @property
    def rows(self):
        return int(np.sum(self.lengths))


_POINT_RE = re.compile(r"^(\w+)\((\d+)\)$")


def parse_capture_point(p):
    """Accept ``("ffn_hidden", 2)`` or ``"ffn_hidden(2)"``."""
    if isinstance(p, str):
        m = _POINT_RE.match(p)
        if not m:
            raise ValidationError(f"bad capture point {p!r}")
        p = (m.group(1), int(m.group(2)))
    name, layer = p
    if name not in CAPTURE_POINTS:
        raise ValidationError(f"unknown capture point {name!r}")
    return name, int(layer)


def all_capture_points(model, names=CAPTURE_POINTS):
    return [(nm, l) for l in range(len(model.layers)) for nm in names]


def valid_mask(lengths, b):
    return np.arange(b)[None, :] < np.asarray(lengths)[:, None]


def _norm(x, g, bias, kind):
    if kind == "layernorm":
        mu = x.mean(axis=-1, keepdims=True)
        xc = x - mu
        var = np.mean(xc * xc, axis=-1, keepdims=True)
        return xc / np.sqrt(var + NORM_EPS) * g + bias
    ms = np.mean(x * x, axis=-1, keepdims=True)
    return x / np.sqrt(ms + NORM_EPS) * g


def activate(x, kind):
    if kind == "relu":
        return np.maximum(x, 0.0)
    return 0.5 * x * (1.0 + erf(x / math.sqrt(2.0)))


def attention_concat(at: AttentionLayer, x, key_mask):
    """Concatenated head outputs (m, b, h*d_h) before the output projection."""
    m, b, _ = x.shape
    h, d = at.h, at.d_h

    def heads(w, bias):
        return (x @ w + bias).reshape(m, b, h, d).transpose(0, 2, 1, 3)

    q, k, v = heads(at.wq, at.bq), heads(at.wk, at.bk), heads(at.wv, at.bv)
    logits = q @ k.transpose(0, 1, 3, 2) / math.sqrt(d)
    logits = np.where(key_mask[:, None, None, :], logits, -np.inf)
    logits -= logits.max(axis=-1, keepdims=True)
    p = np.exp(logits)
    p /= p.sum(axis=-1, keepdims=True)
    return (p @ v).transpose(0, 2, 1, 3).reshape(m, b, h * d)


def forward_with_capture(model: TransformerModel, inputs, lengths, capture_points=(), stop_after=None):
    """Run the model on ``inputs`` (m, b, n); return ``(outputs, CaptureSet)``.

    Outputs at masked positions are zeroed. ``stop_after`` ends the pass
    after that layer (outputs are then that layer's outputs).
    """
    x = np.asarray(inputs, dtype=np.float64)
    if x.ndim != 3:
        raise ValidationError(f"inputs must be (m, b, n), got shape {x.shape}")
    m, b, n = x.shape
    if n != model.n:
        raise ValidationError(f"input width {n} does not match model width {model.n}")
    lengths = np.asarray(lengths, dtype=np.int64)
    if lengths.shape != (m,) or np.any(lengths < 1) or np.any(lengths > b):
        raise ValidationError(f"lengths must be {m} values in [1, {b}]")
    wanted = {parse_capture_point(p) for p in capture_points}
    for _, l in wanted:
        if not 0 <= l < len(model.layers):
            raise ValidationError(f"capture layer {l} out of range")
    mask = valid_mask(lengths, b)
    caps = CaptureSet(lengths=lengths.copy())
    pre = model.norm_placement == "pre"
    kind = model.norm_kind
    last = len(model.layers) - 1 if stop_after is None else int(stop_after)

    for l, blk in enumerate(model.layers[: last + 1]):
        at, ff = blk.attention, blk.ffn
        a_in = _norm(x, blk.norm1_g, blk.norm1_b, kind) if pre else x
        concat = attention_concat(at, a_in, mask)
        if ("attn_concat", l) in wanted:
            caps.points[("attn_concat", l)] = concat[mask]
        y = concat @ at.wo + at.bo
        x = x + y if pre else _norm(x + y, blk.norm1_g, blk.norm1_b, kind)

        f_in = _norm(x, blk.norm2_g, blk.norm2_b, kind) if pre else x
        hidden = activate(f_in @ ff.w1 + ff.b1, ff.activation)
        if ("ffn_hidden", l) in wanted:
            caps.points[("ffn_hidden", l)] = hidden[mask]
        y = hidden @ ff.w2 + ff.b2
        x = x + y if pre else _norm(x + y, blk.norm2_g, blk.norm2_b, kind)
        if ("layer_out", l) in wanted:
            caps.points[("layer_out", l)] = x[mask]

    out = np.where(mask[:, :, None], x, 0.0)
    return out, caps


def classify(model: TransformerModel, outputs):
    """Classifier logits from position 0 of each example."""
    if model.head_w is None:
        raise ValidationError("model has no classifier head")
    return outputs[:, 0, :] @ model.head_w + model.head_b


def block_flops(n, h, d_h, f, b):
    """(attention, ffn) FLOPs for one layer; a multiply-add counts as 2."""
    w = h * d_h
    attn = 2 * b * n * (3 * w) + 2 * b * b * w + 2 * b * b * w + 2 * b * w * n
    ffn = 2 * b * n * f + 2 * b * f * n
    return attn, ffn


def layer_flops(model: TransformerModel, b):
    out = []
    for blk in model.layers:
        at = blk.attention
        out.append(block_flops(model.n, at.h, at.d_h, blk.ffn.f, b))
    return out


def count_flops(model: TransformerModel, b):
    if b < 1:
        raise ValidationError("sequence length must be >= 1")
    return sum(a + f for a, f in layer_flops(model, b))


def flops_ratio(pruned: TransformerModel, original: TransformerModel, b):
    return count_flops(pruned, b) / count_flops(original, b)
