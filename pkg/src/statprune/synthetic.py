"""Random toy models and calibration data, optionally with planted redundancy."""
from __future__ import annotations

import numpy as np

from .errors import ValidationError
from .formats import CalibrationSet
from .model import AttentionLayer, Block, FfnLayer, TransformerModel, block_flops

PLANTED = ("none", "dup-neurons", "dup-heads")
VOCAB = 64
# value-projection scale for planted duplicate heads; a power of two survives float32 exactly
DUP_HEAD_SCALE = 2.0


def _dup_split(total, planted_fraction):
    dups = int(total * planted_fraction)
    return total - dups, dups


def random_model(n, layers, heads, d_h, f, rng, planted="none", norm="post", activation="gelu",
                 classes=None, norm_kind="layernorm"):
    if min(n, layers, heads, d_h, f) < 1:
        raise ValidationError("n, layers, heads, d_h and f must all be >= 1")
    if planted not in PLANTED:
        raise ValidationError(f"planted must be one of {PLANTED}")
    w = heads * d_h

    def gauss(*shape, fan_in):
        return rng.standard_normal(shape) / np.sqrt(fan_in)

    blocks = []
    for _ in range(layers):
        wq, wk, wv = gauss(n, w, fan_in=n), gauss(n, w, fan_in=n), gauss(n, w, fan_in=n)
        bq, bk, bv = (0.1 * rng.standard_normal(w) for _ in range(3))
        w1 = gauss(n, f, fan_in=n)
        b1 = 0.1 * rng.standard_normal(f)
        if planted == "dup-heads":
            uniq, dups = _dup_split(heads, 0.5)
            for j in range(dups):
                src, dst = j % uniq, uniq + j
                s, t = slice(src * d_h, (src + 1) * d_h), slice(dst * d_h, (dst + 1) * d_h)
                wq[:, t], wk[:, t], bq[t], bk[t] = wq[:, s], wk[:, s], bq[s], bk[s]
                wv[:, t], bv[t] = DUP_HEAD_SCALE * wv[:, s], DUP_HEAD_SCALE * bv[s]
        if planted == "dup-neurons":
            uniq, dups = _dup_split(f, 0.25)
            src = rng.integers(0, uniq, size=dups)
            w1[:, uniq:] = w1[:, src]
            b1[uniq:] = b1[src]
        at = AttentionLayer(h=heads, d_h=d_h, wq=wq, wk=wk, wv=wv, bq=bq, bk=bk, bv=bv,
                            wo=gauss(w, n, fan_in=w), bo=0.1 * rng.standard_normal(n))
        ff = FfnLayer(w1=w1, b1=b1, w2=gauss(f, n, fan_in=f), b2=0.1 * rng.standard_normal(n),
                      activation=activation)
        blocks.append(Block(at, ff, np.ones(n), np.zeros(n), np.ones(n), np.zeros(n)))
    head_w = head_b = None
    if classes:
        head_w, head_b = gauss(n, classes, fan_in=n), np.zeros(classes)
    model = TransformerModel(n=n, layers=blocks, norm_placement=norm, norm_kind=norm_kind,
                             head_w=head_w, head_b=head_b)
    return model.validate()


def random_sequences(vocab, pos, m, rng):
    """Token-like inputs: each position is a vocabulary vector plus a position vector."""
    b = pos.shape[0]
    lengths = rng.integers(1, b + 1, size=m)
    tokens = rng.integers(0, vocab.shape[0], size=(m, b))
    x = vocab[tokens] + pos[None]
    x[~(np.arange(b)[None, :] < lengths[:, None])] = 0.0
    return CalibrationSet(x, lengths.astype(np.int64))


def gen_synthetic(n=32, layers=4, heads=4, d_h=None, f=128, m=128, b=16, seed=0, planted="none",
                  norm="post", activation="gelu", classes=None, holdout_m=None, norm_kind="layernorm"):
    """Return ``(model, calibration set, holdout set)``, all fixed by ``seed``.

    Calibration and holdout are drawn from the same token distribution with
    independent streams.
    """
    if d_h is None:
        if n % heads:
            raise ValidationError(f"n={n} is not divisible by heads={heads}; pass d_h")
        d_h = n // heads
    if m < 1 or b < 1:
        raise ValidationError("m and b must be >= 1")
    ss = np.random.SeedSequence(seed)
    r_model, r_vocab, r_cal, r_hold = (np.random.default_rng(s) for s in ss.spawn(4))
    model = random_model(n, layers, heads, d_h, f, r_model, planted=planted, norm=norm,
                         activation=activation, classes=classes, norm_kind=norm_kind)
    vocab = r_vocab.standard_normal((VOCAB, n))
    pos = 0.5 * r_vocab.standard_normal((b, n))
    calib = random_sequences(vocab, pos, m, r_cal)
    holdout = random_sequences(vocab, pos, holdout_m or m, r_hold)
    return model, calib, holdout


def planted_ratio(model: TransformerModel, planted, b):
    """FLOPs ratio reached by removing exactly the planted duplicates."""
    full = reduced = 0
    for blk in model.layers:
        h, d, f = blk.attention.h, blk.attention.d_h, blk.ffn.f
        full += sum(block_flops(model.n, h, d, f, b))
        if planted == "dup-heads":
            h = _dup_split(h, 0.5)[0]
        elif planted == "dup-neurons":
            f = _dup_split(f, 0.25)[0]
        reduced += sum(block_flops(model.n, h, d, f, b))
    return reduced / full
