"""Per-layer budget allocation under a global FLOPs target.

Each FFN block and each attention block gets an error-vs-keep curve from one
full pivoted QR of its calibration activations. Plans for any FLOPs target
are then read off those curves without refactoring.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import InfeasibleBudgetError, ValidationError
from .interpolative import error_curve
from .model import TransformerModel, block_flops
from .prune import SketchConfig, ffn_factorization, head_factorization

ERROR_MODES = ("absolute", "relative")
WEIGHTINGS = ("bert", "llama", "none")
MIN_NEURON_FRACTION = 0.05


@dataclass
class BlockTable:
    layer: int
    block: str  # attention | ffn
    curve: np.ndarray  # tail Frobenius norm for k = 0..full (absolute)
    unit_flops: int  # FLOPs per head / per neuron
    factorization: object = field(default=None, repr=False)

    @property
    def full(self):
        return len(self.curve) - 1

    @property
    def order(self):
        return self.factorization.perm

    @property
    def floor(self):
        if self.block == "attention":
            return 1
        return max(1, math.ceil(MIN_NEURON_FRACTION * self.full))

    def errors(self, mode):
        if mode == "absolute":
            return self.curve
        top = self.curve[0]
        return self.curve / top if top > 0 else np.zeros_like(self.curve)


@dataclass
class ErrorTables:
    blocks: list
    error_mode: str
    seq_len: int

    @property
    def total_flops(self):
        return sum(bt.unit_flops * bt.full for bt in self.blocks)

    def block(self, layer, kind):
        for bt in self.blocks:
            if bt.layer == layer and bt.block == kind:
                return bt
        raise KeyError((layer, kind))

    @property
    def n_layers(self):
        return 1 + max(bt.layer for bt in self.blocks)


@dataclass
class PruningPlan:
    keep_heads: list
    keep_neurons: list
    objective: float
    achieved_ratio: float
    target_ratio: float
    flops: int
    original_flops: int

    def to_dict(self):
        return {
            "target_ratio": self.target_ratio,
            "achieved_ratio": self.achieved_ratio,
            "flops": self.flops,
            "original_flops": self.original_flops,
            "objective": self.objective,
            "keep_heads": list(self.keep_heads),
            "keep_neurons": list(self.keep_neurons),
        }


def default_error_mode(model: TransformerModel):
    return "absolute" if model.norm_placement == "post" else "relative"


def default_weighting(model: TransformerModel):
    return "bert" if model.norm_placement == "post" else "llama"


def build_error_tables(model: TransformerModel, captures, error_mode="auto", seq_len=None,
                       weighted=True, sketch: SketchConfig | None = None) -> ErrorTables:
    """One pivoted QR per block; curves for every keep count.

    ``seq_len`` sets the FLOPs accounting (defaults to the longest calibration
    sequence).
    """
    if error_mode == "auto":
        error_mode = default_error_mode(model)
    if error_mode not in ERROR_MODES:
        raise ValidationError(f"error_mode must be one of {ERROR_MODES} or 'auto'")
    b = int(seq_len or int(np.max(captures.lengths)))
    blocks = []
    for l, blk in enumerate(model.layers):
        at, ff = blk.attention, blk.ffn
        for point in ("attn_concat", "ffn_hidden"):
            if not captures.has(point, l):
                raise ValidationError(f"missing capture {point}({l}) for error tables")
        attn_cost, _ = block_flops(model.n, 1, at.d_h, 0, b)
        _, ffn_cost = block_flops(model.n, 0, 1, 1, b)
        fa = head_factorization(captures.get("attn_concat", l), at.h, sketch)
        blocks.append(BlockTable(l, "attention", error_curve(fa), attn_cost, fa))
        fz = ffn_factorization(captures.get("ffn_hidden", l), ff.w2, weighted, sketch)
        blocks.append(BlockTable(l, "ffn", error_curve(fz), ffn_cost, fz))
    return ErrorTables(blocks=blocks, error_mode=error_mode, seq_len=b)


def depth_weight(scheme, l):
    """Error weight for 1-based layer position ``l``."""
    if l < 1:
        raise ValidationError("layer position is 1-based")
    if scheme == "bert":
        return math.sqrt(l + 1) + 1
    if scheme == "llama":
        return l + 50.0
    if scheme == "none":
        return 1.0
    raise ValidationError(f"unknown weighting scheme {scheme!r}")


def _objective_weights(tables: ErrorTables, weighting, flops_objective):
    share = {"attention": 1.0, "ffn": 1.0}
    if flops_objective:
        total = tables.total_flops
        for kind in share:
            share[kind] = sum(bt.unit_flops * bt.full for bt in tables.blocks if bt.block == kind) / total
    return [depth_weight(weighting, bt.layer + 1) * share[bt.block] for bt in tables.blocks]


def allocate_plan(tables: ErrorTables, weighting="none", target_ratio=1.0, flops_objective=False) -> PruningPlan:
    """Greedy marginal removal until the FLOPs budget is met.

    Every step removes one head or neuron: the one whose weighted error
    increase per FLOP saved is smallest (ties: lower layer, then FFN before
    attention). The removal sequence does not depend on the target, so plans
    for decreasing targets are nested.
    """
    if not 0 < target_ratio <= 1:
        raise ValidationError(f"target ratio must be in (0, 1], got {target_ratio}")
    blocks = tables.blocks
    weights = _objective_weights(tables, weighting, flops_objective)
    errs = [bt.errors(tables.error_mode) for bt in blocks]
    total = tables.total_flops
    budget = target_ratio * total
    floor_flops = sum(bt.unit_flops * bt.floor for bt in blocks)
    if floor_flops > budget:
        fr = floor_flops / total
        raise InfeasibleBudgetError(
            f"target ratio {target_ratio} is below the minimum-keep floor "
            f"(1 head and max(1, ceil({MIN_NEURON_FRACTION} f)) neurons per layer) ratio {fr:.6f}",
            floor_ratio=fr,
        )
    keep = [bt.full for bt in blocks]
    flops = total
    while flops > budget:
        best, best_key = None, None
        for i, bt in enumerate(blocks):
            k = keep[i]
            if k <= bt.floor:
                continue
            delta = weights[i] * (errs[i][k - 1] - errs[i][k])
            key = (delta / bt.unit_flops, bt.layer, 0 if bt.block == "ffn" else 1)
            if best_key is None or key < best_key:
                best, best_key = i, key
        keep[best] -= 1
        flops -= blocks[best].unit_flops
    objective = float(sum(w * e[k] for w, e, k in zip(weights, errs, keep)))
    n_layers = tables.n_layers
    heads, neurons = [0] * n_layers, [0] * n_layers
    for bt, k in zip(blocks, keep):
        (heads if bt.block == "attention" else neurons)[bt.layer] = int(k)
    return PruningPlan(
        keep_heads=heads, keep_neurons=neurons, objective=objective,
        achieved_ratio=flops / total, target_ratio=float(target_ratio),
        flops=int(flops), original_flops=int(total),
    )


def plan_objective(tables: ErrorTables, weighting, keep_heads, keep_neurons, flops_objective=False):
    """Objective value of an arbitrary plan (used by the exhaustive oracle in tests)."""
    weights = _objective_weights(tables, weighting, flops_objective)
    total = 0.0
    for w, bt in zip(weights, tables.blocks):
        k = keep_heads[bt.layer] if bt.block == "attention" else keep_neurons[bt.layer]
        total += w * bt.errors(tables.error_mode)[k]
    return total
