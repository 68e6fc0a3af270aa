"""End-to-end pruning pipeline, evaluation metrics and report assembly."""
from __future__ import annotations

import json
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .allocate import (
    ErrorTables,
    PruningPlan,
    allocate_plan,
    build_error_tables,
    default_error_mode,
    default_weighting,
)
from .errors import PipelineError, StatPruneError, ValidationError
from .formats import CalibrationSet, load_calib, load_model, model_from_bytes, model_to_bytes
from .model import TransformerModel, all_capture_points, classify, count_flops, forward_with_capture
from .prune import SketchConfig, prune_attention, prune_ffn

log = logging.getLogger(__name__)

MODES = ("fold_qr", "refine_ls", "drop")


@dataclass
class PipelineConfig:
    model_path: str
    calib_path: str
    target_ratio: float
    mode: str = "fold_qr"
    error_mode: str = "auto"  # absolute | relative | auto
    weighting: str = "auto"  # bert | llama | none | auto
    sketch: SketchConfig = field(default_factory=SketchConfig)
    weighted_selection: bool = True
    flops_objective: bool = False
    seed: int = 0
    out_model: str | None = None
    out_report: str | None = None
    holdout_path: str | None = None

    def validate(self):
        if not 0 < self.target_ratio <= 1:
            raise ValidationError(f"target FLOPs ratio must be in (0, 1], got {self.target_ratio}")
        if not self.model_path or not self.calib_path:
            raise ValidationError("model and calibration paths are required")
        if self.mode not in MODES:
            raise ValidationError(f"mode must be one of {MODES}")
        for p in (self.out_model, self.out_report):
            if p is not None and not p:
                raise ValidationError("output paths must be nonempty")
        return self


@dataclass
class PruneResult:
    model: TransformerModel
    plan: PruningPlan
    records: list
    tables: ErrorTables
    timings: dict


def _phase(name, layer=None):
    class _Ctx:
        def __enter__(self):
            return self

        def __exit__(self, et, ev, tb):
            if ev is not None and isinstance(ev, (StatPruneError, ValueError, ArithmeticError)) \
                    and not isinstance(ev, PipelineError):
                raise PipelineError(name, layer, ev) from ev
            return False

    return _Ctx()


def round_to_f32(model: TransformerModel) -> TransformerModel:
    """The model exactly as it will be read back from disk."""
    return model_from_bytes(model_to_bytes(model))


def prune_model(model: TransformerModel, calib: CalibrationSet, target_ratio, mode="fold_qr",
                error_mode="auto", weighting="auto", sketch: SketchConfig | None = None,
                weighted_selection=True, flops_objective=False) -> PruneResult:
    """Capture, build error tables, allocate, prune front to back.

    ``fold_qr`` and ``drop`` use the single capture pass of the original model;
    ``refine_ls`` re-runs the partly pruned model before each block.
    """
    if mode not in MODES:
        raise ValidationError(f"mode must be one of {MODES}")
    if weighting == "auto":
        weighting = default_weighting(model)
    if error_mode == "auto":
        error_mode = default_error_mode(model)
    timings = {}

    t0 = time.perf_counter()
    with _phase("capture"):
        _, caps = forward_with_capture(model, calib.inputs, calib.lengths,
                                       all_capture_points(model, ("attn_concat", "ffn_hidden")))
    timings["capture"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    with _phase("error_tables"):
        tables = build_error_tables(model, caps, error_mode, seq_len=calib.b,
                                    weighted=weighted_selection, sketch=sketch)
    timings["error_tables"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    with _phase("allocate"):
        plan = allocate_plan(tables, weighting, target_ratio, flops_objective)
    timings["allocate"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    pruned = model
    records = []
    head_mode = "drop" if mode == "drop" else mode
    for l in range(len(model.layers)):
        with _phase("prune_attention", l):
            cur = None
            if mode == "refine_ls":
                _, cur = forward_with_capture(pruned, calib.inputs, calib.lengths,
                                              [("attn_concat", l)], stop_after=l)
            bt = tables.block(l, "attention")
            pruned, rec = prune_attention(pruned, l, plan.keep_heads[l], caps, head_mode, current=cur,
                                          order=bt.order, factorization=bt.factorization)
            records.append(rec)
        with _phase("prune_ffn", l):
            cur = None
            if mode == "refine_ls":
                _, cur = forward_with_capture(pruned, calib.inputs, calib.lengths,
                                              [("ffn_hidden", l)], stop_after=l)
            bt = tables.block(l, "ffn")
            pruned, rec = prune_ffn(pruned, l, plan.keep_neurons[l], caps, mode, current=cur,
                                    weighted=weighted_selection, sketch=sketch,
                                    factorization=bt.factorization)
            records.append(rec)
    timings["prune"] = time.perf_counter() - t0
    return PruneResult(round_to_f32(pruned), plan, records, tables, timings)


def evaluate(model_a: TransformerModel, model_b: TransformerModel, data: CalibrationSet):
    """Compare ``model_a`` against reference ``model_b`` on ``data`` (valid positions only)."""
    if model_a.n != model_b.n:
        raise ValidationError(f"model widths differ: {model_a.n} vs {model_b.n}")
    if data.n != model_a.n:
        raise ValidationError(f"data width {data.n} does not match model width {model_a.n}")
    ya, _ = forward_with_capture(model_a, data.inputs, data.lengths)
    yb, _ = forward_with_capture(model_b, data.inputs, data.lengths)
    mask = np.arange(data.b)[None, :] < data.lengths[:, None]
    diff = ya[mask] - yb[mask]
    ref = np.linalg.norm(yb[mask])
    out = {
        "relative_error": float(np.linalg.norm(diff) / ref) if ref > 0 else float(np.linalg.norm(diff)),
        "mse": float(np.mean(diff * diff)),
    }
    if model_a.head_w is not None and model_b.head_w is not None:
        ca = np.argmax(classify(model_a, ya), axis=1)
        cb = np.argmax(classify(model_b, yb), axis=1)
        out["correlation"] = float(np.mean(ca == cb))
    return out


def build_report(config: PipelineConfig | None, original, result: PruneResult, metrics):
    b = result.tables.seq_len
    f0, f1 = count_flops(original, b), count_flops(result.model, b)
    cfg = None
    if config is not None:
        cfg = asdict(config)
    return {
        "config": cfg,
        "flops": {"seq_len": b, "original": f0, "pruned": f1, "ratio": f1 / f0},
        "plan": result.plan.to_dict(),
        "error_mode": result.tables.error_mode,
        "layers": [r.to_dict() for r in result.records],
        "metrics": metrics,
        "timings": {k: round(v, 6) for k, v in result.timings.items()},
    }


def report_json(report):
    return json.dumps(report, indent=2) + "\n"


def run_pipeline(config: PipelineConfig):
    """Load inputs, prune, write the pruned model and the JSON report; return ``(model, report)``."""
    config.validate()
    t_start = time.perf_counter()
    with _phase("load"):
        model = load_model(config.model_path)
        calib = load_calib(config.calib_path)
        holdout = load_calib(config.holdout_path) if config.holdout_path else None
        if calib.n != model.n:
            raise ValidationError(f"calibration width {calib.n} does not match model width {model.n}")
    result = prune_model(model, calib, config.target_ratio, config.mode, config.error_mode,
                         config.weighting, config.sketch, config.weighted_selection,
                         config.flops_objective)
    t0 = time.perf_counter()
    with _phase("evaluate"):
        metrics = {"calibration": evaluate(result.model, model, calib)}
        if holdout is not None:
            metrics["holdout"] = evaluate(result.model, model, holdout)
    result.timings["evaluate"] = time.perf_counter() - t0
    result.timings["total"] = time.perf_counter() - t_start
    report = build_report(config, model, result, metrics)
    if config.out_model:
        Path(config.out_model).write_bytes(model_to_bytes(result.model))
    if config.out_report:
        Path(config.out_report).write_text(report_json(report))
    return result.model, report
