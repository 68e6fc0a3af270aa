"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Run with ``pytest tests/test_acceptance.py -v``; the lines are repeated in
the terminal summary under "acceptance criteria".
"""
import itertools
import json
import logging
import math
import time

import numpy as np
import pytest

from statprune.allocate import BlockTable, ErrorTables, allocate_plan, depth_weight, plan_objective
from statprune.errors import FormatError, InfeasibleBudgetError, TruncatedFileError
from statprune.formats import (
    calib_from_bytes,
    calib_to_bytes,
    load_calib,
    model_from_bytes,
    model_to_bytes,
    save_calib,
    save_model,
)
from statprune.interpolative import error_curve, interpolative_decomposition
from statprune.linalg import cpqr, least_squares, singular_values_oracle
from statprune.model import all_capture_points, block_flops, forward_with_capture
from statprune.pipeline import PipelineConfig, evaluate, prune_model, run_pipeline
from statprune.prune import ffn_factorization, prune_attention, prune_ffn
from statprune.sketch import sketch_rows
from statprune.synthetic import gen_synthetic, planted_ratio

log = logging.getLogger("acceptance")


def _captures(model, calib, names):
    return forward_with_capture(model, calib.inputs, calib.lengths, all_capture_points(model, names))[1]


def test_c01_id_error_identity(record):
    t0 = time.perf_counter()
    worst = 0.0
    for seed in range(10):
        a = np.random.default_rng(seed).standard_normal((200, 64))
        f = cpqr(a)
        for k in (4, 16, 48):
            res = interpolative_decomposition(a, rank=k)
            measured = np.linalg.norm(a - a[:, res.indices] @ res.t, 2)
            worst = max(worst, abs(measured - res.err2) / measured)
            assert np.array_equal(res.indices, np.sort(f.perm[:k]))
    ok = worst <= 1e-6
    assert record(1, "ID error identity", ok, f"max rel gap {worst:.2e} (tol 1e-6)", time.perf_counter() - t0, 5)


def test_c02_near_optimality(record):
    t0 = time.perf_counter()
    worst = 0.0
    for seed in range(5):
        a = np.random.default_rng(100 + seed).standard_normal((256, 128))
        svals = singular_values_oracle(a)
        f = cpqr(a)
        for k in (8, 16, 32, 64):
            kept = np.sort(f.perm[:k])
            res = interpolative_decomposition(a, rank=k)
            err = np.linalg.norm(a - a[:, kept] @ res.t, 2)
            worst = max(worst, err / svals[k])
    ok = worst <= 10
    assert record(2, "near-optimality", ok, f"max err/sigma_(k+1) {worst:.3f} (bound 10)", time.perf_counter() - t0, 10)


def test_c03_exact_on_redundancy(record):
    t0 = time.perf_counter()
    rng = np.random.default_rng(3)
    base = rng.standard_normal((80, 12))
    a = np.hstack([base, base[:, rng.integers(0, 12, 6)]])
    res = interpolative_decomposition(a, rank=12)
    worst = {"columns": float(np.linalg.norm(a - a[:, res.indices] @ res.t))}
    for planted in ("dup-neurons", "dup-heads"):
        resid = 0.0
        for seed in range(3):
            model, calib, _ = gen_synthetic(seed=seed, planted=planted, f=64)
            out = prune_model(model, calib, planted_ratio(model, planted, calib.b))
            resid = max(resid, max(r.measured_err for r in out.records))
        worst[planted] = resid
    ok = max(worst.values()) <= 1e-8
    detail = ", ".join(f"{k} {v:.1e}" for k, v in worst.items()) + " (tol 1e-8)"
    assert record(3, "exactness on planted redundancy", ok, detail, time.perf_counter() - t0, 10)


def test_c04_two_step_heads(record):
    t0 = time.perf_counter()
    bad = []
    for seed in range(20):
        model, calib, _ = gen_synthetic(n=32, layers=1, heads=8, d_h=4, f=32, m=64, b=16, seed=seed)
        caps = _captures(model, calib, ("attn_concat",))
        e = {m: prune_attention(model, 0, 4, caps, m)[1].measured_err for m in ("fold_qr", "block_diag", "drop")}
        if not e["fold_qr"] < e["block_diag"] < e["drop"]:
            bad.append((seed, e))
    ok = not bad
    assert record(4, "two-step heads ablation", ok, f"{20 - len(bad)}/20 instances dense < block-diag < none",
                  time.perf_counter() - t0, 30)


def test_c05_correction_dominance(record):
    t0 = time.perf_counter()
    bad, total = 0, 0
    for seed in range(10):
        model, calib, _ = gen_synthetic(n=32, layers=2, heads=4, f=64, m=64, b=16, seed=seed)
        caps = _captures(model, calib, ("ffn_hidden",))
        for l in range(2):
            fac = ffn_factorization(caps.get("ffn_hidden", l), model.layers[l].ffn.w2)
            for k in (8, 16, 32, 48, 63):
                fold = prune_ffn(model, l, k, caps, "fold_qr", factorization=fac)[1].measured_err
                drop = prune_ffn(model, l, k, caps, "drop", factorization=fac)[1].measured_err
                total += 1
                bad += fold > drop
    model, calib, hold = gen_synthetic(seed=0)
    holdout = {m: evaluate(prune_model(model, calib, 0.6, m).model, model, hold)["relative_error"]
               for m in ("fold_qr", "refine_ls")}
    ok = bad == 0 and holdout["refine_ls"] <= holdout["fold_qr"]
    detail = (f"fold<=drop {total - bad}/{total}; holdout rel err refine_ls {holdout['refine_ls']:.4f} "
              f"vs fold_qr {holdout['fold_qr']:.4f}")
    assert record(5, "FFN correction dominance", ok, detail, time.perf_counter() - t0, 60)


def test_c06_tail_overestimates_layer_error(record):
    # measured at the layer output (after the residual add and norm) of post-norm toys
    t0 = time.perf_counter()
    hits, total = 0, 0
    for seed in range(10):
        model, calib, _ = gen_synthetic(n=32, layers=4, heads=4, f=64, m=64, b=16, seed=seed)
        caps = _captures(model, calib, ("ffn_hidden", "layer_out"))
        for l in range(4):
            fac = ffn_factorization(caps.get("ffn_hidden", l), model.layers[l].ffn.w2, weighted=True)
            tail = error_curve(fac)
            for k in range(1, 64, 3):
                pruned, _ = prune_ffn(model, l, k, caps, factorization=fac)
                _, after = forward_with_capture(pruned, calib.inputs, calib.lengths, [("layer_out", l)],
                                                stop_after=l)
                measured = np.linalg.norm(after.get("layer_out", l) - caps.get("layer_out", l))
                total += 1
                if tail[k] >= measured:
                    hits += 1
                else:
                    log.warning("seed %d layer %d k %d: tail %.4g < measured %.4g", seed, l, k, tail[k], measured)
    frac = hits / total
    ok = frac >= 0.95
    assert record(6, "tail overestimates layer error", ok, f"{hits}/{total} = {frac:.3f} (need 0.95)",
                  time.perf_counter() - t0, 60)


def test_c07_sketched_selection(record):
    t0 = time.perf_counter()
    worst = 0.0
    k = 16
    for seed in range(10):
        r = np.random.default_rng(700 + seed)
        a = r.standard_normal((4096, 16)) @ r.standard_normal((16, 256)) + 1e-3 * r.standard_normal((4096, 256))
        plain = np.sort(cpqr(a, rank=k).perm[:k])
        sk = sketch_rows(a, s=4 * 256, kind="countsketch", seed=seed)
        sel = np.sort(cpqr(sk, rank=k).perm[:k])

        def err(cols):
            return np.linalg.norm(a - a[:, cols] @ least_squares(a[:, cols], a), 2)

        worst = max(worst, err(sel) / err(plain))
    ok = worst <= 2
    assert record(7, "sketched selection quality", ok, f"max sketched/plain error {worst:.3f} (bound 2)",
                  time.perf_counter() - t0, 30)


def _allocation_instance(seed):
    r = np.random.default_rng(seed)
    head_cost = block_flops(32, 1, 8, 0, 16)[0]
    neuron_cost = block_flops(32, 0, 1, 1, 16)[1]
    blocks = []
    for l in range(2):
        for kind, cost in (("attention", head_cost), ("ffn", neuron_cost)):
            z = r.standard_normal((64, 3)) * r.exponential(1.0, 3)
            blocks.append(BlockTable(l, kind, error_curve(cpqr(z)), cost))
    return ErrorTables(blocks, "absolute", 16), float(r.uniform(0.35, 0.95))


def _exhaustive(tables, weighting, target):
    budget = target * tables.total_flops
    best = math.inf
    for keeps in itertools.product(*(range(bt.floor, bt.full + 1) for bt in tables.blocks)):
        if sum(bt.unit_flops * k for bt, k in zip(tables.blocks, keeps)) <= budget:
            heads, neurons = [keeps[0], keeps[2]], [keeps[1], keeps[3]]
            best = min(best, plan_objective(tables, weighting, heads, neurons))
    return best


def test_c08_allocator_gap(record):
    t0 = time.perf_counter()
    gaps, over, nested = [], 0, True
    for seed in range(20):
        tables, target = _allocation_instance(seed)
        plan = allocate_plan(tables, "bert", target)
        opt = _exhaustive(tables, "bert", target)
        gaps.append((plan.objective - opt) / opt if opt > 0 else plan.objective)
        over += plan.achieved_ratio > target + 1e-9
        prev = None
        for t in np.linspace(1.0, 0.34, 12):
            try:
                p = allocate_plan(tables, "bert", t)
            except InfeasibleBudgetError:
                break
            keep = p.keep_heads + p.keep_neurons
            if prev is not None and any(a < b for a, b in zip(prev, keep)):
                nested = False
            prev = keep
    failing = [i for i, g in enumerate(gaps) if g > 0.05]
    for i in failing:
        log.warning("instance %d: greedy gap %.1f%%", i, 100 * gaps[i])
    ok = not failing and over == 0 and nested
    detail = (f"{20 - len(failing)}/20 within 5% (worst gap {100 * max(gaps):.1f}%, instances over 5%: {failing}); "
              f"budget exceeded {over}x; nested {nested}")
    assert record(8, "allocator optimality gap", ok, detail, time.perf_counter() - t0, 10)


def test_c09_depth_weights(record):
    t0 = time.perf_counter()
    got = (depth_weight("bert", 1), depth_weight("bert", 3), depth_weight("llama", 1))
    ok = got[0] == math.sqrt(2) + 1 and got[1] == 3.0 and got[2] == 51.0
    assert record(9, "depth weights", ok, f"bert(1)={got[0]:.6f} bert(3)={got[1]:g} llama(1)={got[2]:g}",
                  time.perf_counter() - t0, 1)


def test_c10_data_usage_trend(record):
    t0 = time.perf_counter()
    sizes = [32, 64, 128, 256, 512]
    errs = np.zeros((5, len(sizes)))
    for s in range(5):
        model, calib, hold = gen_synthetic(seed=s, m=512, holdout_m=256)
        for i, m in enumerate(sizes):
            res = prune_model(model, calib.subset(m), 0.5)
            errs[s, i] = evaluate(res.model, model, hold)["relative_error"]
    mean = errs.mean(axis=0)
    pooled = math.sqrt(np.mean(errs.var(axis=0, ddof=1)))
    rises = np.diff(mean)
    ok = bool(np.all(rises <= pooled))
    detail = (f"mean holdout err {np.round(mean, 4).tolist()}, pooled std {pooled:.4f}, "
              f"max step rise {rises.max():+.4f}")
    assert record(10, "data-usage trend", ok, detail, time.perf_counter() - t0, 300)


def test_c11_determinism_and_format(record, tmp_path):
    t0 = time.perf_counter()
    model, calib, _ = gen_synthetic(seed=5, classes=3)
    save_model(model, tmp_path / "m.stm")
    save_calib(calib, tmp_path / "c.stc")
    outs = []
    for i in range(2):
        cfg = PipelineConfig(str(tmp_path / "m.stm"), str(tmp_path / "c.stc"), 0.6,
                             out_model=str(tmp_path / f"p{i}.stm"), out_report=str(tmp_path / f"r{i}.json"))
        run_pipeline(cfg)
        rep = json.loads((tmp_path / f"r{i}.json").read_text())
        rep.pop("timings")
        rep["config"].pop("out_model"), rep["config"].pop("out_report")
        outs.append(((tmp_path / f"p{i}.stm").read_bytes(), json.dumps(rep)))
    same_run = outs[0] == outs[1]
    mbytes = model_to_bytes(model)
    cbytes = (tmp_path / "c.stc").read_bytes()
    round_trip = (model_to_bytes(model_from_bytes(mbytes)) == mbytes
                  and calib_to_bytes(load_calib(tmp_path / "c.stc")) == cbytes
                  and calib_to_bytes(calib_from_bytes(cbytes)) == cbytes)
    rejected = 0
    corrupt = [
        (b"BAD!" + mbytes[4:], model_from_bytes, FormatError),
        (mbytes[:-4], model_from_bytes, TruncatedFileError),
        (mbytes[:6], model_from_bytes, TruncatedFileError),
        (cbytes[:-1], calib_from_bytes, TruncatedFileError),
        (b"STM1" + cbytes[4:], calib_from_bytes, FormatError),
    ]
    for data, loader, exc in corrupt:
        try:
            loader(data)
        except exc:
            rejected += 1
    ok = same_run and round_trip and rejected == len(corrupt)
    detail = f"repeat runs identical {same_run}; round trips identical {round_trip}; corrupt rejected {rejected}/{len(corrupt)}"
    assert record(11, "determinism and format", ok, detail, time.perf_counter() - t0, 30)
