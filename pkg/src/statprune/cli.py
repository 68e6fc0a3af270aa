"""Command line entry point: ``statprune {gen,prune,allocate,eval}``."""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from .allocate import allocate_plan, build_error_tables, default_weighting
from .errors import InfeasibleBudgetError, PipelineError, StatPruneError
from .formats import load_calib, load_model, save_calib, save_model
from .model import all_capture_points, forward_with_capture
from .pipeline import PipelineConfig, evaluate, report_json, run_pipeline
from .prune import SketchConfig
from .synthetic import PLANTED, gen_synthetic

log = logging.getLogger("statprune")

EXIT_OK, EXIT_INVALID, EXIT_INFEASIBLE = 0, 1, 2
_ERROR_MODES = {"abs": "absolute", "rel": "relative", "auto": "auto"}
_MODES = {"fold-qr": "fold_qr", "refine-ls": "refine_ls"}


class _Parser(argparse.ArgumentParser):
    # usage errors are validation errors; exit code 2 is reserved for infeasible budgets
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_INVALID, f"{self.prog}: error: {message}\n")


def _add_selection_args(p):
    p.add_argument("--model", required=True)
    p.add_argument("--calib", required=True)
    p.add_argument("--flops-ratio", type=float, required=True)
    p.add_argument("--error", choices=sorted(_ERROR_MODES), default="auto")
    p.add_argument("--weighting", choices=["bert", "llama", "none", "auto"], default="auto")
    p.add_argument("--sketch", choices=["off", "countsketch", "gaussian"], default="off")
    p.add_argument("--sketch-rows", type=int, default=None, help="sketch size (default 4 x columns)")
    p.add_argument("--sketch-threshold", type=int, default=262144,
                   help="only sketch activation matrices with more rows than this")
    p.add_argument("--groups", type=int, default=None, help="column groups for FFN selection")
    p.add_argument("--seed", type=int, default=0)


def build_parser():
    parser = _Parser(prog="statprune", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", help="write a random toy model with calibration and holdout sets")
    g.add_argument("--n", type=int, default=32)
    g.add_argument("--layers", type=int, default=4)
    g.add_argument("--heads", type=int, default=4)
    g.add_argument("--dh", type=int, default=None)
    g.add_argument("--f", type=int, default=128)
    g.add_argument("--m", type=int, default=128)
    g.add_argument("--b", type=int, default=16)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--planted", choices=PLANTED, default="none")
    g.add_argument("--norm", choices=["post", "pre"], default="post")
    g.add_argument("--norm-kind", choices=["layernorm", "rmsnorm"], default="layernorm")
    g.add_argument("--activation", choices=["gelu", "relu"], default="gelu")
    g.add_argument("--classes", type=int, default=None)
    g.add_argument("--holdout-m", type=int, default=None)
    g.add_argument("--out", required=True, help="output prefix: writes PREFIX.stm, PREFIX.stc, PREFIX.holdout.stc")

    p = sub.add_parser("prune", help="prune a model to a FLOPs ratio")
    _add_selection_args(p)
    p.add_argument("--mode", choices=sorted(_MODES), default="fold-qr")
    p.add_argument("--holdout", default=None)
    p.add_argument("--out", default=None)
    p.add_argument("--report", default=None)

    a = sub.add_parser("allocate", help="compute the per-layer plan only")
    _add_selection_args(a)
    a.add_argument("--dry-run", action="store_true", help="print the plan without pruning (always on)")
    a.add_argument("--report", default=None)

    e = sub.add_parser("eval", help="compare model A against reference model B")
    e.add_argument("--a", required=True)
    e.add_argument("--b", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--report", default=None)
    return parser


def _sketch(args):
    return SketchConfig(kind=args.sketch, rows=args.sketch_rows, threshold=args.sketch_threshold,
                        groups=args.groups, seed=args.seed)


def _emit(obj, path):
    text = report_json(obj)
    if path:
        Path(path).write_text(text)
    else:
        sys.stdout.write(text)


def cmd_gen(args):
    model, calib, holdout = gen_synthetic(
        n=args.n, layers=args.layers, heads=args.heads, d_h=args.dh, f=args.f, m=args.m, b=args.b,
        seed=args.seed, planted=args.planted, norm=args.norm, activation=args.activation,
        classes=args.classes, holdout_m=args.holdout_m, norm_kind=args.norm_kind,
    )
    save_model(model, args.out + ".stm")
    save_calib(calib, args.out + ".stc")
    save_calib(holdout, args.out + ".holdout.stc")
    log.info("wrote %s.stm, %s.stc, %s.holdout.stc", args.out, args.out, args.out)


def cmd_prune(args):
    config = PipelineConfig(
        model_path=args.model, calib_path=args.calib, target_ratio=args.flops_ratio,
        mode=_MODES[args.mode], error_mode=_ERROR_MODES[args.error], weighting=args.weighting,
        sketch=_sketch(args), seed=args.seed, out_model=args.out, out_report=args.report,
        holdout_path=args.holdout,
    )
    _, report = run_pipeline(config)
    if not args.report:
        sys.stdout.write(report_json(report))


def cmd_allocate(args):
    model = load_model(args.model)
    calib = load_calib(args.calib)
    _, caps = forward_with_capture(model, calib.inputs, calib.lengths,
                                   all_capture_points(model, ("attn_concat", "ffn_hidden")))
    weighting = args.weighting
    if weighting == "auto":
        weighting = default_weighting(model)
    tables = build_error_tables(model, caps, _ERROR_MODES[args.error], seq_len=calib.b, sketch=_sketch(args))
    plan = allocate_plan(tables, weighting, args.flops_ratio)
    _emit({"weighting": weighting, "error_mode": tables.error_mode, "plan": plan.to_dict()}, args.report)


def cmd_eval(args):
    a, b = load_model(args.a), load_model(args.b)
    data = load_calib(args.data)
    _emit(evaluate(a, b, data), args.report)


COMMANDS = {"gen": cmd_gen, "prune": cmd_prune, "allocate": cmd_allocate, "eval": cmd_eval}


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        COMMANDS[args.command](args)
    except (InfeasibleBudgetError, PipelineError) as e:
        cause = e.cause if isinstance(e, PipelineError) else e
        if isinstance(cause, InfeasibleBudgetError):
            print(f"statprune: infeasible budget: {e}", file=sys.stderr)
            return EXIT_INFEASIBLE
        print(f"statprune: error: {e}", file=sys.stderr)
        return EXIT_INVALID
    except (StatPruneError, ValueError, OSError) as e:
        print(f"statprune: error: {e}", file=sys.stderr)
        return EXIT_INVALID
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
