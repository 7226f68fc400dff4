"""Command-line entry point ``maskscope``.

Exit status: 0 on success, 1 when a check (gradcheck, selfcheck) fails,
2 on invalid input.
"""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import io
from .losses import CONTRASTIVE_MODES
from .structures import VOID_LABEL, Prediction, Taxonomy


class UsageError(ValueError):
    pass


def _emit(report, out=None):
    text = json.dumps(report, indent=2, sort_keys=True)
    if out:
        Path(out).write_text(text + "\n")
    else:
        print(text)


def _taxonomy(args, required=True):
    if getattr(args, "taxonomy", None):
        return Taxonomy.load(args.taxonomy)
    if required:
        raise UsageError(f"{args.command} needs --taxonomy")
    return None


def _prediction(args):
    C = io.load_tensor(args.class_scores).astype(np.float64)
    M = io.load_tensor(args.mask_logits).astype(np.float64)
    return Prediction(C, M, no_object=args.no_object)


def _save_labels(path, labels):
    if str(path).endswith(".png"):
        io.save_labelmap(path, labels)
    else:
        io.save_tensor(path, labels, dtype=np.uint32)


def _offset(text):
    try:
        r, c = (int(v) for v in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"offset must look like 'row,col', got {text!r}")
    return r, c


# ------------------------------------------------------------------ commands


def cmd_score(args):
    from .scoring import mask_anomaly_score, refine_scores, refinement_mask

    p = _prediction(args)
    f = mask_anomaly_score(p)
    report = {"raw_min": float(f.min()), "raw_max": float(f.max())}
    if args.refine:
        r = refinement_mask(p, _taxonomy(args), conf=args.conf,
                            formula_literal=args.formula_literal)
        f = refine_scores(f, r)
        report["refined_pixels_zeroed"] = int((r == 0).sum())
    io.save_tensor(args.out, f)
    report.update(out=str(args.out), min=float(f.min()), max=float(f.max()))
    _emit(report, args.report)


def cmd_oss(args):
    from .openset import oss_inference, threshold_at_tpr

    p = _prediction(args)
    if (args.threshold is None) == (args.calib is None):
        raise UsageError("oss needs exactly one of --threshold or --calib SCORES LABELS")
    if args.calib:
        scores = io.load_tensor(args.calib[0]).astype(np.float64)
        gt = io.load_map(args.calib[1])
        valid = (gt == 0) | (gt == 1)
        tau = threshold_at_tpr(scores[valid], gt[valid] == 1, args.tpr)
    else:
        tau = args.threshold
    labels = oss_inference(p, tau)
    _save_labels(args.out, labels)
    _emit({"threshold": tau, "anomaly_label": p.num_classes,
           "anomaly_pixels": int((labels == p.num_classes).sum()), "out": str(args.out)},
          args.report)


def cmd_ops(args):
    from .openset import ops_inference

    p = _prediction(args)
    tax = _taxonomy(args)
    res = ops_inference(p, tax, known_floor=args.known_floor, bg_threshold=args.bg_threshold,
                        iou_min=args.iou_min, min_area=args.min_area,
                        connectivity=args.connectivity, top_k=args.cc_top_k,
                        max_iters=args.cc_max_iters)
    io.save_panoptic(args.out, res.panoptic)
    decisions = [
        {"component": d.component, "queries": list(d.queries), "area": d.area,
         "E_S": d.entropy_stuff, "E_T": d.entropy_things, "is_unknown": d.is_unknown}
        for d in res.decisions
    ]
    _emit({
        "known_queries": res.known.indices,
        "num_components": res.components.count,
        "decisions": decisions,
        "unknown_instances": sum(d["is_unknown"] for d in decisions),
        "segments": sorted([list(k) for k in res.panoptic.segments()]),
        "out": str(args.out),
    }, args.report)


def _pairs(pred, gt):
    """Pair files by stem; single files pair with each other."""
    pred, gt = Path(pred), Path(gt)
    if pred.is_file() and gt.is_file():
        return [(pred, gt)]
    if not (pred.is_dir() and gt.is_dir()):
        raise UsageError("--pred and --gt must both be files or both be directories")
    p_files = {f.stem: f for f in sorted(pred.iterdir()) if f.is_file()}
    g_files = {f.stem: f for f in sorted(gt.iterdir()) if f.is_file()}
    if set(p_files) != set(g_files):
        only_p = sorted(set(p_files) - set(g_files))
        only_g = sorted(set(g_files) - set(p_files))
        raise UsageError(f"unpaired files: prediction-only {only_p}, ground-truth-only {only_g}")
    if not p_files:
        raise UsageError("no files to evaluate")
    return [(p_files[s], g_files[s]) for s in sorted(p_files)]


def cmd_eval(args):
    from . import metrics

    pairs = _pairs(args.pred, args.gt)
    if args.kind == "pixel":
        scores = [io.load_map(p).astype(np.float64) for p, _ in pairs]
        gts = [io.load_map(g) for _, g in pairs]
        report = metrics.pixel_metrics(scores, gts)
    elif args.kind == "component":
        preds, gts, ignores = [], [], []
        for p, g in pairs:
            gt = io.load_map(g)
            preds.append((io.load_map(p) != 0).astype(np.uint8))
            ignores.append((gt != 0) & (gt != 1))
            gts.append((gt == 1).astype(np.uint8))
        cfg = metrics.ComponentEvalConfig(tau=args.tau, connectivity=args.connectivity)
        report = metrics.component_metrics(preds, gts, cfg, ignores)
    elif args.kind == "open-iou":
        if args.num_classes is None:
            raise UsageError("eval open-iou needs --num-classes")
        preds = [io.load_map(p).astype(np.int64) for p, _ in pairs]
        gts = [io.load_map(g).astype(np.int64) for _, g in pairs]
        report = metrics.open_iou(preds, gts, args.num_classes, void=args.void)
    else:
        tax = _taxonomy(args)
        preds = [io.load_panoptic(p, tax.void) for p, _ in pairs]
        gts = [io.load_panoptic(g, tax.void) for _, g in pairs]
        report = metrics.panoptic_quality(preds, gts, tax)
    report["num_images"] = len(pairs)
    _emit(report, args.out)


def cmd_mix(args):
    from .outliermix import anomaly_mix

    comp = anomaly_mix(io.load_image(args.inlier), io.load_labelmap(args.labels),
                       io.load_image(args.ood), io.load_binary(args.ood_mask),
                       offset=args.offset, seed=args.seed)
    prefix = str(args.out_prefix)
    io.save_image(prefix + "_image.png", comp.image)
    io.save_labelmap(prefix + "_labels.png", comp.labels)
    io.save_labelmap(prefix + "_ood.png", comp.ood_mask)
    _emit({"offset": list(comp.offset), "pasted_pixels": int(comp.ood_mask.sum()),
           "seed": args.seed, "inlier": str(args.inlier), "ood": str(args.ood),
           "outputs": [prefix + s for s in ("_image.png", "_labels.png", "_ood.png")]},
          args.report)


def cmd_gradcheck(args):
    from .attention import grad_check
    from .selfcheck import decoder_grad_check

    seeds = range(args.seed, args.seed + args.seeds)
    att = {s: grad_check(s, args.epsilon, mode=args.mode).worst for s in seeds}
    report = {"epsilon": args.epsilon, "tolerance": args.tol, "mode": args.mode,
              "attention_max_rel_error": max(att.values())}
    if not args.skip_decoder:
        dec = {s: decoder_grad_check(s, args.epsilon) for s in seeds}
        report["decoder_max_rel_error"] = max(dec.values())
    report["passed"] = all(v < args.tol for k, v in report.items() if k.endswith("rel_error"))
    _emit(report, args.out)
    return 0 if report["passed"] else 1


def cmd_demo_decoder(args):
    from .selfcheck import demo_decoder

    report = demo_decoder(seed=args.seed, steps=args.steps, lr=args.lr,
                          outlier_steps=args.outlier_steps,
                          contrastive_mode=args.contrastive_mode)
    _emit(report, args.out)


def cmd_selfcheck(args):
    from .selfcheck import run_all

    results = run_all(seed=args.seed, log=lambda line: print(line, file=sys.stderr))
    report = {"passed": all(r["passed"] for r in results), "criteria": results}
    _emit(report, args.out)
    return 0 if report["passed"] else 1


# -------------------------------------------------------------------- parser


def _add_prediction_args(sp):
    sp.add_argument("--class-scores", required=True, help="class logits C, MT01 (N, Z) or (N, Z+1)")
    sp.add_argument("--mask-logits", required=True, help="mask logits M, MT01 (N, H, W)")
    sp.add_argument("--no-object", action="store_true",
                    help="the last column of C is the no-object logit")


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--taxonomy", default=argparse.SUPPRESS, help="taxonomy JSON")
    common.add_argument("--threads", type=int, default=argparse.SUPPRESS,
                        help="cap on BLAS/OpenMP threads")
    common.add_argument("--seed", type=int, default=argparse.SUPPRESS)

    parser = argparse.ArgumentParser(prog="maskscope", description=__doc__.splitlines()[0])
    parser.add_argument("--taxonomy", default=None)
    parser.add_argument("--threads", type=int, default=None)
    parser.add_argument("--seed", type=int, default=0)
    sub = parser.add_subparsers(dest="command", required=True)

    sp = sub.add_parser("score", parents=[common], help="mask anomaly scores")
    _add_prediction_args(sp)
    sp.add_argument("--refine", action="store_true")
    sp.add_argument("--formula-literal", action="store_true",
                    help="use the product form min(1, Cbar.Mbar) for the refinement mask")
    sp.add_argument("--conf", type=float, default=0.95)
    sp.add_argument("--out", required=True, help="output score map (MT01 f64)")
    sp.add_argument("--report")
    sp.set_defaults(func=cmd_score)

    sp = sub.add_parser("oss", parents=[common], help="open-set semantic segmentation")
    _add_prediction_args(sp)
    sp.add_argument("--calib", nargs=2, metavar=("SCORES", "LABELS"))
    sp.add_argument("--tpr", type=float, default=0.95)
    sp.add_argument("--threshold", type=float)
    sp.add_argument("--out", required=True, help="label map (.png or MT01 u32)")
    sp.add_argument("--report")
    sp.set_defaults(func=cmd_oss)

    sp = sub.add_parser("ops", parents=[common], help="open-set panoptic segmentation")
    _add_prediction_args(sp)
    sp.add_argument("--known-floor", type=float, default=0.5)
    sp.add_argument("--bg-threshold", type=float, default=0.5)
    sp.add_argument("--iou-min", type=float, default=0.5)
    sp.add_argument("--min-area", type=int, default=16)
    sp.add_argument("--connectivity", type=int, choices=(4, 8), default=8)
    sp.add_argument("--cc-top-k", type=int, default=3, help="0 keeps every component")
    sp.add_argument("--cc-max-iters", type=int, default=500, help="0 uses union-find")
    sp.add_argument("--out", required=True, help="panoptic map (MT01 u32)")
    sp.add_argument("--report")
    sp.set_defaults(func=cmd_ops)

    sp = sub.add_parser("eval", parents=[common], help="evaluation metrics")
    sp.add_argument("kind", choices=("pixel", "component", "open-iou", "pq"))
    sp.add_argument("--pred", required=True)
    sp.add_argument("--gt", required=True)
    sp.add_argument("--tau", type=float, default=0.25)
    sp.add_argument("--connectivity", type=int, choices=(4, 8), default=8)
    sp.add_argument("--num-classes", type=int)
    sp.add_argument("--void", type=int, default=VOID_LABEL)
    sp.add_argument("--out")
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("mix", parents=[common], help="paste an outlier object")
    sp.add_argument("--inlier", required=True)
    sp.add_argument("--labels", required=True)
    sp.add_argument("--ood", required=True)
    sp.add_argument("--ood-mask", required=True)
    sp.add_argument("--offset", type=_offset)
    sp.add_argument("--out-prefix", required=True)
    sp.add_argument("--report")
    sp.set_defaults(func=cmd_mix)

    sp = sub.add_parser("gradcheck", parents=[common], help="finite-difference gradient checks")
    sp.add_argument("--seeds", type=int, default=32)
    sp.add_argument("--epsilon", type=float, default=1e-5)
    sp.add_argument("--tol", type=float, default=1e-5)
    sp.add_argument("--mode", choices=("CA", "MA", "GMA"), default="GMA")
    sp.add_argument("--skip-decoder", action="store_true")
    sp.add_argument("--out")
    sp.set_defaults(func=cmd_gradcheck)

    sp = sub.add_parser("demo-decoder", parents=[common], help="train the toy decoder")
    sp.add_argument("--steps", type=int, default=300)
    sp.add_argument("--lr", type=float, default=0.01)
    sp.add_argument("--outlier-steps", type=int, default=150)
    sp.add_argument("--contrastive-mode", choices=CONTRASTIVE_MODES, default="literal")
    sp.add_argument("--out")
    sp.set_defaults(func=cmd_demo_decoder)

    sp = sub.add_parser("selfcheck", parents=[common], help="run the acceptance checks")
    sp.add_argument("--out")
    sp.set_defaults(func=cmd_selfcheck)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command == "ops":
        args.cc_top_k = args.cc_top_k or None
        args.cc_max_iters = args.cc_max_iters or None
    if args.threads is not None and args.threads < 1:
        print("maskscope: error: --threads must be at least 1", file=sys.stderr)
        return 2
    try:
        with threadpool_limits(limits=args.threads):
            code = args.func(args)
    except (ValueError, FileNotFoundError, IsADirectoryError) as exc:
        print(f"maskscope: error: {exc}", file=sys.stderr)
        return 2
    return code or 0


if __name__ == "__main__":
    sys.exit(main())
