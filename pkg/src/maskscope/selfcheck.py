"""End-to-end acceptance checks, shared by ``maskscope selfcheck`` and the test suite.

Each ``check_*`` function returns a dict with ``criterion``, ``name``,
``passed``, ``seconds`` and a free-form ``detail``.
"""
from __future__ import annotations

import contextlib
import io as _stdio
import json
import math
import tempfile
import time
from pathlib import Path

import numpy as np

from . import io, oracles
from .attention import (
    AttentionMaskPair,
    attend,
    grad_check,
    numeric_gradient,
    relative_error,
)
from .components import connected_components
from .decoder import ToyDecoder, blob_dataset, outlier_gap, sample_loss, train_toy
from .losses import negative_likelihood
from .matching import hungarian_assign
from .metrics import fpr_at_95tpr
from .numerics import NEG_INF
from .openset import background_region, select_known
from .scoring import (
    marginal_class_scores,
    mask_anomaly_score,
    refine_scores,
    refinement_mask,
)
from .structures import PanopticMap, Prediction, Taxonomy


def _result(criterion, name, passed, start, **detail):
    return {"criterion": criterion, "name": name, "passed": bool(passed),
            "seconds": round(time.perf_counter() - start, 3), "detail": detail}


def _cli(argv):
    """Run the CLI in-process; returns (exit code, parsed JSON stdout or None)."""
    from .cli import main

    buf = _stdio.StringIO()
    with contextlib.redirect_stdout(buf):
        code = main([str(a) for a in argv])
    text = buf.getvalue().strip()
    return code, (json.loads(text) if text else None)


# ------------------------------------------------------------- 1: oracles


def random_prediction(rng, max_queries=8, max_classes=6, max_side=16, no_object=None):
    n = int(rng.integers(1, max_queries + 1))
    z = int(rng.integers(2, max_classes + 1))
    h, w = (int(v) for v in rng.integers(1, max_side + 1, 2))
    if no_object is None:
        no_object = bool(rng.integers(2))
    C = rng.normal(0, 2.0, (n, z + int(no_object)))
    M = rng.normal(0, 3.0, (n, h, w))
    return Prediction(C, M, no_object=no_object)


def _background_oracle(p, floor):
    known = select_known(p, floor)
    C = p.class_logits_known()
    idx = []
    for n in range(p.num_queries):
        row = [float(v) for v in C[n]]
        m = max(row)
        e = [math.exp(v - m) for v in row]
        if max(e) / sum(e) <= floor:
            continue
        if p.no_object:
            full = list(p.class_logits[n])
            if max(range(len(full)), key=lambda i: (full[i], -i)) == len(full) - 1:
                continue
        idx.append(n)
    bg_lib = background_region(known, p.hw)
    bg_ref = oracles.background_loop([C[i].tolist() for i in idx],
                                     [p.mask_logits[i].tolist() for i in idx], p.hw)
    return idx == known.indices, np.max(np.abs(bg_lib - np.array(bg_ref)))


def check_formula_oracles(seed=0, instances=200, tol=1e-9):
    start = time.perf_counter()
    rng = np.random.default_rng(seed)
    worst = {"marginal": 0.0, "anomaly": 0.0, "negative_likelihood": 0.0, "background": 0.0}
    same_selection = True
    for _ in range(instances):
        p = random_prediction(rng)
        C, M = p.class_logits.tolist(), p.mask_logits.tolist()
        pairs = (
            ("marginal", marginal_class_scores(p),
             oracles.marginal_scores_loop(C, M, p.no_object)),
            ("anomaly", mask_anomaly_score(p), oracles.anomaly_score_loop(C, M, p.no_object)),
            ("negative_likelihood", negative_likelihood(p),
             oracles.negative_likelihood_loop(C, M, p.no_object)),
        )
        for name, lib, ref in pairs:
            worst[name] = max(worst[name], float(np.max(np.abs(lib - np.array(ref)))))
        ok, err = _background_oracle(p, float(rng.uniform(0.2, 0.8)))
        same_selection &= ok
        worst["background"] = max(worst["background"], float(err))
    elapsed = time.perf_counter() - start
    passed = same_selection and max(worst.values()) <= tol and elapsed < 10
    return _result(1, "formula oracles", passed, start, max_abs_error=worst,
                   instances=instances, tolerance=tol)


# --------------------------------------------------- 2: attention equivalences


def check_attention_equivalences(seed=0, instances=100, tol=1e-12):
    start = time.perf_counter()
    rng = np.random.default_rng(seed)
    worst_gma_ma = worst_ma_ca = 0.0
    for _ in range(instances):
        n, p, c = (int(v) for v in rng.integers(1, 7, 3))
        Q, K = rng.normal(size=(n, c)), rng.normal(size=(p, c))
        V, X = rng.normal(size=(p, c)), rng.normal(size=(n, c))
        fg = np.where(rng.random((n, p)) < 0.5, 0.0, NEG_INF)
        no_bg = AttentionMaskPair(fg, np.full((n, p), NEG_INF), complementary=False)
        gma, _, _ = attend(Q, K, V, X, no_bg, "GMA")
        ma, _, _ = attend(Q, K, V, X, no_bg, "MA")
        worst_gma_ma = max(worst_gma_ma, float(np.max(np.abs(gma - ma))))
        open_all = AttentionMaskPair(np.zeros((n, p)), np.full((n, p), NEG_INF))
        ma, _, _ = attend(Q, K, V, X, open_all, "MA")
        ca, _, _ = attend(Q, K, V, X, None, "CA")
        worst_ma_ca = max(worst_ma_ca, float(np.max(np.abs(ma - ca))))
    passed = worst_gma_ma <= tol and worst_ma_ca <= tol
    return _result(2, "attention equivalences", passed, start,
                   gma_vs_ma=worst_gma_ma, ma_vs_ca=worst_ma_ca, instances=instances)


# ------------------------------------------------------- 3: gradient checks


def tiny_decoder_sample(seed):
    """L=1, N=2, 4x4 decoder problem with an outlier mask."""
    rng = np.random.default_rng(seed)
    d = ToyDecoder(1, 2, 3, 2, seed=seed, query_scale=1.0, weight_scale=0.7)
    gt = (rng.random((4, 4)) < 0.5).astype(np.int64)
    ood = np.zeros((4, 4), dtype=np.int64)
    ood[int(rng.integers(4)), int(rng.integers(4))] = 1
    sample = {
        "features": rng.normal(size=(16, 3)),
        "hw": (4, 4),
        "gt_masks": np.stack([1 - gt, gt]),
        "gt_classes": [0, 1],
        "ood_mask": ood,
    }
    return d, sample


def decoder_grad_check(seed, epsilon=1e-5):
    """Worst elementwise relative error of the full decoder loss gradient."""
    d, sample = tiny_decoder_sample(seed)
    res, grads = sample_loss(d, sample)
    match = res.match  # freeze the assignment so the loss is smooth around the point

    def objective():
        return sample_loss(d, sample, match=match)[0].total

    worst = 0.0
    for name, arr in d.parameters().items():
        numeric = numeric_gradient(objective, arr, epsilon)
        worst = max(worst, float(relative_error(grads[name], numeric).max()))
    return worst


def check_gradients(seeds=32, epsilon=1e-5, tol=1e-5):
    start = time.perf_counter()
    att = max(grad_check(s, epsilon).worst for s in range(seeds))
    dec = max(decoder_grad_check(s, epsilon) for s in range(seeds))
    elapsed = time.perf_counter() - start
    passed = att < tol and dec < tol and elapsed < 30
    return _result(3, "gradient checks", passed, start, attention_max_rel_error=att,
                   decoder_max_rel_error=dec, seeds=seeds, epsilon=epsilon)


# ---------------------------------------------------------------- 4: Hungarian


def check_hungarian(seed=0, trials=1000, max_size=6):
    start = time.perf_counter()
    rng = np.random.default_rng(seed)
    failures = 0
    for t in range(trials):
        n_gt = int(rng.integers(1, max_size + 1))
        n_pred = int(rng.integers(n_gt, max_size + 1))
        if t % 2:
            cost = rng.integers(0, 5, (n_pred, n_gt)).astype(np.float64)  # many ties
        else:
            cost = rng.normal(size=(n_pred, n_gt))
        best, _ = oracles.brute_force_assign(cost.tolist())
        got = hungarian_assign(cost)
        if abs(got.cost - best) > 1e-9 * max(1.0, abs(best)):
            failures += 1
    return _result(4, "hungarian optimality", failures == 0, start, trials=trials,
                   failures=failures)


# --------------------------------------------------------- 5: metric examples


def write_metric_fixtures(root):
    """Write the worked metric examples as MT01 files; returns a dict of paths."""
    root = Path(root)
    out = {}

    def pair(name, pred, gt, pred_dtype=None, gt_dtype=None):
        pd, gd = root / name / "pred", root / name / "gt"
        pd.mkdir(parents=True, exist_ok=True)
        gd.mkdir(parents=True, exist_ok=True)
        io.save_tensor(pd / "case.mt", pred, dtype=pred_dtype)
        io.save_tensor(gd / "case.mt", gt, dtype=gt_dtype)
        out[name] = (pd, gd)

    pair("auprc", np.array([[0.9, 0.8, 0.7, 0.1]]), np.array([[1, 0, 1, 0]]), gt_dtype=np.uint8)
    pair("fpr95", np.array([[0.9, 0.8, 0.7, 0.6, 0.65, 0.5, 0.4]]),
         np.array([[1, 1, 1, 1, 0, 0, 0]]), gt_dtype=np.uint8)
    pair("component", np.array([[0, 1, 1]]), np.array([[1, 1, 0]]),
         pred_dtype=np.uint8, gt_dtype=np.uint8)
    pair("open_iou", np.array([[0, 1, 1, 1]]), np.array([[0, 0, 1, 2]]),
         pred_dtype=np.uint32, gt_dtype=np.uint32)
    # thing segment: gt pixels 0-3, prediction pixels 1-4, IoU 3/5; the rest is stuff
    g_cls = np.array([[0, 0, 0, 0, 1, 1, 1, 1]])
    p_cls = np.array([[1, 0, 0, 0, 0, 1, 1, 1]])
    inst = lambda cls: np.where(cls == 0, 1, 0)
    pair("pq", PanopticMap(p_cls, inst(p_cls)).encode(), PanopticMap(g_cls, inst(g_cls)).encode())
    tax = root / "pq_taxonomy.json"
    tax.write_text(json.dumps(Taxonomy(things={0}, stuff={1}).to_dict()))
    out["pq_taxonomy"] = tax
    return out


METRIC_EXPECTATIONS = {
    "auprc": {"auprc_exact": "5/6"},
    "fpr95": {"fpr95_exact": "1/3"},
    "component": {"siou_mean_exact": "1/3", "ppv_mean_exact": "1/2", "f1_star_exact": "1"},
    "open_iou": {"open_iou_per_class_exact": {"0": "1/2", "1": "1/3"}},
    "pq": {"pq_things_exact": "3/5", "sq_things_exact": "3/5", "rq_things_exact": "1"},
}


def check_metric_examples():
    start = time.perf_counter()
    got = {}
    with tempfile.TemporaryDirectory() as tmp:
        fx = write_metric_fixtures(tmp)
        runs = {
            "auprc": ["pixel"],
            "fpr95": ["pixel"],
            "component": ["component", "--tau", "0.25"],
            "open_iou": ["open-iou", "--num-classes", "2"],
            "pq": ["pq", "--taxonomy", fx["pq_taxonomy"]],
        }
        for name, extra in runs.items():
            pred, gt = fx[name]
            code, report = _cli(["eval", extra[0], "--pred", pred, "--gt", gt, *extra[1:]])
            got[name] = {k: (report or {}).get(k) for k in METRIC_EXPECTATIONS[name]}
            got[name]["exit"] = code
    passed = all(
        got[n]["exit"] == 0 and all(got[n][k] == v for k, v in exp.items())
        for n, exp in METRIC_EXPECTATIONS.items()
    )
    return _result(5, "metric hand-oracles via eval", passed, start, observed=got)


# ------------------------------------------------------------- 6: toy decoder


def demo_decoder(seed=0, steps=300, lr=0.01, outlier_steps=150, contrastive_mode="literal"):
    """Closed-set training on blob scenes, then an outlier stage with the contrastive loss.

    The outlier gap is measured on held-out scenes (same embeddings, new layouts).
    """
    d = ToyDecoder(2, 4, 8, 2, seed=seed)
    trace = train_toy(d, blob_dataset(seed), steps, lr)
    train_out = blob_dataset(seed, outlier=True, layout_seed=seed + 1)
    held_out = blob_dataset(seed, outlier=True, layout_seed=seed + 2)
    gap_before = outlier_gap(d, held_out)
    out_trace = train_toy(d, train_out, outlier_steps, lr, contrastive_mode=contrastive_mode)
    return {
        "seed": seed,
        "steps": steps,
        "lr": lr,
        "loss_trace": trace,
        "initial_loss": trace[0] if trace else None,
        "final_loss": trace[-1] if trace else None,
        "loss_ratio": (trace[-1] / trace[0]) if trace else None,
        "outlier_steps": outlier_steps,
        "outlier_loss_trace": out_trace,
        "contrastive_mode": contrastive_mode,
        "margin": 0.75,
        "gap_before_outlier_stage": gap_before,
        "gap_train_scenes": outlier_gap(d, train_out),
        "gap_held_out": outlier_gap(d, held_out),
    }


def check_toy_training(seed=0):
    start = time.perf_counter()
    code, report = _cli(["demo-decoder", "--seed", seed, "--steps", 300])
    elapsed = time.perf_counter() - start
    ok = (code == 0 and report["loss_ratio"] < 0.25 and report["gap_held_out"] >= 0.2
          and elapsed < 120)
    return _result(6, "toy decoder training", ok, start, loss_ratio=report["loss_ratio"],
                   gap_held_out=report["gap_held_out"],
                   gap_before=report["gap_before_outlier_stage"])


# ------------------------------------------------------------- 7: refinement


def refinement_scene():
    """16x16 scene: confident stuff on top, road below, anomaly blob on the road.

    Classes: 0 thing, 1 stuff, 2 road (stuff). Two blob pixels are partly
    covered by the road mask, so at 95% TPR the threshold dips below the
    stuff-region scores unless refinement removes them.
    Returns ``(prediction, taxonomy, anomaly_gt, stuff_region)``.
    """
    h = w = 16
    stuff_rows = slice(0, 6)
    M = np.full((3, h, w), -8.0)
    M[0, stuff_rows] = 0.3
    M[1, 6:] = 6.0
    blob = np.zeros((h, w), dtype=bool)
    blob[9:13, 5:11] = True
    M[1][blob] = np.linspace(-6.0, -1.0, int(blob.sum()))
    M[1, 9, 5] = M[1, 9, 6] = 0.5
    C = np.array([[-3.0, 3.5, -3.0],
                  [-3.0, -3.0, 3.5],
                  [3.5, -3.0, -3.0]])
    tax = Taxonomy(things={0}, stuff={1, 2}, road=2)
    stuff = np.zeros((h, w), dtype=bool)
    stuff[stuff_rows] = True
    return Prediction(C, M), tax, blob.astype(np.uint8), stuff


def check_refinement():
    start = time.perf_counter()
    p, tax, gt, stuff = refinement_scene()
    raw = mask_anomaly_score(p)
    r = refinement_mask(p, tax)
    refined = refine_scores(raw, r)
    zero_on_stuff = bool((refined[stuff] == 0).all())
    unchanged = bool(np.array_equal(refined[~stuff], raw[~stuff]))
    fpr_raw = fpr_at_95tpr(raw, gt, exact=True)
    fpr_ref = fpr_at_95tpr(refined, gt, exact=True)
    passed = zero_on_stuff and unchanged and fpr_ref < fpr_raw
    return _result(7, "refinement mask", passed, start, zero_on_stuff=zero_on_stuff,
                   unchanged_elsewhere=unchanged, fpr95_raw=str(fpr_raw),
                   fpr95_refined=str(fpr_ref))


# ----------------------------------------------------------------- 8: mining


MINING_CASES = {
    # scores of the overlapping query -> (E_S, E_T, unknown) to three decimals
    "unknown": ([0.45, 0.05, 0.25, 0.25], 0.693, 0.325, True),
    "known": ([0.4, 0.4, 0.15, 0.05], 0.562, 0.693, False),
}


def write_mining_case(root, scores):
    """8x8 image: the candidate query covers a 6x6 block; a confident stuff query covers the rest."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    block = np.zeros((8, 8), dtype=bool)
    block[1:7, 1:7] = True
    M = np.stack([np.where(block, 6.0, -6.0), np.where(block, -6.0, 6.0)])
    C = np.log(np.array([scores, [0.01, 0.01, 0.97, 0.01]]))
    io.save_tensor(root / "C.mt", C)
    io.save_tensor(root / "M.mt", M)
    tax = root / "taxonomy.json"
    tax.write_text(json.dumps(Taxonomy(things={0, 1}, stuff={2, 3}).to_dict()))
    return root / "C.mt", root / "M.mt", tax


def check_flood_fill(seed=0, maps=500, side=16):
    rng = np.random.default_rng(seed)
    mismatches = 0
    for i in range(maps):
        binary = rng.random((side, side)) < rng.uniform(0.2, 0.7)
        conn = 8 if i % 2 == 0 else 4
        ref, count = oracles.flood_fill_components(binary.tolist(), conn)
        ref = np.array(ref)
        for max_iters in (None, side * side):
            got = connected_components(binary, conn, max_iters)
            if got.count != count or not np.array_equal(got.labels, ref):
                mismatches += 1
    return mismatches


def check_mining():
    start = time.perf_counter()
    observed = {}
    ok = True
    with tempfile.TemporaryDirectory() as tmp:
        for name, (scores, e_s, e_t, unknown) in MINING_CASES.items():
            C, M, tax = write_mining_case(Path(tmp) / name, scores)
            code, report = _cli(["ops", "--class-scores", C, "--mask-logits", M,
                                 "--taxonomy", tax, "--out", Path(tmp) / f"{name}.mt"])
            decs = (report or {}).get("decisions", [])
            observed[name] = {"exit": code, "decisions": decs}
            ok &= (code == 0 and len(decs) == 1
                   and round(decs[0]["E_S"], 3) == e_s and round(decs[0]["E_T"], 3) == e_t
                   and decs[0]["is_unknown"] is unknown)
    mismatches = check_flood_fill()
    return _result(8, "unknown-instance mining", ok and mismatches == 0, start,
                   observed=observed, flood_fill_mismatches=mismatches)


# ---------------------------------------------------------- 9: format fidelity


def roundtrip_cases(seed=0, cases=1000):
    """Randomized MT01 and LabelPNG round trips; returns the number of failures of each kind."""
    rng = np.random.default_rng(seed)
    dtypes = [np.float32, np.float64, np.uint8, np.uint16, np.uint32]
    mt_fail = png_fail = 0
    with tempfile.TemporaryDirectory() as tmp:
        png = Path(tmp) / "lab.png"
        for _ in range(cases):
            dt = np.dtype(dtypes[int(rng.integers(len(dtypes)))])
            shape = tuple(int(v) for v in rng.integers(0, 5, int(rng.integers(0, 4))))
            if dt.kind == "f":
                arr = rng.normal(size=shape).astype(dt)
            else:
                arr = rng.integers(0, np.iinfo(dt).max, size=shape, dtype=dt, endpoint=True)
            blob = io.encode_tensor(arr)
            back = io.decode_tensor(blob)
            if io.encode_tensor(back) != blob or back.dtype != dt or not np.array_equal(
                    back, arr, equal_nan=dt.kind == "f"):
                mt_fail += 1
            h, w = (int(v) for v in rng.integers(1, 12, 2))
            lab = rng.integers(0, 65536, (h, w)).astype(np.uint16)
            lab[rng.random((h, w)) < 0.1] = 65535
            io.save_labelmap(png, lab)
            first = png.read_bytes()
            again = io.load_labelmap(png)
            io.save_labelmap(png, again)
            if not np.array_equal(again, lab) or png.read_bytes() != first:
                png_fail += 1
    return mt_fail, png_fail


CHECKS = (
    check_formula_oracles,
    check_attention_equivalences,
    check_gradients,
    check_hungarian,
    check_metric_examples,
    check_toy_training,
    check_refinement,
    check_mining,
)


def run_all(seed=0, log=None):
    """Run criteria 1-8 in order."""
    results = []
    for check in CHECKS:
        res = check(seed=seed) if "seed" in check.__code__.co_varnames else check()
        results.append(res)
        if log:
            status = "PASS" if res["passed"] else "FAIL"
            log(f"[{status}] criterion {res['criterion']}: {res['name']} ({res['seconds']}s)")
    return results
