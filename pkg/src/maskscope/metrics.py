"""Evaluation metrics: pixel AuPRC/FPR95, component sIoU/PPV/F1*, Open-IoU and PQ.

Counting metrics are accumulated as integers and reported both as floats and
as exact ``Fraction`` values, so small hand-worked cases can be compared
without rounding. Accumulators merge per-image statistics in call order.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np

from .components import connected_components
from .openset import threshold_at_tpr
from .structures import VOID_LABEL, PanopticMap, Taxonomy
from .validation import check_binary_map, check_same_shape

EXACT_AP_LIMIT = 10000


def _ratio(num, den):
    return Fraction(int(num), int(den)) if den else None


def _fmt(x):
    if x is None:
        return None
    return float(x)


def _exact(x):
    if x is None:
        return None
    return str(x)


# ---------------------------------------------------------------- pixel level


def _pool_pixels(scores, gts):
    if isinstance(scores, np.ndarray) and scores.ndim <= 2:
        scores, gts = [scores], [gts]
    s_all, y_all = [], []
    for s, g in zip(scores, gts):
        s = np.asarray(s, dtype=np.float64)
        g = np.asarray(g)
        check_same_shape(s, g, names=("scores", "ground truth"))
        valid = (g == 0) | (g == 1)  # everything else is void
        s_all.append(s[valid])
        y_all.append(g[valid] == 1)
    return np.concatenate(s_all), np.concatenate(y_all)


@dataclass
class PRCurve:
    """Precision and recall at each unique score, thresholds in descending order."""

    thresholds: np.ndarray
    precision: np.ndarray
    recall: np.ndarray
    true_positives: np.ndarray
    predicted_positives: np.ndarray
    num_positives: int


def pr_curve(scores, gts):
    s, y = _pool_pixels(scores, gts)
    n_pos = int(y.sum())
    if n_pos == 0:
        raise ValueError("no anomalous pixels in the ground truth")
    order = np.argsort(-s, kind="stable")
    s, y = s[order], y[order]
    # last index of each run of equal scores
    ends = np.r_[np.flatnonzero(np.diff(s) != 0), s.size - 1]
    tp = np.cumsum(y)[ends]
    pp = ends + 1
    return PRCurve(s[ends], tp / pp, tp / n_pos, tp, pp, n_pos)


def auprc(scores, gts, exact=False):
    """Average precision ``sum_i (R_i - R_{i-1}) P_i`` over descending unique thresholds."""
    c = pr_curve(scores, gts)
    d_tp = np.diff(np.r_[0, c.true_positives])
    if exact:
        if c.thresholds.size > EXACT_AP_LIMIT:
            return None
        return sum(
            (Fraction(int(dt), c.num_positives) * Fraction(int(tp), int(pp))
             for dt, tp, pp in zip(d_tp, c.true_positives, c.predicted_positives) if dt),
            Fraction(0),
        )
    return float((d_tp / c.num_positives * c.precision).sum())


def fpr_at_tpr(scores, gts, tpr=0.95, exact=False):
    """False-positive rate at the threshold from :func:`threshold_at_tpr`."""
    s, y = _pool_pixels(scores, gts)
    if (~y).sum() == 0:
        raise ValueError("no non-anomalous pixels in the ground truth")
    gamma = threshold_at_tpr(s, y, tpr)
    fp = int((s[~y] >= gamma).sum())
    value = Fraction(fp, int((~y).sum()))
    return value if exact else float(value)


def fpr_at_95tpr(scores, gts, exact=False):
    return fpr_at_tpr(scores, gts, 0.95, exact)


def pixel_metrics(scores, gts):
    s, y = _pool_pixels(scores, gts)
    ap_exact = auprc([s], [y.astype(np.int64)], exact=True)
    fpr = fpr_at_95tpr([s], [y.astype(np.int64)], exact=True)
    return {
        "auprc": auprc([s], [y.astype(np.int64)]),
        "auprc_exact": _exact(ap_exact),
        "fpr95": float(fpr),
        "fpr95_exact": _exact(fpr),
        "threshold95": threshold_at_tpr(s, y, 0.95),
        "num_positive_pixels": int(y.sum()),
        "num_negative_pixels": int((~y).sum()),
    }


# ------------------------------------------------------------ component level


def default_tau_sweep():
    return [round(0.25 + 0.05 * i, 2) for i in range(11)]


@dataclass
class ComponentEvalConfig:
    tau: float = 0.25
    tau_sweep: list = field(default_factory=default_tau_sweep)
    connectivity: int = 8

    def __post_init__(self):
        for t in [self.tau, *self.tau_sweep]:
            if not 0 < t < 1:
                raise ValueError(f"tau must lie in (0, 1), got {t}")


@dataclass
class ComponentStats:
    """Per-component sIoU (ground truth) and PPV (prediction) values, pooled over images."""

    siou: list = field(default_factory=list)
    ppv: list = field(default_factory=list)

    def merge(self, other):
        self.siou.extend(other.siou)
        self.ppv.extend(other.ppv)
        return self


def component_stats(pred, gt, connectivity=8, ignore=None):
    """sIoU for every gt component and PPV for every predicted component of one image.

    ``ignore`` marks pixels excluded from all counts.
    """
    pred = check_binary_map(pred, "prediction", ndim=2)
    gt = check_binary_map(gt, "ground truth", ndim=2)
    check_same_shape(pred, gt, names=("prediction", "ground truth"))
    if ignore is not None:
        keep = ~np.asarray(ignore, dtype=bool)
        pred, gt = pred & keep, gt & keep
    g_lab = connected_components(gt, connectivity).labels
    p_lab = connected_components(pred, connectivity).labels
    stats = ComponentStats()
    for k in range(1, g_lab.max() + 1):
        comp = g_lab == k
        hit = np.unique(p_lab[comp & (p_lab > 0)])
        k_hat = np.isin(p_lab, hit)
        adjust = k_hat & (g_lab > 0) & ~comp
        inter = int((comp & k_hat).sum())
        union = int(((comp | k_hat) & ~adjust).sum())
        stats.siou.append(Fraction(inter, union))
    for k in range(1, p_lab.max() + 1):
        comp = p_lab == k
        hit = np.unique(g_lab[comp & (g_lab > 0)])
        covered = np.isin(g_lab, hit) & (g_lab > 0)
        stats.ppv.append(Fraction(int((comp & covered).sum()), int(comp.sum())))
    return stats


def f1_star(stats: ComponentStats, tau):
    tau = Fraction(str(tau))  # decimal thresholds compare exactly against ratios
    tp = sum(1 for s in stats.siou if s > tau)
    fn = len(stats.siou) - tp
    fp = sum(1 for p in stats.ppv if p <= tau)
    den = 2 * tp + fn + fp
    return (Fraction(2 * tp, den) if den else None), tp, fn, fp


def component_metrics(preds, gts, cfg=None, ignores=None):
    """Mean sIoU, mean PPV, F1* at ``cfg.tau`` and F1* averaged over ``cfg.tau_sweep``."""
    cfg = cfg or ComponentEvalConfig()
    if isinstance(preds, np.ndarray) and preds.ndim == 2:
        preds, gts = [preds], [gts]
        ignores = None if ignores is None else [ignores]
    ignores = ignores or [None] * len(preds)
    stats = ComponentStats()
    for p, g, ig in zip(preds, gts, ignores):
        stats.merge(component_stats(p, g, cfg.connectivity, ig))
    if not stats.siou and not stats.ppv:
        return {"siou_mean": None, "ppv_mean": None, "f1_star": None, "f1_star_sweep": None,
                "tp": 0, "fn": 0, "fp": 0}
    siou = sum(stats.siou, Fraction(0)) / len(stats.siou) if stats.siou else None
    ppv = sum(stats.ppv, Fraction(0)) / len(stats.ppv) if stats.ppv else None
    f1, tp, fn, fp = f1_star(stats, cfg.tau)
    sweep = [f1_star(stats, t)[0] for t in cfg.tau_sweep]
    sweep_mean = sum(sweep, Fraction(0)) / len(sweep) if sweep and None not in sweep else None
    return {
        "siou_mean": _fmt(siou),
        "siou_mean_exact": _exact(siou),
        "ppv_mean": _fmt(ppv),
        "ppv_mean_exact": _exact(ppv),
        "f1_star": _fmt(f1),
        "f1_star_exact": _exact(f1),
        "f1_star_sweep": _fmt(sweep_mean),
        "f1_star_sweep_exact": _exact(sweep_mean),
        "tau": cfg.tau,
        "tau_sweep": list(cfg.tau_sweep),
        "tp": tp,
        "fn": fn,
        "fp": fp,
        "num_gt_components": len(stats.siou),
        "num_pred_components": len(stats.ppv),
    }


# ------------------------------------------------------------------- open-IoU


@dataclass
class ConfusionMatrix:
    """(Z + 1) x (Z + 1) counts; rows are ground truth, columns prediction, index Z is anomaly."""

    num_classes: int
    counts: np.ndarray = None

    def __post_init__(self):
        if self.counts is None:
            self.counts = np.zeros((self.num_classes + 1, self.num_classes + 1), dtype=np.int64)

    def update(self, pred, gt, void=VOID_LABEL):
        pred = np.asarray(pred, dtype=np.int64)
        gt = np.asarray(gt, dtype=np.int64)
        check_same_shape(pred, gt, names=("prediction", "ground truth"))
        keep = gt != void
        p, g = pred[keep], gt[keep]
        k = self.num_classes + 1
        for name, arr in (("prediction", p), ("ground truth", g)):
            if arr.size and (arr.min() < 0 or arr.max() >= k):
                raise ValueError(f"{name} label out of range [0, {k - 1}]")
        self.counts += np.bincount(g * k + p, minlength=k * k).reshape(k, k)
        return self

    def merge(self, other):
        self.counts += other.counts
        return self


def open_iou(preds, gts, num_classes, void=VOID_LABEL):
    """Per-class Open-IoU over known classes plus the closed IoU for comparison.

    Open-IoU charges every off-diagonal count in the class row and column,
    the anomaly index included. The closed IoU drops the counts that involve
    the anomaly index.
    """
    if isinstance(preds, np.ndarray) and preds.ndim <= 2:
        preds, gts = [preds], [gts]
    cm = ConfusionMatrix(num_classes)
    for p, g in zip(preds, gts):
        cm.update(p, g, void)
    c = cm.counts
    z = num_classes
    per_open, per_closed = {}, {}
    for a in range(z):
        tp = int(c[a, a])
        fp_all = int(c[:, a].sum()) - tp
        fn_all = int(c[a, :].sum()) - tp
        fp_known = int(c[:z, a].sum()) - tp
        fn_known = int(c[a, :z].sum()) - tp
        per_open[a] = _ratio(tp, tp + fp_all + fn_all)
        per_closed[a] = _ratio(tp, tp + fp_known + fn_known)
    present = [a for a in range(z) if per_open[a] is not None]
    mean = sum((per_open[a] for a in present), Fraction(0)) / len(present) if present else None
    return {
        "open_iou_per_class": {str(a): _fmt(v) for a, v in per_open.items()},
        "open_iou_per_class_exact": {str(a): _exact(v) for a, v in per_open.items()},
        "open_iou_mean": _fmt(mean),
        "open_iou_mean_exact": _exact(mean),
        "iou_per_class": {str(a): _fmt(v) for a, v in per_closed.items()},
        "confusion_matrix": c.tolist(),
    }


# ------------------------------------------------------------ panoptic quality


@dataclass
class PQStats:
    tp: dict = field(default_factory=dict)
    fp: dict = field(default_factory=dict)
    fn: dict = field(default_factory=dict)
    iou_sum: dict = field(default_factory=dict)

    def _add(self, table, cls, v):
        table[cls] = table.get(cls, 0) + v

    def merge(self, other):
        for name in ("tp", "fp", "fn", "iou_sum"):
            for cls, v in getattr(other, name).items():
                self._add(getattr(self, name), cls, v)
        return self

    def classes(self):
        return sorted(set(self.tp) | set(self.fp) | set(self.fn))

    def class_pq(self, cls):
        tp, fp, fn = self.tp.get(cls, 0), self.fp.get(cls, 0), self.fn.get(cls, 0)
        if tp + fp + fn == 0:
            return None
        sq = self.iou_sum.get(cls, Fraction(0)) / tp if tp else Fraction(0)
        rq = Fraction(2 * tp, 2 * tp + fp + fn)
        return sq * rq, sq, rq


def _check_instance_ids(pan: PanopticMap):
    keep = (pan.classes != pan.void) & (pan.instances > 0)
    pairs = np.unique(np.stack([pan.instances[keep], pan.classes[keep]], axis=1), axis=0)
    ids, counts = np.unique(pairs[:, 0], return_counts=True) if len(pairs) else ([], [])
    dup = [int(i) for i, n in zip(ids, counts) if n > 1]
    if dup:
        raise ValueError(f"instance ids {dup} are used by more than one class")


def pq_stats(pred: PanopticMap, gt: PanopticMap):
    """Match segments of one image (IoU > 0.5, same class) and count TP/FP/FN per class.

    Ground-truth void pixels are removed from unions; an unmatched predicted
    segment lying mostly on void is not a false positive.
    """
    check_same_shape(pred.classes, gt.classes, names=("prediction", "ground truth"))
    _check_instance_ids(pred)
    _check_instance_ids(gt)
    void = gt.classes == gt.void
    stats = PQStats()
    p_segs = pred.segments()
    g_segs = gt.segments()
    matched_p = set()
    matched_g = set()
    for gk, gm in g_segs.items():
        for pk, pm in p_segs.items():
            if pk[0] != gk[0] or pk in matched_p:
                continue
            inter = int((gm & pm).sum())
            if not inter:
                continue
            union = int((gm | pm).sum()) - int((pm & void).sum())
            iou = Fraction(inter, union)
            if iou > Fraction(1, 2):
                matched_p.add(pk)
                matched_g.add(gk)
                stats._add(stats.tp, gk[0], 1)
                stats._add(stats.iou_sum, gk[0], iou)
                break
    for gk in g_segs:
        if gk not in matched_g:
            stats._add(stats.fn, gk[0], 1)
    for pk, pm in p_segs.items():
        if pk in matched_p:
            continue
        if Fraction(int((pm & void).sum()), int(pm.sum())) > Fraction(1, 2):
            continue
        stats._add(stats.fp, pk[0], 1)
    return stats


def _average(stats, classes):
    vals = [stats.class_pq(c) for c in classes]
    vals = [v for v in vals if v is not None]
    if not vals:
        return None, None, None
    n = len(vals)
    return tuple(sum((v[i] for v in vals), Fraction(0)) / n for i in range(3))


def panoptic_quality(preds, gts, taxonomy: Taxonomy):
    """PQ, SQ and RQ averaged over classes present in prediction or ground truth.

    Reported overall and split into things, stuff and the unknown class.
    """
    if isinstance(preds, PanopticMap):
        preds, gts = [preds], [gts]
    stats = PQStats()
    for p, g in zip(preds, gts):
        stats.merge(pq_stats(p, g))
    present = stats.classes()
    unknown = [taxonomy.unknown_id]
    groups = {
        "": present,
        "_things": [c for c in present if c in taxonomy.things],
        "_stuff": [c for c in present if c in taxonomy.stuff],
        "_unknown": [c for c in present if c in unknown],
    }
    report = {}
    for suffix, classes in groups.items():
        pq, sq, rq = _average(stats, classes)
        for name, v in (("pq", pq), ("sq", sq), ("rq", rq)):
            report[name + suffix] = _fmt(v)
            report[name + suffix + "_exact"] = _exact(v)
    report["per_class"] = {
        str(c): {
            "tp": stats.tp.get(c, 0),
            "fp": stats.fp.get(c, 0),
            "fn": stats.fn.get(c, 0),
            "iou_sum": _exact(stats.iou_sum.get(c, Fraction(0))),
        }
        for c in present
    }
    return report
