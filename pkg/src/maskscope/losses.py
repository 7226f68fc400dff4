"""Training objectives for mask-classification models.

Every loss here returns its value together with gradients with respect to
the raw class and mask logits, so the toy decoder can train without an
autodiff framework.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .matching import MatchResult, hungarian_assign
from .numerics import log_sigmoid, sigmoid_map, softmax_rows
from .structures import Prediction
from .validation import check_binary_map, check_same_shape

DICE_EPS = 1e-8
BCE_CLAMP = 1e-7
CONTRASTIVE_MODES = ("literal", "symmetric-inlier")


@dataclass
class LossWeights:
    lambda_bce: float = 5.0
    lambda_dice: float = 5.0
    lambda_ce_matched: float = 2.0
    lambda_ce_noobject: float = 0.1

    def __post_init__(self):
        for k, v in vars(self).items():
            if v < 0:
                raise ValueError(f"{k} must be non-negative, got {v}")


@dataclass
class LossBreakdown:
    """Scalar loss plus its parts and gradients w.r.t. the prediction logits."""

    total: float
    parts: dict
    grad_class_logits: np.ndarray | None = None
    grad_mask_logits: np.ndarray | None = None
    match: MatchResult | None = None
    extra: dict = field(default_factory=dict)


def _mask_terms(x, g):
    """BCE and dice of logits ``x`` against binary ``g`` plus their gradients."""
    n = x.size
    p = sigmoid_map(x)
    bce = float((-(g * log_sigmoid(x) + (1 - g) * log_sigmoid(-x))).sum() / n)
    d_bce = (p - g) / n
    inter = float((p * g).sum())
    denom = float(p.sum() + g.sum() + DICE_EPS)
    dice = 1.0 - 2.0 * inter / denom
    d_dice = -2.0 * (g * denom - inter) / denom**2 * p * (1 - p)
    return bce, dice, d_bce, d_dice


def bce_dice_mask_loss(mask_logits, gt_mask, weights=None):
    """Return ``(L_bce, L_dice, L_masks)`` for one predicted mask."""
    w = weights or LossWeights()
    x = np.asarray(mask_logits, dtype=np.float64)
    g = check_binary_map(gt_mask, "gt mask").astype(np.float64)
    check_same_shape(x, g, names=("mask logits", "gt mask"))
    bce, dice, _, _ = _mask_terms(x, g)
    return bce, dice, w.lambda_bce * bce + w.lambda_dice * dice


def _cross_entropy(logits, target):
    """CE of one logit row against ``target``; returns value and gradient."""
    probs = softmax_rows(logits[None])[0]
    shifted = logits - logits.max()
    value = float(np.log(np.exp(shifted).sum()) - shifted[target])
    grad = probs.copy()
    grad[target] -= 1.0
    return value, grad


def matching_cost(p: Prediction, gt_masks, gt_classes, weights=None):
    """(n_pred, n_gt) cost ``L_masks + lambda_ce_matched * CE`` used for matching."""
    w = weights or LossWeights()
    n = p.num_queries
    cost = np.zeros((n, len(gt_classes)))
    for j, (g, c) in enumerate(zip(gt_masks, gt_classes)):
        for i in range(n):
            bce, dice, _, _ = _mask_terms(p.mask_logits[i], g)
            ce, _ = _cross_entropy(p.class_logits[i], c)
            cost[i, j] = w.lambda_bce * bce + w.lambda_dice * dice + w.lambda_ce_matched * ce
    return cost


def _check_targets(p, gt_masks, gt_classes):
    if not p.no_object:
        raise ValueError("training losses need predictions with a no-object column")
    gt_masks = np.asarray(gt_masks)
    if gt_masks.ndim == 2:
        gt_masks = gt_masks[None]
    gt_masks = check_binary_map(gt_masks, "gt masks").astype(np.float64)
    gt_classes = [int(c) for c in gt_classes]
    if len(gt_classes) != gt_masks.shape[0]:
        raise ValueError("one class id per ground-truth mask is required")
    if gt_masks.shape[0] and gt_masks.shape[1:] != p.hw:
        raise ValueError(f"gt mask shape {gt_masks.shape[1:]} != prediction {p.hw}")
    for c in gt_classes:
        if not 0 <= c < p.num_classes:
            raise ValueError(f"class id {c} out of range for {p.num_classes} classes")
    return gt_masks, gt_classes


def training_loss(p: Prediction, gt_masks, gt_classes, weights=None, match=None):
    """Matched mask + classification loss with no-object padding.

    ``L = sum_matched (L_masks + 2 CE(class)) + 0.1 sum_unmatched CE(no-object)``.
    Pass ``match`` to reuse an assignment instead of recomputing it.
    """
    w = weights or LossWeights()
    gt_masks, gt_classes = _check_targets(p, gt_masks, gt_classes)
    if match is None:
        match = hungarian_assign(matching_cost(p, gt_masks, gt_classes, w))
    no_obj = p.class_logits.shape[1] - 1
    dC = np.zeros_like(p.class_logits)
    dM = np.zeros_like(p.mask_logits)
    parts = {"bce": 0.0, "dice": 0.0, "ce_matched": 0.0, "ce_noobject": 0.0}
    for i, j in match.pairs:
        bce, dice, d_bce, d_dice = _mask_terms(p.mask_logits[i], gt_masks[j])
        parts["bce"] += bce
        parts["dice"] += dice
        dM[i] += w.lambda_bce * d_bce + w.lambda_dice * d_dice
        ce, g = _cross_entropy(p.class_logits[i], gt_classes[j])
        parts["ce_matched"] += ce
        dC[i] += w.lambda_ce_matched * g
    for i in match.unmatched:
        ce, g = _cross_entropy(p.class_logits[i], no_obj)
        parts["ce_noobject"] += ce
        dC[i] += w.lambda_ce_noobject * g
    parts["masks"] = w.lambda_bce * parts["bce"] + w.lambda_dice * parts["dice"]
    parts["ce"] = w.lambda_ce_matched * parts["ce_matched"] + w.lambda_ce_noobject * parts["ce_noobject"]
    total = parts["masks"] + parts["ce"]
    return LossBreakdown(total, parts, dC, dM, match)


def _likelihood_parts(p):
    n, h, w = p.mask_logits.shape
    probs = softmax_rows(p.class_logits_known())  # (N, Z)
    masks = sigmoid_map(p.mask_logits).reshape(n, h * w)  # (N, P)
    scores = probs.T @ masks  # (Z, P)
    best = scores.argmax(axis=0)
    return probs, masks, scores, best


def negative_likelihood(p: Prediction):
    """``-max_z softmax(C)^T . sigmoid(M)`` per pixel; equals anomaly score minus one."""
    _, _, scores, _ = _likelihood_parts(p)
    return -scores.max(axis=0).reshape(p.hw)


def negative_likelihood_backward(p: Prediction, grad_l):
    """Push ``dL/dl_N`` (H, W) back to class and mask logits.

    Only the winning class at each pixel receives gradient; the softmax runs
    over the real classes, so the no-object column gets none.
    """
    probs, masks, _, best = _likelihood_parts(p)
    gl = np.asarray(grad_l, dtype=np.float64).ravel()
    # l_N = -sum_n probs[n, best] * masks[n]
    win = probs[:, best]  # (N, P)
    d_masks = -win * gl[None, :]
    d_probs = np.zeros_like(probs)
    np.add.at(d_probs.T, best, (-(masks * gl[None, :])).T)
    d_known = probs * (d_probs - (d_probs * probs).sum(axis=1, keepdims=True))
    dC = np.zeros_like(p.class_logits)
    dC[:, : probs.shape[1]] = d_known
    dM = (d_masks * masks * (1 - masks)).reshape(p.mask_logits.shape)
    return dC, dM


def contrastive_terms(l_n, m_ood, margin, mode="literal"):
    """Per-pixel ``l_CL`` and ``d l_CL / d l_N``."""
    if margin <= 0:
        raise ValueError(f"margin must be positive, got {margin}")
    if mode not in CONTRASTIVE_MODES:
        raise ValueError(f"mode must be one of {CONTRASTIVE_MODES}")
    l_n = np.asarray(l_n, dtype=np.float64)
    out = check_binary_map(m_ood, "outlier mask")
    check_same_shape(l_n, out, names=("l_N", "outlier mask"))
    inlier = l_n + 1.0 if mode == "symmetric-inlier" else l_n
    hinge = np.maximum(0.0, margin - l_n)
    l_cl = np.where(out, hinge, inlier)
    d = np.where(out, np.where(margin - l_n > 0, -1.0, 0.0), 1.0)
    return l_cl, d


def contrastive_loss(l_n, m_ood, margin=0.75, mode="literal"):
    """Mean over pixels of ``0.5 * l_CL**2``.

    ``literal`` uses ``l_N`` on inlier pixels; ``symmetric-inlier`` uses
    ``l_N + 1`` so inliers are pulled toward a likelihood of one.
    """
    l_cl, _ = contrastive_terms(l_n, m_ood, margin, mode)
    return float((0.5 * l_cl**2).mean())


def contrastive_loss_grad(l_n, m_ood, margin=0.75, mode="literal"):
    l_cl, d = contrastive_terms(l_n, m_ood, margin, mode)
    return l_cl * d / l_cl.size


def outlier_bce_loss(l_n, m_ood, eps=BCE_CLAMP):
    """Binary cross-entropy on ``p = -l_N`` (inlier probability), clamped to [eps, 1 - eps]."""
    l_n = np.asarray(l_n, dtype=np.float64)
    out = check_binary_map(m_ood, "outlier mask").astype(np.float64)
    check_same_shape(l_n, out, names=("l_N", "outlier mask"))
    p = np.clip(-l_n, eps, 1 - eps)
    return float((-((1 - out) * np.log(p) + out * np.log(1 - p))).mean())


def outlier_bce_loss_grad(l_n, m_ood, eps=BCE_CLAMP):
    l_n = np.asarray(l_n, dtype=np.float64)
    out = check_binary_map(m_ood, "outlier mask").astype(np.float64)
    raw = -l_n
    p = np.clip(raw, eps, 1 - eps)
    dp = (-(1 - out) / p + out / (1 - p)) / l_n.size
    dp = np.where((raw > eps) & (raw < 1 - eps), dp, 0.0)
    return -dp


def ood_total_loss(p: Prediction, gt_masks, gt_classes, m_ood, margin=0.75, weights=None,
                   mode="literal", outlier_loss="contrastive", match=None):
    """Outlier-stage objective ``L_outlier + L_masks + lambda_ce L_ce``.

    ``outlier_loss`` selects the contrastive term or the BCE variant.
    """
    base = training_loss(p, gt_masks, gt_classes, weights, match=match)
    l_n = negative_likelihood(p)
    if outlier_loss == "contrastive":
        value = contrastive_loss(l_n, m_ood, margin, mode)
        g = contrastive_loss_grad(l_n, m_ood, margin, mode)
    elif outlier_loss == "bce":
        value = outlier_bce_loss(l_n, m_ood)
        g = outlier_bce_loss_grad(l_n, m_ood)
    else:
        raise ValueError(f"unknown outlier loss {outlier_loss!r}")
    dC, dM = negative_likelihood_backward(p, g)
    parts = dict(base.parts, outlier=value)
    return LossBreakdown(
        base.total + value,
        parts,
        base.grad_class_logits + dC,
        base.grad_mask_logits + dM,
        base.match,
    )
