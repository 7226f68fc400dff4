"""Open-set semantic and panoptic inference on mask-classification outputs."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .components import ComponentSet, connected_components
from .numerics import shannon_entropy, sigmoid_map, softmax_rows
from .scoring import class_probabilities, mask_anomaly_score, segment_map
from .structures import PanopticMap, Prediction, Taxonomy
from .validation import check_binary_map, check_prediction


def threshold_at_tpr(scores, is_anomaly, tpr=0.95):
    """Largest threshold keeping at least ``tpr`` of the anomalous scores at or above it."""
    scores = np.asarray(scores, dtype=np.float64).ravel()
    pos = np.asarray(is_anomaly, dtype=bool).ravel()
    if scores.shape != pos.shape:
        raise ValueError("scores and labels differ in length")
    positives = np.sort(scores[pos])[::-1]
    if positives.size == 0:
        raise ValueError("threshold_at_tpr needs at least one anomalous sample")
    if not 0 < tpr <= 1:
        raise ValueError("tpr must lie in (0, 1]")
    # the k-th largest positive is the largest value with >= k positives at or above it
    k = math.ceil(tpr * positives.size - 1e-9)
    return float(positives[max(k, 1) - 1])


def oss_inference(p, tau):
    """Closed-set labels with pixels scoring ``>= tau`` overridden by the anomaly label Z."""
    p = check_prediction(p)
    labels, _ = segment_map(p)
    f = mask_anomaly_score(p)
    return np.where(f >= tau, p.num_classes, labels)


@dataclass
class KnownSubset:
    class_logits: np.ndarray
    mask_logits: np.ndarray
    indices: list = field(default_factory=list)
    floor: float = 0.0


def select_known(p, floor=0.5):
    """Queries whose best real class has probability above ``floor``.

    With a no-object column, queries whose overall argmax is no-object are
    dropped as well.
    """
    p = check_prediction(p)
    probs = class_probabilities(p)
    keep = probs.max(axis=1) > floor
    if p.no_object:
        full = softmax_rows(p.class_logits)
        keep &= full.argmax(axis=1) != full.shape[1] - 1
    idx = [int(i) for i in np.flatnonzero(keep)]
    return KnownSubset(p.class_logits_known()[idx], p.mask_logits[idx], idx, floor)


def background_region(k: KnownSubset, hw=None):
    """``1 - max_n (max_z softmax(C_k)) * sigmoid(M_k)``; all ones when the subset is empty."""
    if len(k.class_logits) == 0:
        if hw is None:
            hw = k.mask_logits.shape[1:]
        return np.ones(hw)
    conf = softmax_rows(k.class_logits).max(axis=1)
    weighted = conf[:, None, None] * sigmoid_map(k.mask_logits)
    return 1.0 - weighted.max(axis=0)


@dataclass
class MiningDecision:
    component: int
    queries: tuple
    entropy_stuff: float
    entropy_things: float
    area: int

    @property
    def is_unknown(self) -> bool:
        return self.entropy_stuff > self.entropy_things


def subset_entropy(probs, subset):
    """Entropy of ``probs`` renormalized over the class ids in ``subset``."""
    sub = np.asarray([probs[c] for c in sorted(subset)])
    if sub.sum() <= 0:
        return 0.0
    return shannon_entropy(sub / sub.sum())


def _select_components(comps: ComponentSet, min_area, top_k):
    areas = comps.areas()
    ids = [k + 1 for k in range(comps.count) if areas[k] >= min_area]
    if top_k is not None:
        ids = sorted(sorted(ids, key=lambda k: -areas[k - 1])[:top_k])
    return ids


def mine_unknown_instances(background, p, taxonomy: Taxonomy, iou_min=0.5, min_area=16,
                           connectivity=8, top_k=None, max_iters=None, mask_threshold=0.5):
    """Split the background into components and keep those that look like things.

    A component is compared with every binarized query mask; masks with IoU
    >= ``iou_min`` contribute the entropies of their class distribution
    renormalized over stuff and over things. The averages decide: stuff
    entropy above things entropy marks an unknown instance.

    Returns ``(decisions, unknown_masks, components)``.
    """
    p = check_prediction(p)
    if not taxonomy.things or not taxonomy.stuff:
        raise ValueError("mining needs non-empty things and stuff sets")
    taxonomy.check_covers(p.num_classes)
    bg = check_binary_map(background, "background", ndim=2)
    comps = connected_components(bg, connectivity, max_iters)
    probs = class_probabilities(p)
    binarized = sigmoid_map(p.mask_logits) > mask_threshold
    decisions, unknown = [], []
    for cid in _select_components(comps, min_area, top_k):
        comp = comps.labels == cid
        inter = (binarized & comp).sum(axis=(1, 2))
        union = (binarized | comp).sum(axis=(1, 2))
        iou = inter / np.maximum(union, 1)
        overlapping = [int(i) for i in np.flatnonzero(iou >= iou_min)]
        if not overlapping:
            continue
        e_s = float(np.mean([subset_entropy(probs[i], taxonomy.stuff) for i in overlapping]))
        e_t = float(np.mean([subset_entropy(probs[i], taxonomy.things) for i in overlapping]))
        dec = MiningDecision(cid, tuple(overlapping), e_s, e_t, int(comp.sum()))
        decisions.append(dec)
        if dec.is_unknown:
            unknown.append(comp)
    return decisions, unknown, comps


def assemble_panoptic(p, known: KnownSubset, unknown_masks, taxonomy: Taxonomy, mask_threshold=0.5):
    """Paint known queries by confidence, merge stuff per class, then add unknown instances.

    Each pixel goes to the known query maximizing ``confidence * sigmoid(M)``
    provided that query's mask probability there exceeds ``mask_threshold``.
    Unknown instances take the reserved unknown class with fresh instance ids;
    an unknown instance only claims pixels no earlier unknown instance owns.
    """
    p = check_prediction(p)
    h, w = p.hw
    classes = np.full((h, w), taxonomy.void, dtype=np.int64)
    instances = np.zeros((h, w), dtype=np.int64)
    next_id = 1
    if len(known.indices):
        probs = softmax_rows(known.class_logits)
        conf = probs.max(axis=1)
        top = probs.argmax(axis=1)
        masks = sigmoid_map(known.mask_logits)
        owner = (conf[:, None, None] * masks).argmax(axis=0)
        for q in range(len(known.indices)):
            region = (owner == q) & (masks[q] > mask_threshold)
            if not region.any():
                continue
            cls = int(top[q])
            classes[region] = cls
            if cls in taxonomy.stuff:
                instances[region] = 0
            else:
                instances[region] = next_id
                next_id += 1
    claimed = np.zeros((h, w), dtype=bool)
    for m in unknown_masks:
        region = np.asarray(m, dtype=bool) & ~claimed
        if not region.any():
            continue
        classes[region] = taxonomy.unknown_id
        instances[region] = next_id
        next_id += 1
        claimed |= region
    return PanopticMap(classes, instances, void=taxonomy.void)


@dataclass
class OPSResult:
    panoptic: PanopticMap
    background: np.ndarray
    decisions: list
    components: ComponentSet
    known: KnownSubset


def ops_inference(p, taxonomy: Taxonomy, known_floor=0.5, bg_threshold=0.5, iou_min=0.5,
                  min_area=16, connectivity=8, top_k=3, max_iters=500):
    """Background extraction, unknown-instance mining and panoptic assembly.

    Background pixels are those with ``B > bg_threshold``. Only the ``top_k``
    largest components are mined (None keeps all); ``max_iters`` caps the
    labeling sweeps (None uses union-find).
    """
    p = check_prediction(p)
    known = select_known(p, known_floor)
    bg = background_region(known, p.hw)
    decisions, unknown, comps = mine_unknown_instances(
        bg > bg_threshold, p, taxonomy, iou_min, min_area, connectivity, top_k, max_iters
    )
    pan = assemble_panoptic(p, known, unknown, taxonomy)
    return OPSResult(pan, bg, decisions, comps, known)


class OpenSetSegmenter(BaseEstimator):
    """Open-set semantic segmentation with a threshold calibrated at a target TPR.

    ``fit(predictions, anomaly_maps)`` pools anomaly scores over the
    calibration images and stores ``threshold_``; ``predict`` labels each
    image with Z + 1 labels, Z being the anomaly label. A fixed ``threshold``
    skips calibration.
    """

    def __init__(self, tpr=0.95, threshold=None):
        self.tpr = tpr
        self.threshold = threshold

    def fit(self, X, y=None):
        if self.threshold is not None:
            self.threshold_ = float(self.threshold)
            return self
        if y is None:
            raise ValueError("calibration needs ground-truth anomaly maps")
        scores = np.concatenate([mask_anomaly_score(p).ravel() for p in X])
        labels = np.concatenate([np.asarray(g).ravel() for g in y])
        valid = (labels == 0) | (labels == 1)  # anything else is void
        self.threshold_ = threshold_at_tpr(scores[valid], labels[valid] == 1, self.tpr)
        return self

    def predict(self, X):
        check_is_fitted(self, "threshold_")
        if isinstance(X, Prediction):
            return oss_inference(X, self.threshold_)
        return [oss_inference(p, self.threshold_) for p in X]
