"""Inference-time scoring for mask-classification outputs.

All maps are built from the marginal ``softmax(C)^T . sigmoid(M)``: a (Z, H, W)
stack whose entries lie in [0, N] because every query contributes up to one
unit of mass.
"""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .numerics import sigmoid_map, softmax_rows
from .structures import Prediction, Taxonomy
from .validation import check_prediction, check_same_shape


def class_probabilities(p: Prediction) -> np.ndarray:
    """Softmax over the Z real classes; the no-object column never enters it."""
    return softmax_rows(p.class_logits_known())


def marginal_class_scores(p) -> np.ndarray:
    """``softmax(C)^T . sigmoid(M)`` reshaped to (Z, H, W)."""
    p = check_prediction(p)
    n, h, w = p.mask_logits.shape
    probs = class_probabilities(p)
    masks = sigmoid_map(p.mask_logits).reshape(n, h * w)
    return (probs.T @ masks).reshape(-1, h, w)


def segment_map(p):
    """Per-pixel argmax label and its marginal score ``g``.

    ``np.argmax`` returns the first maximum, so ties go to the lowest class id.
    """
    scores = marginal_class_scores(p)
    labels = np.argmax(scores, axis=0)
    g = np.take_along_axis(scores, labels[None], axis=0)[0]
    return labels, g


def pixel_msp(S, atol=1e-6):
    """``1 - max_z S`` for per-pixel class probabilities ``S`` of shape (Z, H, W)."""
    S = np.asarray(S, dtype=np.float64)
    if S.ndim < 2:
        raise ValueError(f"S must have a leading class axis, got shape {S.shape}")
    if (S < -atol).any() or not np.allclose(S.sum(axis=0), 1.0, atol=atol):
        raise ValueError("per-pixel class scores must be probabilities summing to 1")
    return 1.0 - S.max(axis=0)


def mask_anomaly_score(p) -> np.ndarray:
    """``1 - max_z softmax(C)^T . sigmoid(M)``, unclipped; range [1 - N, 1]."""
    return 1.0 - marginal_class_scores(p).max(axis=0)


def _top_classes(p, taxonomy):
    probs = class_probabilities(p)
    taxonomy.check_covers(p.num_classes)
    return probs.argmax(axis=1), probs.max(axis=1)


def refinement_mask(p, taxonomy: Taxonomy, conf=0.95, mask_threshold=0.5, formula_literal=False):
    """Binary map that zeroes the segments of confident stuff masks (road excepted).

    Default: a pixel is 0 iff some query with sigmoid(M) > mask_threshold there
    has its top class in stuff minus road with probability > conf.

    ``formula_literal`` instead returns ``min(1, Cbar . Mbar)`` where ``Cbar``
    keeps queries whose top class is a thing or road with probability > conf.
    """
    p = check_prediction(p)
    top, top_prob = _top_classes(p, taxonomy)
    covered = sigmoid_map(p.mask_logits) > mask_threshold
    confident = top_prob > conf
    if formula_literal:
        keep = np.array(
            [c in taxonomy.things or c == taxonomy.road for c in top], dtype=bool
        ) & confident
        count = np.tensordot(keep.astype(np.float64), covered.astype(np.float64), axes=1)
        return np.minimum(1.0, count)
    unwanted = np.array(
        [c in taxonomy.stuff and c != taxonomy.road for c in top], dtype=bool
    ) & confident
    if not unwanted.any():
        return np.ones(p.hw)
    return np.where(covered[unwanted].any(axis=0), 0.0, 1.0)


def refine_scores(f, r):
    """Hadamard product of an anomaly map with a refinement mask."""
    f = np.asarray(f, dtype=np.float64)
    r = np.asarray(r, dtype=np.float64)
    check_same_shape(f, r, names=("scores", "refinement mask"))
    return f * r


class MaskAnomalyScorer(TransformerMixin, BaseEstimator):
    """Transform predictions into (optionally refined) anomaly score maps.

    ``fit`` only validates the taxonomy; there is nothing to learn.
    ``transform`` accepts a single Prediction or a list and returns a list of
    (H, W) maps (a single map for a single input).
    """

    def __init__(self, refine=False, taxonomy=None, conf=0.95, mask_threshold=0.5,
                 formula_literal=False):
        self.refine = refine
        self.taxonomy = taxonomy
        self.conf = conf
        self.mask_threshold = mask_threshold
        self.formula_literal = formula_literal

    def fit(self, X=None, y=None):
        if self.refine and self.taxonomy is None:
            raise ValueError("refine=True needs a taxonomy")
        self.taxonomy_ = (
            Taxonomy.from_dict(self.taxonomy) if isinstance(self.taxonomy, dict) else self.taxonomy
        )
        return self

    def _score_one(self, p):
        f = mask_anomaly_score(p)
        if not self.refine:
            return f
        r = refinement_mask(p, self.taxonomy_, self.conf, self.mask_threshold, self.formula_literal)
        return refine_scores(f, r)

    def transform(self, X):
        check_is_fitted(self, "taxonomy_")
        if isinstance(X, Prediction):
            return self._score_one(X)
        return [self._score_one(p) for p in X]
