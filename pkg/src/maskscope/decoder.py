"""Desk-scale mask-transformer decoder with a hand-written backward pass.

Each layer derives the previous mask from the current queries
(``M = X F^T``), thresholds its sigmoid into attention masks, and applies a
global masked attention update. The class head is a linear map onto Z + 1
logits (the last one is "no object"); the mask head is a plain dot product
with the pixel features.
"""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .attention import (
    AttentionWeights,
    attention_backward,
    attention_forward,
    build_attention_masks,
)
from .losses import ood_total_loss, training_loss
from .numerics import sigmoid_map
from .scoring import mask_anomaly_score
from .structures import Prediction


class ToyDecoder:
    """Parameters of an L-layer, N-query decoder with feature width ``dim``."""

    def __init__(self, num_layers, num_queries, dim, num_classes, seed=0, mode="GMA",
                 query_scale=0.02, weight_scale=None):
        if num_layers < 1 or num_queries < 1:
            raise ValueError("need at least one layer and one query")
        rng = np.random.default_rng(seed)
        self.mode = mode
        self.num_classes = num_classes
        self.X0 = rng.normal(0.0, query_scale, (num_queries, dim))
        self.layers = [AttentionWeights.random(dim, rng, weight_scale) for _ in range(num_layers)]
        self.W_c = rng.normal(0.0, 1.0 / np.sqrt(dim), (dim, num_classes + 1))

    @property
    def dim(self):
        return self.X0.shape[1]

    @property
    def num_queries(self):
        return self.X0.shape[0]

    def parameters(self):
        """Name -> array, in a fixed order. Arrays are live references."""
        params = {"X0": self.X0, "W_c": self.W_c}
        for l, w in enumerate(self.layers):
            params[f"layer{l}.W_q"] = w.W_q
            params[f"layer{l}.W_k"] = w.W_k
            params[f"layer{l}.W_v"] = w.W_v
        return params

    def copy(self):
        new = object.__new__(ToyDecoder)
        new.mode = self.mode
        new.num_classes = self.num_classes
        new.X0 = self.X0.copy()
        new.W_c = self.W_c.copy()
        new.layers = [w.copy() for w in self.layers]
        return new


def decoder_forward(d: ToyDecoder, pixel_features, hw, return_cache=False):
    """Run the decoder on (P, dim) pixel features for an image of shape ``hw``."""
    F = np.asarray(pixel_features, dtype=np.float64)
    h, w = hw
    if F.ndim != 2 or F.shape != (h * w, d.dim):
        raise ValueError(f"pixel features must be ({h * w}, {d.dim}), got {F.shape}")
    X = d.X0
    caches = []
    for weights in d.layers:
        masks = build_attention_masks(sigmoid_map(X @ F.T))
        X, cache = attention_forward(weights, X, F, masks, d.mode)
        caches.append(cache)
    C = X @ d.W_c
    M = (X @ F.T).reshape(-1, h, w)
    pred = Prediction(C, M, no_object=True)
    if return_cache:
        return pred, (F, X, caches)
    return pred


def decoder_backward(d: ToyDecoder, cache, grad_class_logits, grad_mask_logits):
    """Parameter gradients given gradients on the output logits."""
    F, X_last, caches = cache
    dC = np.asarray(grad_class_logits)
    dM = np.asarray(grad_mask_logits).reshape(X_last.shape[0], -1)
    grads = {"W_c": X_last.T @ dC}
    dX = dC @ d.W_c.T + dM @ F
    for l in reversed(range(len(d.layers))):
        g = attention_backward(caches[l], dX)
        grads[f"layer{l}.W_q"] = g["W_q"]
        grads[f"layer{l}.W_k"] = g["W_k"]
        grads[f"layer{l}.W_v"] = g["W_v"]
        dX = g["X_in"]
    grads["X0"] = dX
    return grads


def sample_loss(d, sample, weights=None, margin=0.75, contrastive_mode="literal",
                outlier_loss="contrastive", match=None):
    """Loss and parameter gradients for one sample dict.

    A sample carries ``features`` (P, dim), ``hw``, ``gt_masks``, ``gt_classes``
    and optionally ``ood_mask``; with an outlier mask the outlier-stage
    objective is used.
    """
    pred, cache = decoder_forward(d, sample["features"], sample["hw"], return_cache=True)
    if sample.get("ood_mask") is not None:
        res = ood_total_loss(pred, sample["gt_masks"], sample["gt_classes"], sample["ood_mask"],
                             margin, weights, contrastive_mode, outlier_loss, match=match)
    else:
        res = training_loss(pred, sample["gt_masks"], sample["gt_classes"], weights, match=match)
    grads = decoder_backward(d, cache, res.grad_class_logits, res.grad_mask_logits)
    return res, grads


def train_toy(d: ToyDecoder, dataset, steps, lr, weights=None, margin=0.75,
              contrastive_mode="literal", outlier_loss="contrastive"):
    """Full-batch gradient descent. Returns the per-step total loss (before each update).

    Gradients are summed over the dataset in index order.
    """
    if lr < 0:
        raise ValueError("learning rate must be non-negative")
    trace = []
    params = d.parameters()
    for _ in range(steps):
        total = 0.0
        acc = {k: np.zeros_like(v) for k, v in params.items()}
        for sample in dataset:
            res, grads = sample_loss(d, sample, weights, margin, contrastive_mode, outlier_loss)
            total += res.total
            for k, g in grads.items():
                acc[k] += g
        trace.append(total)
        for k, p in params.items():
            p -= lr * acc[k]
    return trace


def blob_dataset(seed=0, num_samples=4, size=16, dim=8, noise=0.1, outlier=False, layout_seed=None):
    """Synthetic two-class scenes: a background class and one disk-shaped blob.

    Pixel features are a per-class embedding plus Gaussian noise. With
    ``outlier`` set, each scene also gets a square patch whose features come
    from an unseen embedding; it belongs to no ground-truth mask and is
    marked in ``ood_mask``.

    ``seed`` fixes the class embeddings; ``layout_seed`` (default: ``seed``)
    fixes blob placement and noise, so held-out scenes share the embeddings.
    """
    embed = np.random.default_rng(seed).normal(0.0, 1.0, (3, dim))
    rng = np.random.default_rng([seed, seed if layout_seed is None else layout_seed])
    yy, xx = np.mgrid[:size, :size]
    samples = []
    for _ in range(num_samples):
        cy, cx = rng.integers(size // 4, size - size // 4, 2)
        r = rng.uniform(size / 6, size / 4)
        blob = (yy - cy) ** 2 + (xx - cx) ** 2 <= r * r
        labels = blob.astype(np.int64)
        ood = np.zeros((size, size), dtype=bool)
        if outlier:
            side = size // 4
            oy, ox = rng.integers(0, size - side, 2)
            ood[oy:oy + side, ox:ox + side] = True
            labels[ood] = 2
        feats = embed[labels.ravel()] + rng.normal(0.0, noise, (size * size, dim))
        gt_masks = np.stack([(labels == 0), (labels == 1)]).astype(np.int64)
        sample = {
            "features": feats,
            "hw": (size, size),
            "gt_masks": gt_masks,
            "gt_classes": [0, 1],
            "labels": labels,
        }
        if outlier:
            sample["ood_mask"] = ood.astype(np.int64)
        samples.append(sample)
    return samples


def outlier_gap(d, dataset):
    """Mean anomaly score on outlier pixels minus mean on inlier pixels."""
    out_scores, in_scores = [], []
    for s in dataset:
        f = mask_anomaly_score(decoder_forward(d, s["features"], s["hw"]))
        ood = np.asarray(s["ood_mask"], dtype=bool)
        out_scores.append(f[ood])
        in_scores.append(f[~ood])
    return float(np.concatenate(out_scores).mean() - np.concatenate(in_scores).mean())


class MaskDecoderEstimator(BaseEstimator):
    """Estimator wrapper around :class:`ToyDecoder`.

    ``fit`` trains on a list of sample dicts (see :func:`blob_dataset`);
    ``predict`` returns one :class:`Prediction` per sample.
    """

    def __init__(self, num_layers=2, num_queries=4, dim=8, num_classes=2, steps=300, lr=0.05,
                 mode="GMA", margin=0.75, contrastive_mode="literal", seed=0):
        self.num_layers = num_layers
        self.num_queries = num_queries
        self.dim = dim
        self.num_classes = num_classes
        self.steps = steps
        self.lr = lr
        self.mode = mode
        self.margin = margin
        self.contrastive_mode = contrastive_mode
        self.seed = seed

    def fit(self, X, y=None):
        if self.lr < 0:
            raise ValueError("learning rate must be non-negative")
        if not hasattr(self, "decoder_"):
            self.decoder_ = ToyDecoder(self.num_layers, self.num_queries, self.dim,
                                       self.num_classes, self.seed, self.mode)
        self.loss_trace_ = train_toy(self.decoder_, X, self.steps, self.lr,
                                     margin=self.margin, contrastive_mode=self.contrastive_mode)
        return self

    def predict(self, X):
        check_is_fitted(self, "decoder_")
        return [decoder_forward(self.decoder_, s["features"], s["hw"]) for s in X]

    def score_anomaly(self, X):
        return [mask_anomaly_score(p) for p in self.predict(X)]
