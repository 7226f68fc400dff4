"""Cut-paste outlier compositing for outlier-stage training."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .structures import VOID_LABEL
from .validation import check_binary_map


@dataclass
class CompositeSample:
    image: np.ndarray
    labels: np.ndarray
    ood_mask: np.ndarray
    offset: tuple
    source: dict


def anomaly_mix(image, labels, ood_image, ood_mask, offset=None, seed=0, void=VOID_LABEL):
    """Paste the pixels of ``ood_image`` under ``ood_mask`` onto ``image``.

    The object mask's top-left corner lands at ``offset`` (row, col) in the
    inlier frame; parts falling outside are clipped. Without an offset, one is
    drawn from ``seed`` such that the mask's bounding box fits when possible.
    Pasted pixels get label ``void`` and ``ood_mask`` 1.
    """
    image = np.asarray(image)
    labels = np.asarray(labels)
    ood_image = np.asarray(ood_image)
    obj = check_binary_map(ood_mask, "object mask", ndim=2)
    if image.shape[:2] != labels.shape:
        raise ValueError("inlier image and labels differ in size")
    if ood_image.shape[:2] != obj.shape:
        raise ValueError("outlier image and object mask differ in size")
    if not obj.any():
        raise ValueError("object mask is empty")
    h, w = labels.shape
    if offset is None:
        rng = np.random.default_rng(seed)
        rows, cols = np.nonzero(obj)
        r0, c0 = rows.min(), cols.min()
        bh, bw = rows.max() - r0 + 1, cols.max() - c0 + 1
        offset = (
            int(rng.integers(0, max(h - bh, 0) + 1)) - int(r0),
            int(rng.integers(0, max(w - bw, 0) + 1)) - int(c0),
        )
    dr, dc = int(offset[0]), int(offset[1])

    placed = np.zeros((h, w), dtype=bool)
    src_r = slice(max(0, -dr), min(obj.shape[0], h - dr))
    src_c = slice(max(0, -dc), min(obj.shape[1], w - dc))
    dst_r = slice(src_r.start + dr, src_r.stop + dr)
    dst_c = slice(src_c.start + dc, src_c.stop + dc)
    out_image = image.copy()
    if src_r.start < src_r.stop and src_c.start < src_c.stop:
        sub = obj[src_r, src_c]
        placed[dst_r, dst_c] = sub
        region = out_image[dst_r, dst_c]
        region[sub] = ood_image[src_r, src_c][sub]
    if not placed.any():
        raise ValueError(f"object pasted at offset {offset} falls entirely outside the frame")
    out_labels = labels.copy()
    out_labels[placed] = void
    return CompositeSample(
        out_image,
        out_labels,
        placed.astype(np.uint8),
        (dr, dc),
        {"seed": seed, "pasted_pixels": int(placed.sum())},
    )


def outlier_draws(n, outlier_prob=0.2, seed=0):
    """Bernoulli(outlier_prob) decisions for ``n`` batch slots."""
    if not 0 <= outlier_prob <= 1:
        raise ValueError("outlier_prob must lie in [0, 1]")
    return np.random.default_rng(seed).random(n) < outlier_prob


def sample_batch(inliers, outliers, batch_size, outlier_prob=0.2, seed=0):
    """Draw a batch; each slot is composited with probability ``outlier_prob``.

    ``inliers`` is a list of ``(image, labels)`` and ``outliers`` a list of
    ``(image, mask)``. Slot ``i`` draws its sources and paste offset from
    ``default_rng([seed, i])``, so slots can be generated independently.
    """
    draws = outlier_draws(batch_size, outlier_prob, seed)
    if draws.any() and not outliers:
        raise ValueError("outlier insertion requested but no outlier objects were given")
    batch = []
    for i, use_outlier in enumerate(draws):
        rng = np.random.default_rng([seed, i])
        src = int(rng.integers(len(inliers)))
        img, lab = inliers[src]
        if use_outlier:
            obj = int(rng.integers(len(outliers)))
            o_img, o_mask = outliers[obj]
            comp = anomaly_mix(img, lab, o_img, o_mask, seed=int(rng.integers(2**31)))
            comp.source.update(inlier=src, outlier=obj)
            batch.append(comp)
        else:
            lab = np.asarray(lab)
            batch.append(CompositeSample(np.asarray(img), lab, np.zeros(lab.shape, np.uint8),
                                         None, {"inlier": src}))
    return batch
