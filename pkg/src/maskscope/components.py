"""Connected-component labeling of binary maps."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .validation import check_binary_map


@dataclass
class ComponentSet:
    """Labels are 1..count in raster-scan order of each component's first pixel; 0 is background."""

    labels: np.ndarray
    count: int

    def masks(self):
        return [self.labels == k for k in range(1, self.count + 1)]

    def areas(self):
        return np.bincount(self.labels.ravel(), minlength=self.count + 1)[1:]


def _neighbours(connectivity):
    if connectivity == 4:
        return ((-1, 0), (0, -1))
    if connectivity == 8:
        return ((-1, -1), (-1, 0), (-1, 1), (0, -1))
    raise ValueError(f"connectivity must be 4 or 8, got {connectivity}")


def _find(parent, x):
    root = x
    while parent[root] != root:
        root = parent[root]
    while parent[x] != root:
        parent[x], x = root, parent[x]
    return root


def _renumber(provisional):
    """Relabel positive ids to 1..k in raster order of first appearance."""
    flat = provisional.ravel()
    out = np.zeros_like(flat)
    mapping = {}
    for idx in np.flatnonzero(flat):
        lab = flat[idx]
        if lab not in mapping:
            mapping[lab] = len(mapping) + 1
        out[idx] = mapping[lab]
    return out.reshape(provisional.shape), len(mapping)


def _union_find(img, offsets):
    h, w = img.shape
    prov = np.zeros((h, w), dtype=np.int64)
    parent = [0]
    for r in range(h):
        for c in range(w):
            if not img[r, c]:
                continue
            roots = []
            for dr, dc in offsets:
                rr, cc = r + dr, c + dc
                if 0 <= rr < h and 0 <= cc < w and prov[rr, cc]:
                    roots.append(_find(parent, prov[rr, cc]))
            if not roots:
                parent.append(len(parent))
                prov[r, c] = len(parent) - 1
                continue
            root = min(roots)
            for other in roots:
                parent[other] = root
            prov[r, c] = root
    for r in range(h):
        for c in range(w):
            if prov[r, c]:
                prov[r, c] = _find(parent, prov[r, c])
    return prov


def _propagate(img, offsets, max_iters):
    """Alternating forward/backward min-label sweeps, stopped after ``max_iters`` sweeps."""
    h, w = img.shape
    lab = np.where(img, np.arange(1, h * w + 1).reshape(h, w), 0)
    both = offsets + tuple((-dr, -dc) for dr, dc in offsets)
    for it in range(max_iters):
        changed = False
        rows = range(h) if it % 2 == 0 else range(h - 1, -1, -1)
        cols = range(w) if it % 2 == 0 else range(w - 1, -1, -1)
        for r in rows:
            for c in cols:
                if not lab[r, c]:
                    continue
                best = lab[r, c]
                for dr, dc in both:
                    rr, cc = r + dr, c + dc
                    if 0 <= rr < h and 0 <= cc < w and 0 < lab[rr, cc] < best:
                        best = lab[rr, cc]
                if best < lab[r, c]:
                    lab[r, c] = best
                    changed = True
        if not changed:
            break
    return lab


def connected_components(binary, connectivity=8, max_iters=None):
    """Label the foreground of a binary map.

    The default is a two-pass union-find. When ``max_iters`` is given the
    labels come from iterative min-label propagation capped at that many
    raster sweeps instead; once converged it agrees with union-find, before
    convergence a region may be split into several components.
    """
    img = check_binary_map(binary, "binary map", ndim=2)
    offsets = _neighbours(connectivity)
    if max_iters is None:
        prov = _union_find(img, offsets)
    else:
        if max_iters < 1:
            raise ValueError("max_iters must be at least 1")
        prov = _propagate(img, offsets, max_iters)
    labels, count = _renumber(prov)
    return ComponentSet(labels, count)
