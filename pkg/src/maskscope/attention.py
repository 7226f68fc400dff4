"""Cross, masked and global masked attention with hand-written backward passes.

A single-head layer maps query features ``X_in`` (N, C) and pixel features
``F`` (P, C) to updated query features::

    CA : softmax(Q K^T) V + X_in
    MA : softmax(M_fg + Q K^T) V + X_in
    GMA: softmax(M_fg + Q K^T) V + softmax(M_bg + Q K^T) V + X_in

with ``Q = X_in W_q``, ``K = F W_k``, ``V = F W_v``. The foreground mask is 0
where the previous mask probability is >= threshold and ``NEG_INF`` elsewhere;
the background mask is its complement. One set of projections feeds both
softmax terms.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .numerics import NEG_INF, sigmoid_map, softmax_rows

MODES = ("CA", "MA", "GMA")


@dataclass
class AttentionMaskPair:
    """Additive masks (0 or NEG_INF). Set ``complementary=False`` to allow
    arbitrary pairs, e.g. an all-closed background that disables the second term."""

    foreground: np.ndarray
    background: np.ndarray
    complementary: bool = True

    def __post_init__(self):
        if self.foreground.shape != self.background.shape:
            raise ValueError("foreground and background masks differ in shape")
        fg_open = self.foreground == 0
        bg_open = self.background == 0
        if self.complementary and not np.array_equal(fg_open, ~bg_open):
            raise ValueError("foreground and background masks must be exact complements")


@dataclass
class AttentionWeights:
    W_q: np.ndarray
    W_k: np.ndarray
    W_v: np.ndarray

    def __post_init__(self):
        self.W_q = np.asarray(self.W_q, dtype=np.float64)
        self.W_k = np.asarray(self.W_k, dtype=np.float64)
        self.W_v = np.asarray(self.W_v, dtype=np.float64)
        c = self.W_q.shape[0]
        for name in ("W_q", "W_k", "W_v"):
            if getattr(self, name).shape != (c, c):
                raise ValueError(f"{name} must be square {c}x{c}, got {getattr(self, name).shape}")

    @property
    def dim(self) -> int:
        return self.W_q.shape[0]

    @classmethod
    def random(cls, dim, rng, scale=None):
        scale = 1.0 / np.sqrt(dim) if scale is None else scale
        return cls(*(rng.normal(0.0, scale, (dim, dim)) for _ in range(3)))

    def copy(self):
        return AttentionWeights(self.W_q.copy(), self.W_k.copy(), self.W_v.copy())


@dataclass
class AttentionCache:
    """Intermediates saved by :func:`attention_forward` for the backward pass."""

    X_in: np.ndarray
    F: np.ndarray
    Q: np.ndarray
    K: np.ndarray
    V: np.ndarray
    A_fg: np.ndarray | None
    A_bg: np.ndarray | None
    mode: str
    scale: float
    weights: AttentionWeights = field(repr=False, default=None)


@dataclass
class GradReport:
    max_rel_error: dict
    epsilon: float

    @property
    def worst(self) -> float:
        return max(self.max_rel_error.values())


def build_attention_masks(M_prev, threshold=0.5, logits=False):
    """Foreground/background additive masks from the previous layer's masks.

    ``M_prev`` holds probabilities unless ``logits`` is true, in which case a
    sigmoid is applied first. Values equal to the threshold count as foreground.
    """
    probs = np.asarray(M_prev, dtype=np.float64)
    if logits:
        probs = sigmoid_map(probs)
    fg_open = probs >= threshold
    fg = np.where(fg_open, 0.0, NEG_INF)
    bg = np.where(fg_open, NEG_INF, 0.0)
    return AttentionMaskPair(fg, bg)


def attend(Q, K, V, X_in, masks=None, mode="GMA", scale=1.0):
    """Attention on explicit Q, K, V. Returns ``(out, A_fg, A_bg)``.

    ``A_fg`` is the plain attention map in CA mode; ``A_bg`` is None unless
    mode is GMA.
    """
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}, got {mode!r}")
    Q, K, V, X_in = (np.asarray(a, dtype=np.float64) for a in (Q, K, V, X_in))
    if Q.shape[1] != K.shape[1] or K.shape[0] != V.shape[0] or X_in.shape != (Q.shape[0], V.shape[1]):
        raise ValueError(
            f"inconsistent shapes Q{Q.shape} K{K.shape} V{V.shape} X_in{X_in.shape}"
        )
    logits = scale * (Q @ K.T)
    if mode != "CA":
        if masks is None:
            raise ValueError(f"mode {mode} needs attention masks")
        if masks.foreground.shape != logits.shape:
            raise ValueError(f"mask shape {masks.foreground.shape} != logits shape {logits.shape}")
    if mode == "CA":
        A_fg = softmax_rows(logits)
    else:
        A_fg = softmax_rows(masks.foreground + logits)
    out = A_fg @ V + X_in
    A_bg = None
    if mode == "GMA":
        A_bg = softmax_rows(masks.background + logits)
        out = out + A_bg @ V
    return out, A_fg, A_bg


def attention_forward(weights, X_in, pixel_features, masks=None, mode="GMA", scaled=False):
    """Run one attention layer. Returns ``(X_out, cache)``."""
    X_in = np.asarray(X_in, dtype=np.float64)
    F = np.asarray(pixel_features, dtype=np.float64)
    if X_in.ndim != 2 or F.ndim != 2 or X_in.shape[1] != weights.dim or F.shape[1] != weights.dim:
        raise ValueError(
            f"feature widths disagree: X_in{X_in.shape}, pixels{F.shape}, weights dim {weights.dim}"
        )
    scale = 1.0 / np.sqrt(weights.dim) if scaled else 1.0
    Q = X_in @ weights.W_q
    K = F @ weights.W_k
    V = F @ weights.W_v
    out, A_fg, A_bg = attend(Q, K, V, X_in, masks, mode, scale)
    return out, AttentionCache(X_in, F, Q, K, V, A_fg, A_bg, mode, scale, weights)


def _softmax_backward(A, dA):
    # rows that were fully masked have A == 0 and get zero gradient
    return A * (dA - (dA * A).sum(axis=1, keepdims=True))


def attention_backward(cache, upstream_grad):
    """Gradients of ``sum(upstream_grad * X_out)``.

    Returns a dict with keys ``W_q, W_k, W_v, X_in, pixel_features``.
    """
    if cache is None:
        raise ValueError("attention_backward needs the cache produced by attention_forward")
    G = np.asarray(upstream_grad, dtype=np.float64)
    if G.shape != cache.X_in.shape:
        raise ValueError(f"upstream gradient shape {G.shape} != output shape {cache.X_in.shape}")
    w = cache.weights
    A_sum = cache.A_fg if cache.A_bg is None else cache.A_fg + cache.A_bg
    dV = A_sum.T @ G
    dA = G @ cache.V.T
    dS = _softmax_backward(cache.A_fg, dA)
    if cache.A_bg is not None:
        dS = dS + _softmax_backward(cache.A_bg, dA)
    dS = cache.scale * dS
    dQ = dS @ cache.K
    dK = dS.T @ cache.Q
    return {
        "W_q": cache.X_in.T @ dQ,
        "W_k": cache.F.T @ dK,
        "W_v": cache.F.T @ dV,
        "X_in": G + dQ @ w.W_q.T,
        "pixel_features": dK @ w.W_k.T + dV @ w.W_v.T,
    }


def relative_error(analytic, numeric):
    """Elementwise ``|a - n| / max(|a|, |n|, 1e-8)``."""
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    return np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), 1e-8)


def numeric_gradient(f, x, epsilon):
    """Central differences of scalar ``f()`` with respect to array ``x`` (perturbed in place)."""
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        orig = x[idx]
        x[idx] = orig + epsilon
        hi = f()
        x[idx] = orig - epsilon
        lo = f()
        x[idx] = orig
        g[idx] = (hi - lo) / (2.0 * epsilon)
    return g


def random_instance(seed, n_queries=3, n_pixels=4, dim=2):
    """Seeded random attention problem used by :func:`grad_check`."""
    rng = np.random.default_rng(seed)
    weights = AttentionWeights.random(dim, rng, scale=1.0)
    X_in = rng.normal(size=(n_queries, dim))
    F = rng.normal(size=(n_pixels, dim))
    # keep probabilities away from the threshold so both masks are non-trivial
    probs = rng.uniform(size=(n_queries, n_pixels))
    masks = build_attention_masks(probs)
    G = rng.normal(size=(n_queries, dim))
    return weights, X_in, F, masks, G


def grad_check(seed=0, epsilon=1e-5, mode="GMA", zero_upstream=False, **shape):
    """Compare :func:`attention_backward` against central differences."""
    if not 1e-7 <= epsilon <= 1e-3:
        raise ValueError("epsilon must lie in [1e-7, 1e-3]")
    weights, X_in, F, masks, G = random_instance(seed, **shape)
    if zero_upstream:
        G = np.zeros_like(G)
    _, cache = attention_forward(weights, X_in, F, masks, mode)
    analytic = attention_backward(cache, G)

    def objective():
        out, _ = attention_forward(weights, X_in, F, masks, mode)
        return float((out * G).sum())

    targets = {
        "W_q": weights.W_q,
        "W_k": weights.W_k,
        "W_v": weights.W_v,
        "X_in": X_in,
        "pixel_features": F,
    }
    errors = {}
    for name, arr in targets.items():
        numeric = numeric_gradient(objective, arr, epsilon)
        errors[name] = float(relative_error(analytic[name], numeric).max())
    return GradReport(errors, epsilon)
