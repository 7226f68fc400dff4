"""Small dense kernels shared by the rest of the package.

Everything works on float64 numpy arrays. ``NEG_INF`` marks attention
positions that must receive no weight.
"""
import numpy as np

NEG_INF = -np.inf


def softmax_rows(t):
    """Row-wise softmax of a rank-2 array.

    Rows made entirely of ``NEG_INF`` map to all-zero rows instead of NaN.
    """
    t = np.asarray(t, dtype=np.float64)
    if t.ndim != 2:
        raise ValueError(f"softmax_rows expects a rank-2 array, got shape {t.shape}")
    out = np.zeros_like(t)
    if t.shape[1] == 0:
        return out
    row_max = t.max(axis=1, keepdims=True)
    live = np.isfinite(row_max[:, 0])
    if live.any():
        shifted = t[live] - row_max[live]
        e = np.exp(shifted)
        out[live] = e / e.sum(axis=1, keepdims=True)
    return out


def softmax(t, axis=-1):
    """Softmax along ``axis`` with the same all-masked guard as :func:`softmax_rows`."""
    t = np.asarray(t, dtype=np.float64)
    moved = np.moveaxis(t, axis, -1)
    flat = moved.reshape(-1, moved.shape[-1])
    out = softmax_rows(flat).reshape(moved.shape)
    return np.moveaxis(out, -1, axis)


def sigmoid_map(t):
    """Elementwise logistic function, stable for large magnitudes."""
    t = np.asarray(t, dtype=np.float64)
    out = np.empty_like(t)
    pos = t >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-t[pos]))
    e = np.exp(t[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def log_sigmoid(t):
    """``log(sigmoid(t))`` without overflow."""
    t = np.asarray(t, dtype=np.float64)
    return -np.logaddexp(0.0, -t)


def shannon_entropy(p):
    """Entropy in nats with ``0 * log 0 = 0``.

    Vectors that do not sum to one within 1e-9 are renormalized.
    """
    p = np.asarray(p, dtype=np.float64).ravel()
    if (p < 0).any():
        raise ValueError("probability vector has negative entries")
    total = p.sum()
    if total <= 0:
        raise ValueError("probability vector has zero mass")
    if abs(total - 1.0) > 1e-9:
        p = p / total
    nz = p[p > 0]
    return float(-(nz * np.log(nz)).sum())
