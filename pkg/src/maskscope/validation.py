"""Input validation helpers in the spirit of ``sklearn.utils.validation``."""
import numpy as np

from .structures import Prediction


def check_prediction(p, no_object=None):
    """Coerce ``p`` into a :class:`Prediction`.

    Accepts a Prediction or a ``(class_logits, mask_logits)`` pair.
    """
    if isinstance(p, Prediction):
        if not (np.isfinite(p.class_logits).all() and not np.isnan(p.mask_logits).any()):
            raise ValueError("prediction contains non-finite class logits or NaN mask logits")
        return p
    try:
        c, m = p
    except (TypeError, ValueError):
        raise TypeError("expected a Prediction or a (class_logits, mask_logits) pair") from None
    return check_prediction(Prediction(c, m, no_object=bool(no_object)))


def check_binary_map(a, name="map", ndim=None):
    """Return ``a`` as a boolean array, rejecting anything that is not 0/1."""
    arr = np.asarray(a)
    if ndim is not None and arr.ndim != ndim:
        raise ValueError(f"{name} must be {ndim}-d, got shape {arr.shape}")
    if arr.dtype == bool:
        return arr
    if not np.isin(arr, (0, 1)).all():
        raise ValueError(f"{name} must be binary (0/1)")
    return arr.astype(bool)


def check_same_shape(*arrays, names=None):
    shapes = [np.shape(a) for a in arrays]
    if len(set(shapes)) > 1:
        label = ", ".join(names) if names else "inputs"
        raise ValueError(f"shape mismatch between {label}: {shapes}")


def check_rank(a, ndim, name="array"):
    arr = np.asarray(a, dtype=np.float64)
    if arr.ndim != ndim:
        raise ValueError(f"{name} must be {ndim}-d, got shape {arr.shape}")
    return arr
