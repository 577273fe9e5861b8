"""Central finite differences, used as an independent oracle for ``backward``."""
import numpy as np

from .autodiff import Tensor


def finite_diff_gradient(f, x, h=1e-3):
    """Estimate d f / d x elementwise with central differences.

    ``f`` maps a Tensor to a scalar (Tensor or float). ``x`` is evaluated in
    float64 so the oracle does not inherit float32 rounding.
    """
    if h <= 0:
        raise ValueError("step h must be positive")
    base = np.array(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    flat = base.reshape(-1)
    out = np.zeros_like(flat)

    def value(arr):
        y = f(Tensor(arr))
        return np.asarray(y.data if isinstance(y, Tensor) else y, dtype=np.float64).item()

    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = value(base)
        flat[i] = orig - h
        fm = value(base)
        flat[i] = orig
        out[i] = (fp - fm) / (2 * h)
    return out.reshape(base.shape)


def max_relative_error(a, b, floor=1e-6):
    """Elementwise |a-b| / max(|a|, |b|, floor), maximised."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return float((np.abs(a - b) / denom).max()) if a.size else 0.0
