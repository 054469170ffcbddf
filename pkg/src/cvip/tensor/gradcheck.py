"""Central finite-difference gradient checks (run under float64)."""
from typing import Callable, Sequence

import numpy as np

from .engine import Tensor, precision


def max_relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6) -> float:
    """max |a - n| / max(|a|, |n|, floor) over all entries."""
    scale = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return float((np.abs(analytic - numeric) / scale).max()) if analytic.size else 0.0


def check_gradients(fn: Callable[..., Tensor], inputs: Sequence[np.ndarray], eps: float = 1e-4,
                    floor: float = 1e-6) -> float:
    """Compare backward() of scalar ``fn(*tensors)`` with central differences.

    Entries whose numeric and analytic derivatives are both below ``floor`` in
    magnitude count as absolute rather than relative error. Returns the worst
    relative error across all inputs.
    """
    with precision(np.float64):
        arrays = [np.array(a, dtype=np.float64) for a in inputs]
        tensors = [Tensor(a, requires_grad=True) for a in arrays]
        out = fn(*tensors)
        out.backward()
        worst = 0.0
        for t, a in zip(tensors, arrays):
            analytic = t.grad if t.grad is not None else np.zeros_like(a)
            numeric = np.zeros_like(a)
            flat = a.reshape(-1)
            for i in range(flat.size):
                old = flat[i]
                flat[i] = old + eps
                hi = fn(*[Tensor(b) for b in arrays]).item()
                flat[i] = old - eps
                lo = fn(*[Tensor(b) for b in arrays]).item()
                flat[i] = old
                numeric.reshape(-1)[i] = (hi - lo) / (2 * eps)
            worst = max(worst, max_relative_error(analytic, numeric, floor))
        return worst
