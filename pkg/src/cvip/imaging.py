"""Small resampling helpers shared by the flow solver and the clip loaders."""
import numpy as np

GRAY_WEIGHTS = np.array([0.299, 0.587, 0.114])


def to_gray(rgb: np.ndarray) -> np.ndarray:
    """uint8 (..., H, W, 3) -> float64 (..., H, W) in [0, 1]."""
    return (rgb.astype(np.float64) @ GRAY_WEIGHTS) / 255.0


def _axis_coords(n_in, n_out):
    src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0, n_in - 1)
    lo = np.floor(src).astype(np.int64)
    hi = np.minimum(lo + 1, n_in - 1)
    return lo, hi, (src - lo)


def resize_bilinear(arr: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Resize the last two axes with half-pixel-centred bilinear sampling."""
    h, w = arr.shape[-2:]
    if (h, w) == (out_h, out_w):
        return arr.copy()
    lo, hi, f = _axis_coords(h, out_h)
    f = f[:, None].astype(arr.dtype) if arr.dtype.kind == "f" else f[:, None]
    rows = arr[..., lo, :] * (1 - f) + arr[..., hi, :] * f
    lo, hi, f = _axis_coords(w, out_w)
    f = f.astype(rows.dtype)
    return rows[..., lo] * (1 - f) + rows[..., hi] * f


def resize_nearest(arr: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    h, w = arr.shape[-2:]
    if (h, w) == (out_h, out_w):
        return arr.copy()
    ys = np.minimum(((np.arange(out_h) + 0.5) * h / out_h).astype(np.int64), h - 1)
    xs = np.minimum(((np.arange(out_w) + 0.5) * w / out_w).astype(np.int64), w - 1)
    return arr[..., ys, :][..., xs]
