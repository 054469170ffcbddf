"""2D -> 3D kernel inflation."""
import numpy as np

from ..errors import InputError

MODES = ("mean", "center")


def inflate_2d_to_3d(w2d: np.ndarray, kt: int, mode: str = "mean") -> np.ndarray:
    """(O, C, kh, kw) -> (O, C, kt, kh, kw).

    mean: every temporal slice is w2d / kt, so a temporally constant input sees w2d.
    center: the middle slice is w2d, the others are zero.
    Biases carry over unchanged and are not handled here.
    """
    w2d = np.asarray(w2d)
    if w2d.ndim != 4:
        raise InputError(f"expected a 4-d kernel, got shape {w2d.shape}")
    if int(kt) != kt or kt < 1:
        raise InputError(f"kt must be a positive integer, got {kt}")
    if mode not in MODES:
        raise InputError(f"unknown inflation mode {mode}")
    kt = int(kt)
    if mode == "mean":
        return np.repeat((w2d / kt)[:, :, None], kt, axis=2).astype(w2d.dtype)
    out = np.zeros(w2d.shape[:2] + (kt,) + w2d.shape[2:], dtype=w2d.dtype)
    out[:, :, kt // 2] = w2d
    return out
