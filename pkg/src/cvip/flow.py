"""Coarse-to-fine TV-L1 optical flow (primal-dual, duality-based thresholding).

Energy minimised at every pyramid level::

    E(u) = sum |I1(x + u(x)) - I0(x)| + smoothness * (TV(u_x) + TV(u_y))

with grayscale intensities scaled to [0, 1]. The returned flow satisfies
``cur(x + flow) ~= prev(x)``, the opposite sign of the codec's motion vectors.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Sequence, Union

import numpy as np
from scipy import ndimage

from .codec import Frame
from .errors import DecodeError, InputError, SolverError
from .imaging import resize_bilinear, to_gray

FLO_MAGIC = b"FLO1"
_MIN_LEVEL_SIZE = 4
_BACKTRACK_STEPS = 6


@dataclass(frozen=True)
class FlowParams:
    smoothness_weight: float = 0.15
    outer_warps: int = 10
    inner_iterations: int = 30
    pyramid_levels: int = 5
    pyramid_scale: float = 0.5
    time_step: float = 0.25
    tightness: float = 0.3
    median_filter: bool = True
    # reject a warp whose energy rises beyond this relative tolerance
    monotone_tolerance: Optional[float] = 1e-6

    def __post_init__(self):
        for name in ("smoothness_weight", "time_step", "tightness"):
            if not getattr(self, name) > 0:
                raise InputError(f"{name} must be positive")
        for name in ("outer_warps", "inner_iterations", "pyramid_levels"):
            if getattr(self, name) < 1:
                raise InputError(f"{name} must be >= 1")
        if not 0 < self.pyramid_scale < 1:
            raise InputError("pyramid_scale must lie strictly between 0 and 1")


FAST_PARAMS = FlowParams(outer_warps=5, inner_iterations=20, pyramid_levels=3)


@dataclass(frozen=True)
class FlowField:
    """Pixel displacement (u, v), ``data`` shaped (2, height, width) float32."""

    data: np.ndarray

    def __post_init__(self):
        d = np.asarray(self.data, dtype=np.float32)
        if d.ndim != 3 or d.shape[0] != 2:
            raise InputError(f"flow data must be (2, H, W), got {d.shape}")
        if not np.isfinite(d).all():
            raise InputError("flow contains non-finite values")
        object.__setattr__(self, "data", d)

    @property
    def width(self) -> int:
        return self.data.shape[2]

    @property
    def height(self) -> int:
        return self.data.shape[1]


# --- discrete operators ------------------------------------------------------

def _forward_grad(u):
    gx = np.zeros_like(u)
    gy = np.zeros_like(u)
    gx[..., :, :-1] = u[..., :, 1:] - u[..., :, :-1]
    gy[..., :-1, :] = u[..., 1:, :] - u[..., :-1, :]
    return gx, gy


def _divergence(px, py):
    """Negative adjoint of ``_forward_grad``."""
    div = np.zeros_like(px)
    div[..., :, 0] = px[..., :, 0]
    div[..., :, 1:-1] = px[..., :, 1:-1] - px[..., :, :-2]
    div[..., :, -1] = -px[..., :, -2]
    div[..., 0, :] += py[..., 0, :]
    div[..., 1:-1, :] += py[..., 1:-1, :] - py[..., :-2, :]
    div[..., -1, :] += -py[..., -2, :]
    return div


def _central_grad(img):
    gx = np.zeros_like(img)
    gy = np.zeros_like(img)
    gx[..., :, 1:-1] = 0.5 * (img[..., :, 2:] - img[..., :, :-2])
    gy[..., 1:-1, :] = 0.5 * (img[..., 2:, :] - img[..., :-2, :])
    return gx, gy


def _warp(images, u, v):
    """Bilinearly sample each image in ``images`` at (x + u, y + v), edge-clamped."""
    b, h, w = u.shape
    xs = np.clip(np.arange(w)[None, None, :] + u, 0, w - 1)
    ys = np.clip(np.arange(h)[None, :, None] + v, 0, h - 1)
    x0 = np.floor(xs).astype(np.int64)
    y0 = np.floor(ys).astype(np.int64)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx = (xs - x0).astype(u.dtype)
    fy = (ys - y0).astype(u.dtype)
    bi = np.arange(b)[:, None, None]
    out = []
    for img in images:
        top = img[bi, y0, x0] * (1 - fx) + img[bi, y0, x1] * fx
        bot = img[bi, y1, x0] * (1 - fx) + img[bi, y1, x1] * fx
        out.append(top * (1 - fy) + bot * fy)
    return out


def _tv(u):
    gx, gy = _forward_grad(u)
    return np.sqrt(gx * gx + gy * gy).sum(axis=(-2, -1))


def _energy(i0, i1, u, v, smoothness):
    (w1,) = _warp([i1], u, v)
    return np.abs(w1 - i0).sum(axis=(-2, -1)) + smoothness * (_tv(u) + _tv(v))


def _pyramid(img, params):
    levels = [img]
    sigma = 0.6 * np.sqrt(1.0 / params.pyramid_scale ** 2 - 1.0)
    for _ in range(params.pyramid_levels - 1):
        h, w = levels[-1].shape[-2:]
        nh, nw = int(round(h * params.pyramid_scale)), int(round(w * params.pyramid_scale))
        if min(nh, nw) < _MIN_LEVEL_SIZE:
            break
        smooth = ndimage.gaussian_filter(levels[-1], sigma=(0, sigma, sigma), mode="nearest")
        levels.append(resize_bilinear(smooth, nh, nw))
    return levels


def _solve_level(i0, i1, u, v, params, level_trace):
    lam = 1.0 / params.smoothness_weight
    theta = params.tightness
    tau = params.time_step
    lt = lam * theta
    i1x, i1y = _central_grad(i1)
    p = [np.zeros_like(u) for _ in range(4)]
    energy = _energy(i0, i1, u, v, params.smoothness_weight)
    active = np.ones(u.shape[0], dtype=bool)
    level_trace["energy"].append(energy.copy())
    for _ in range(params.outer_warps):
        if not active.any():
            break
        w1, gx, gy = _warp([i1, i1x, i1y], u, v)
        grad2 = gx * gx + gy * gy
        safe = grad2 > 1e-12
        inv_grad2 = np.where(safe, 1.0 / np.where(safe, grad2, 1.0), 0.0).astype(u.dtype)
        rho_c = w1 - gx * u - gy * v - i0
        un, vn = u.copy(), v.copy()
        pn = [q.copy() for q in p]
        for _ in range(params.inner_iterations):
            rho = rho_c + gx * un + gy * vn
            # thresholding: -rho / |grad|^2 saturated at +-lambda*theta
            step = np.clip(-rho * inv_grad2, -lt, lt)
            un = un + step * gx + theta * _divergence(pn[0], pn[1])
            vn = vn + step * gy + theta * _divergence(pn[2], pn[3])
            for comp, (a, b) in ((un, (0, 1)), (vn, (2, 3))):
                cx, cy = _forward_grad(comp)
                norm = 1.0 + (tau / theta) * np.sqrt(cx * cx + cy * cy)
                pn[a] = (pn[a] + (tau / theta) * cx) / norm
                pn[b] = (pn[b] + (tau / theta) * cy) / norm
        if params.median_filter:
            un = ndimage.median_filter(un, size=(1, 3, 3), mode="nearest")
            vn = ndimage.median_filter(vn, size=(1, 3, 3), mode="nearest")
        if not (np.isfinite(un).all() and np.isfinite(vn).all()):
            raise SolverError("non-finite flow during TV-L1 iterations")
        new_energy = _energy(i0, i1, un, vn, params.smoothness_weight)
        accept = active.copy()
        if params.monotone_tolerance is not None:
            limit = energy * (1 + params.monotone_tolerance)
            rose = new_energy > limit
            # backtrack: shrink the update toward the current flow until the energy stops rising
            alpha = 1.0
            for _ in range(_BACKTRACK_STEPS):
                if not (rose & active).any():
                    break
                alpha *= 0.5
                sel = rose[:, None, None]
                un = np.where(sel, u + alpha * (un - u), un).astype(u.dtype)
                vn = np.where(sel, v + alpha * (vn - v), vn).astype(v.dtype)
                trial = _energy(i0, i1, un, vn, params.smoothness_weight)
                new_energy = np.where(rose, trial, new_energy)
                rose = new_energy > limit
            level_trace["rejected"] += int((rose & active).sum())
            accept &= ~rose
            active &= ~rose
        sel = accept[:, None, None]
        u = np.where(sel, un, u)
        v = np.where(sel, vn, v)
        p = [np.where(sel, a, b) for a, b in zip(pn, p)]
        energy = np.where(accept, new_energy, energy)
        level_trace["energy"].append(energy.copy())
    return u, v


def tvl1_flow_gray(i0: np.ndarray, i1: np.ndarray, params: FlowParams = FlowParams(),
                   trace: Optional[list] = None, dtype=np.float64) -> np.ndarray:
    """Batched solver on float grayscale stacks (B, H, W); returns (B, 2, H, W).

    ``trace``, when given, receives one dict per pyramid level (coarse first)
    with the per-warp energies and the number of rejected warps.
    """
    i0 = np.asarray(i0, dtype=dtype)
    i1 = np.asarray(i1, dtype=dtype)
    if i0.shape != i1.shape:
        raise InputError(f"image shapes differ: {i0.shape} vs {i1.shape}")
    if i0.ndim == 2:
        return tvl1_flow_gray(i0[None], i1[None], params, trace, dtype)[0]
    pyr0 = _pyramid(i0, params)
    pyr1 = _pyramid(i1, params)
    u = v = None
    for lvl in range(len(pyr0) - 1, -1, -1):
        a, b = pyr0[lvl], pyr1[lvl]
        h, w = a.shape[-2:]
        if u is None:
            u = np.zeros_like(a)
            v = np.zeros_like(a)
        else:
            ph, pw = u.shape[-2:]
            u = resize_bilinear(u, h, w) * (w / pw)
            v = resize_bilinear(v, h, w) * (h / ph)
        level_trace = {"level": lvl, "shape": (h, w), "energy": [], "rejected": 0}
        u, v = _solve_level(a, b, u, v, params, level_trace)
        if trace is not None:
            level_trace["energy"] = np.stack(level_trace["energy"])
            trace.append(level_trace)
    return np.stack([u, v], axis=1)


def tvl1_flow(prev: Frame, cur: Frame, params: FlowParams = FlowParams(),
              trace: Optional[list] = None) -> FlowField:
    if (prev.width, prev.height) != (cur.width, cur.height):
        raise InputError("frames differ in size")
    out = tvl1_flow_gray(to_gray(prev.data), to_gray(cur.data), params, trace)
    return FlowField(out.astype(np.float32))


def video_flows(frames: Sequence[Frame], params: FlowParams = FAST_PARAMS) -> np.ndarray:
    """Flow for every consecutive pair, shape (len(frames) - 1, 2, H, W) float32.

    Entry ``k - 1`` holds the flow from frame ``k - 1`` to frame ``k``.
    """
    if len(frames) < 2:
        h, w = frames[0].height, frames[0].width
        return np.zeros((0, 2, h, w), np.float32)
    gray = to_gray(np.stack([f.data for f in frames]))
    return tvl1_flow_gray(gray[:-1], gray[1:], params, dtype=np.float32)


def flow_energy(prev: Frame, cur: Frame, flow: FlowField, smoothness_weight: float) -> float:
    if (prev.width, prev.height) != (cur.width, cur.height):
        raise InputError("frames differ in size")
    if (flow.width, flow.height) != (prev.width, prev.height):
        raise InputError("flow does not match frame size")
    i0 = to_gray(prev.data)[None]
    i1 = to_gray(cur.data)[None]
    f = flow.data.astype(np.float64)
    return float(_energy(i0, i1, f[0:1], f[1:2], smoothness_weight)[0])


# --- FLO1 files --------------------------------------------------------------

def write_flo(path: Union[str, Path], flow: FlowField, pair_index: int) -> None:
    with open(path, "wb") as fh:
        fh.write(FLO_MAGIC + struct.pack("<III", flow.width, flow.height, pair_index))
        fh.write(flow.data.astype("<f4").tobytes())


def read_flo(path: Union[str, Path]):
    """Returns ``(FlowField, pair_index)``."""
    raw = Path(path).read_bytes()
    if len(raw) < 16 or raw[:4] != FLO_MAGIC:
        raise DecodeError(f"{path}: not a FLO1 file")
    w, h, idx = struct.unpack("<III", raw[4:16])
    if len(raw) != 16 + 2 * w * h * 4:
        raise DecodeError(f"{path}: payload size does not match header")
    data = np.frombuffer(raw, "<f4", offset=16).reshape(2, h, w)
    return FlowField(data.copy()), idx


def write_flow_dir(directory: Union[str, Path], flows: np.ndarray) -> List[Path]:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    paths = []
    for k, f in enumerate(flows, start=1):
        p = d / f"pair_{k:06d}.flo"
        write_flo(p, FlowField(f), k)
        paths.append(p)
    return paths


def read_flow_dir(directory: Union[str, Path]) -> np.ndarray:
    files = sorted(Path(directory).glob("pair_*.flo"))
    out = []
    for expect, p in enumerate(files, start=1):
        flow, idx = read_flo(p)
        if idx != expect:
            raise DecodeError(f"{p}: pair index {idx}, expected {expect}")
        out.append(flow.data)
    if not out:
        raise DecodeError(f"{directory}: no flow files")
    return np.stack(out)
