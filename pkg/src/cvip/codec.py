"""Lossless toy GOP codec producing I-frames, motion vectors and residuals.

Prediction convention: ``prediction(p) = prev(p + mv)``, references clamped to
the frame edge. A rightward-moving object therefore carries a negative ``dx``.
"""
from __future__ import annotations

import io
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import BinaryIO, List, Optional, Sequence, Tuple, Union

import numpy as np

from .errors import DecodeError, InputError

BLOCK = 16
DEFAULT_GOP = 12
DEFAULT_SEARCH_RANGE = 7

GVC_MAGIC = b"GVC1"
_FRAME_I = 0
_FRAME_P = 1


@dataclass(frozen=True)
class Frame:
    """RGB frame, ``data`` is uint8 with shape (height, width, 3)."""

    data: np.ndarray

    def __post_init__(self):
        d = np.asarray(self.data)
        if d.dtype != np.uint8:
            raise InputError(f"frame data must be uint8, got {d.dtype}")
        if d.ndim != 3 or d.shape[2] != 3 or d.shape[0] < 1 or d.shape[1] < 1:
            raise InputError(f"frame data must have shape (H, W, 3), got {d.shape}")
        object.__setattr__(self, "data", d)

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def height(self) -> int:
        return self.data.shape[0]

    def __eq__(self, other):
        return isinstance(other, Frame) and np.array_equal(self.data, other.data)

    __hash__ = None


def grid_shape(width: int, height: int) -> Tuple[int, int]:
    """Macroblock grid as (blocks_y, blocks_x)."""
    return -(-height // BLOCK), -(-width // BLOCK)


@dataclass(frozen=True)
class MotionField:
    """One (dx, dy) int16 vector per macroblock, ``vectors`` shaped (by, bx, 2)."""

    vectors: np.ndarray
    search_range: int = DEFAULT_SEARCH_RANGE

    def __post_init__(self):
        v = np.asarray(self.vectors)
        if v.ndim != 3 or v.shape[2] != 2 or v.shape[0] < 1 or v.shape[1] < 1:
            raise InputError(f"motion vectors must have shape (by, bx, 2), got {v.shape}")
        if self.search_range < 0:
            raise InputError("search_range must be >= 0")
        object.__setattr__(self, "vectors", v.astype(np.int16, copy=False))

    @property
    def blocks_y(self) -> int:
        return self.vectors.shape[0]

    @property
    def blocks_x(self) -> int:
        return self.vectors.shape[1]

    def __eq__(self, other):
        return isinstance(other, MotionField) and np.array_equal(self.vectors, other.vectors)

    __hash__ = None


@dataclass(frozen=True)
class Residual:
    """Signed int16 difference image with shape (height, width, 3)."""

    data: np.ndarray

    def __post_init__(self):
        d = np.asarray(self.data)
        if d.ndim != 3 or d.shape[2] != 3:
            raise InputError(f"residual must have shape (H, W, 3), got {d.shape}")
        object.__setattr__(self, "data", d.astype(np.int16, copy=False))

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def height(self) -> int:
        return self.data.shape[0]

    def __eq__(self, other):
        return isinstance(other, Residual) and np.array_equal(self.data, other.data)

    __hash__ = None


PFrame = Tuple[MotionField, Residual]


@dataclass
class GopVideo:
    width: int
    height: int
    gop_size: int
    frames: List[Union[Frame, PFrame]] = field(default_factory=list)
    label: Optional[int] = None

    @property
    def frame_count(self) -> int:
        return len(self.frames)

    def is_i_frame(self, k: int) -> bool:
        return k % self.gop_size == 0

    @property
    def i_indices(self) -> List[int]:
        return [k for k in range(self.frame_count) if self.is_i_frame(k)]

    @property
    def p_indices(self) -> List[int]:
        return [k for k in range(self.frame_count) if not self.is_i_frame(k)]


def _check_same_dims(a, b, what="frames"):
    if (a.width, a.height) != (b.width, b.height):
        raise InputError(
            f"{what} differ in size: {a.width}x{a.height} vs {b.width}x{b.height}"
        )


def _check_grid(mv: MotionField, width: int, height: int):
    if (mv.blocks_y, mv.blocks_x) != grid_shape(width, height):
        raise InputError(
            f"motion grid {mv.blocks_y}x{mv.blocks_x} does not match a "
            f"{width}x{height} frame"
        )


def _tie_rank(search_range: int) -> np.ndarray:
    """Rank of each (dy, dx) candidate under the tie-break order, shape (2r+1, 2r+1)."""
    d = np.arange(-search_range, search_range + 1)
    dy, dx = np.meshgrid(d, d, indexing="ij")
    order = np.lexsort((dx.ravel(), dy.ravel(), (np.abs(dx) + np.abs(dy)).ravel()))
    rank = np.empty(order.size, dtype=np.int64)
    rank[order] = np.arange(order.size)
    return rank.reshape(dy.shape)


def estimate_motion(prev: Frame, cur: Frame, search_range: int = DEFAULT_SEARCH_RANGE) -> MotionField:
    """Full-search integer block matching minimising RGB SAD per macroblock.

    Ties go to the smallest ``|dx| + |dy|``, then smallest ``dy``, then
    smallest ``dx``. Partial edge blocks are matched over their real extent.
    """
    _check_same_dims(prev, cur)
    if search_range < 0:
        raise InputError("search_range must be >= 0")
    r = search_range
    h, w = cur.height, cur.width
    n = 2 * r + 1
    ref = np.pad(prev.data.astype(np.int16), ((r, r), (r, r), (0, 0)), mode="edge")
    target = cur.data.astype(np.int16).transpose(0, 2, 1)[:, None]  # (h, 1, 3, w)
    row_starts = np.arange(0, h, BLOCK)
    col_starts = np.arange(0, w, BLOCK)
    sad = np.empty((n, n, len(row_starts), len(col_starts)), dtype=np.int64)
    for iy in range(n):
        # candidate dy = iy - r; window index along axis 1 is dx + r
        win = np.lib.stride_tricks.sliding_window_view(ref[iy: iy + h], w, axis=1)
        diff = np.abs(win - target)
        # at most 3 * 255 per pixel, so the channel sum stays inside int16
        per_px = (diff[:, :, 0] + diff[:, :, 1] + diff[:, :, 2]).astype(np.int32)
        blk = np.add.reduceat(per_px, row_starts, axis=0)
        sad[iy] = np.add.reduceat(blk, col_starts, axis=2).transpose(1, 0, 2)
    key = sad * (n * n) + _tie_rank(r)[:, :, None, None]
    flat = key.reshape(n * n, *key.shape[2:]).argmin(axis=0)
    best = np.stack([flat % n - r, flat // n - r], axis=-1).astype(np.int16)
    return MotionField(best, search_range=r)


def _dense_displacement(mv: MotionField, width: int, height: int) -> np.ndarray:
    v = mv.vectors.astype(np.int64)
    return np.repeat(np.repeat(v, BLOCK, axis=0), BLOCK, axis=1)[:height, :width]


def motion_compensate(prev: Frame, mv: MotionField) -> Frame:
    """Copy every macroblock from ``prev`` at its displaced, edge-clamped position."""
    _check_grid(mv, prev.width, prev.height)
    if mv.vectors.size and int(np.abs(mv.vectors).max()) > mv.search_range:
        raise InputError(
            f"motion vector magnitude exceeds search range {mv.search_range}"
        )
    h, w = prev.height, prev.width
    disp = _dense_displacement(mv, w, h)
    ys = np.clip(np.arange(h)[:, None] + disp[..., 1], 0, h - 1)
    xs = np.clip(np.arange(w)[None, :] + disp[..., 0], 0, w - 1)
    return Frame(prev.data[ys, xs])


def compute_residual(cur: Frame, predicted: Frame) -> Residual:
    _check_same_dims(cur, predicted)
    return Residual(cur.data.astype(np.int16) - predicted.data.astype(np.int16))


def apply_residual(predicted: Frame, residual: Residual) -> Frame:
    _check_same_dims(predicted, residual, "prediction and residual")
    total = predicted.data.astype(np.int16) + residual.data
    if total.min() < 0 or total.max() > 255:
        raise DecodeError("residual reconstructs samples outside [0, 255]")
    return Frame(total.astype(np.uint8))


def encode_gop_video(
    frames: Sequence[Frame],
    gop_size: int = DEFAULT_GOP,
    search_range: int = DEFAULT_SEARCH_RANGE,
    label: Optional[int] = None,
) -> GopVideo:
    if not frames:
        raise InputError("cannot encode an empty frame list")
    if gop_size < 1:
        raise InputError("gop_size must be >= 1")
    first = frames[0]
    for f in frames[1:]:
        _check_same_dims(first, f)
    gv = GopVideo(first.width, first.height, gop_size, label=label)
    recon: Optional[Frame] = None
    for k, cur in enumerate(frames):
        if gv.is_i_frame(k):
            gv.frames.append(cur)
            recon = cur
            continue
        mv = estimate_motion(recon, cur, search_range)
        pred = motion_compensate(recon, mv)
        res = compute_residual(cur, pred)
        gv.frames.append((mv, res))
        # lossless: the reconstruction is the input frame itself
        recon = apply_residual(pred, res)
    return gv


def decode_gop_video(gv: GopVideo) -> List[Frame]:
    out: List[Frame] = []
    for k, item in enumerate(gv.frames):
        if gv.is_i_frame(k):
            if not isinstance(item, Frame):
                raise DecodeError(f"frame {k} must be an I-frame")
            if (item.width, item.height) != (gv.width, gv.height):
                raise DecodeError(f"I-frame {k} has wrong dimensions")
            out.append(item)
            continue
        if isinstance(item, Frame):
            raise DecodeError(f"frame {k} must be a P-frame")
        mv, res = item
        if (res.width, res.height) != (gv.width, gv.height):
            raise DecodeError(f"residual {k} has wrong dimensions")
        try:
            pred = motion_compensate(out[-1], mv)
        except InputError as exc:
            raise DecodeError(f"P-frame {k}: {exc}") from exc
        out.append(apply_residual(pred, res))
    return out


def mv_to_dense(mv: MotionField, width: int, height: int) -> np.ndarray:
    """Block-filled (2, height, width) float32 plane holding (dx, dy)."""
    _check_grid(mv, width, height)
    return np.moveaxis(_dense_displacement(mv, width, height), -1, 0).astype(np.float32)


# --- GVC container -------------------------------------------------------

def write_gvc(gv: GopVideo, dest: Union[str, Path, BinaryIO]) -> None:
    if isinstance(dest, (str, Path)):
        with open(dest, "wb") as fh:
            write_gvc(gv, fh)
        return
    dest.write(GVC_MAGIC)
    dest.write(struct.pack("<IIII", gv.width, gv.height, gv.frame_count, gv.gop_size))
    if gv.label is None:
        dest.write(struct.pack("<B", 0))
    else:
        dest.write(struct.pack("<BH", 1, gv.label))
    for k, item in enumerate(gv.frames):
        if isinstance(item, Frame):
            dest.write(struct.pack("<B", _FRAME_I))
            dest.write(np.ascontiguousarray(item.data).tobytes())
        else:
            mv, res = item
            dest.write(struct.pack("<B", _FRAME_P))
            dest.write(mv.vectors.astype("<i2").tobytes())
            dest.write(res.data.astype("<i2").tobytes())


def gvc_bytes(gv: GopVideo) -> bytes:
    buf = io.BytesIO()
    write_gvc(gv, buf)
    return buf.getvalue()


def _take(buf: memoryview, pos: int, n: int, what: str):
    if pos + n > len(buf):
        raise DecodeError(f"truncated container while reading {what}")
    return buf[pos: pos + n], pos + n


def parse_gvc(data: bytes) -> GopVideo:
    buf = memoryview(data)
    magic, pos = _take(buf, 0, 4, "magic")
    if bytes(magic) != GVC_MAGIC:
        raise DecodeError("bad magic, not a GVC1 container")
    hdr, pos = _take(buf, pos, 16, "header")
    width, height, count, gop = struct.unpack("<IIII", hdr)
    if width == 0 or height == 0 or gop == 0:
        raise DecodeError("header has zero width, height or gop size")
    flag, pos = _take(buf, pos, 1, "label flag")
    label = None
    if flag[0] == 1:
        raw, pos = _take(buf, pos, 2, "label")
        (label,) = struct.unpack("<H", raw)
    elif flag[0] != 0:
        raise DecodeError("label flag must be 0 or 1")
    by, bx = grid_shape(width, height)
    n_pix = width * height * 3
    gv = GopVideo(width, height, gop, label=label)
    for k in range(count):
        kind, pos = _take(buf, pos, 1, f"frame {k} type")
        kind = kind[0]
        expect = _FRAME_I if k % gop == 0 else _FRAME_P
        if kind != expect:
            raise DecodeError(f"frame {k} has type {kind}, GOP structure requires {expect}")
        if kind == _FRAME_I:
            raw, pos = _take(buf, pos, n_pix, f"I-frame {k}")
            gv.frames.append(Frame(np.frombuffer(raw, np.uint8).reshape(height, width, 3).copy()))
        else:
            raw, pos = _take(buf, pos, by * bx * 4, f"motion field {k}")
            vec = np.frombuffer(raw, "<i2").reshape(by, bx, 2).astype(np.int16)
            raw, pos = _take(buf, pos, n_pix * 2, f"residual {k}")
            res = np.frombuffer(raw, "<i2").reshape(height, width, 3).astype(np.int16)
            # the container does not record the search range; use the tightest consistent one
            rng = int(np.abs(vec).max()) if vec.size else 0
            gv.frames.append((MotionField(vec, search_range=rng), Residual(res)))
    if pos != len(buf):
        raise DecodeError(f"{len(buf) - pos} trailing bytes after last frame")
    return gv


def read_gvc(src: Union[str, Path, BinaryIO]) -> GopVideo:
    if isinstance(src, (str, Path)):
        return parse_gvc(Path(src).read_bytes())
    return parse_gvc(src.read())
