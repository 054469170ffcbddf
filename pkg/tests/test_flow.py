import numpy as np
import pytest
from scipy import ndimage

from cvip.codec import Frame
from cvip.errors import DecodeError, InputError
from cvip.flow import (
    FlowField,
    FlowParams,
    flow_energy,
    read_flo,
    read_flow_dir,
    tvl1_flow,
    video_flows,
    write_flo,
    write_flow_dir,
)
from cvip.imaging import to_gray


def texture(seed, n=64):
    rng = np.random.default_rng(seed)
    a = ndimage.gaussian_filter(rng.random((n, n, 3)) * 255, (1.5, 1.5, 0), mode="wrap")
    a = (a - a.min()) / (a.max() - a.min()) * 255
    return Frame(a.astype(np.uint8))


def test_identical_frames_zero_flow():
    f = texture(0)
    flow = tvl1_flow(f, f)
    assert np.abs(flow.data).max() < 1e-3


def test_translation_recovered():
    prev = texture(1)
    cur = Frame(np.roll(prev.data, (1, 2), axis=(0, 1)))  # content moves +2 in x, +1 in y
    flow = tvl1_flow(prev, cur)
    inner = flow.data[:, 8:-8, 8:-8]
    epe = np.sqrt((inner[0] - 2) ** 2 + (inner[1] - 1) ** 2).mean()
    assert epe < 0.5


def test_huge_smoothness_on_noise_gives_near_zero_flow():
    rng = np.random.default_rng(3)
    a = Frame(rng.integers(0, 256, (32, 32, 3), dtype=np.uint8))
    b = Frame(rng.integers(0, 256, (32, 32, 3), dtype=np.uint8))
    flow = tvl1_flow(a, b, FlowParams(smoothness_weight=1e4, outer_warps=3, inner_iterations=10))
    assert np.abs(flow.data).max() < 0.05


def test_energy_zero_and_data_term():
    f = texture(2, 32)
    zero = FlowField(np.zeros((2, 32, 32), np.float32))
    assert flow_energy(f, f, zero, 0.15) == 0.0
    g = texture(5, 32)
    expect = np.abs(to_gray(g.data) - to_gray(f.data)).sum()
    assert flow_energy(f, g, zero, 0.15) == pytest.approx(expect, rel=1e-12)


def test_solver_lowers_energy_versus_zero_flow():
    prev = texture(1)
    cur = Frame(np.roll(prev.data, (1, 2), axis=(0, 1)))
    zero = FlowField(np.zeros((2, 64, 64), np.float32))
    solved = tvl1_flow(prev, cur)
    assert flow_energy(prev, cur, solved, 0.15) < flow_energy(prev, cur, zero, 0.15)


def test_energy_trace_monotone_per_level():
    prev = texture(4)
    cur = Frame(np.roll(prev.data, (-2, 1), axis=(0, 1)))
    trace = []
    tvl1_flow(prev, cur, trace=trace)
    assert len(trace) == 5
    for level in trace:
        e = level["energy"][:, 0]
        assert (e[1:] <= e[:-1] * (1 + 1e-6)).all()


def test_determinism():
    prev = texture(6)
    cur = Frame(np.roll(prev.data, (0, 3), axis=(0, 1)))
    a = tvl1_flow(prev, cur).data
    b = tvl1_flow(prev, cur).data
    assert a.tobytes() == b.tobytes()


def test_errors():
    with pytest.raises(InputError):
        tvl1_flow(texture(0, 32), texture(0, 64))
    with pytest.raises(InputError):
        FlowParams(pyramid_scale=1.0)
    with pytest.raises(InputError):
        FlowParams(smoothness_weight=0)
    with pytest.raises(InputError):
        flow_energy(texture(0, 32), texture(0, 32), FlowField(np.zeros((2, 8, 8))), 0.1)


def test_video_flows_batch_matches_shape_and_direction():
    base = texture(7, 96).data
    frames = [Frame(np.ascontiguousarray(base[:48, k:k + 48])) for k in range(4)]
    flows = video_flows(frames)
    assert flows.shape == (3, 2, 48, 48) and flows.dtype == np.float32
    # window slides right, so content moves left by one pixel per frame
    assert np.abs(flows[:, 0, 8:-8, 8:-8].mean() + 1) < 0.1


def test_flo_round_trip(tmp_path):
    data = np.random.default_rng(0).normal(size=(3, 2, 5, 7)).astype(np.float32)
    write_flow_dir(tmp_path / "v.flo", data)
    np.testing.assert_array_equal(read_flow_dir(tmp_path / "v.flo"), data)
    raw = (tmp_path / "v.flo" / "pair_000002.flo").read_bytes()
    assert raw[:4] == b"FLO1"
    assert np.frombuffer(raw[4:16], "<u4").tolist() == [7, 5, 2]
    assert len(raw) == 16 + 2 * 5 * 7 * 4


def test_flo_rejects_bad_files(tmp_path):
    p = tmp_path / "x.flo"
    write_flo(p, FlowField(np.zeros((2, 3, 3))), 1)
    p.write_bytes(p.read_bytes()[:-4])
    with pytest.raises(DecodeError):
        read_flo(p)
    p.write_bytes(b"NOPE" + bytes(12))
    with pytest.raises(DecodeError):
        read_flo(p)
