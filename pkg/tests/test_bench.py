import time

import numpy as np
import pytest

from cvip.bench import count_flops, layer_cost, measure_vps
from cvip.errors import BenchError, InputError
from cvip.models import NetworkSpec, build_i_stream, build_p_stream, i_stream_spec, p_stream_spec
from cvip.tensor import Tensor, no_grad
from cvip.tensor.nn import Conv, Linear, profile


def counted_conv(x_shape, w_shape, stride, padding):
    """Multiplications performed by a direct convolution loop (padding taps included)."""
    n, cin = x_shape[:2]
    cout, _, *k = w_shape
    sp = x_shape[2:]
    out = [(s + 2 * p - kk) // st + 1 for s, p, kk, st in zip(sp, padding, k, stride)]
    mults = 0
    for _ in range(n):
        for _ in range(cout):
            for _ in np.ndindex(*out):
                for _ in range(cin):
                    for _ in np.ndindex(*k):
                        mults += 1
    return mults


def random_layer(rng):
    three_d = bool(rng.integers(0, 2))
    nd = 3 if three_d else 2
    k = tuple(int(v) for v in rng.choice([1, 3], nd))
    stride = tuple(int(v) for v in rng.integers(1, 3, nd))
    padding = tuple(kk // 2 for kk in k)
    cin, cout = int(rng.integers(1, 4)), int(rng.integers(1, 4))
    spatial = tuple(int(v) for v in rng.integers(3, 8, nd))
    return (1, cin) + spatial, Conv(cin, cout, k, stride, padding, rng=rng)


@pytest.mark.parametrize("seed", range(10))
def test_conv_macs_match_counting_oracle(seed):
    x_shape, conv = random_layer(np.random.default_rng(seed))
    with no_grad(), profile() as recs:
        conv(Tensor(np.zeros(x_shape)))
    cost = layer_cost(recs[0])
    assert cost.macs == counted_conv(x_shape, conv.weight.shape, conv.stride, conv.padding)
    assert cost.flops == 2 * cost.macs


def test_cost_examples():
    conv = Conv(1, 1, (3, 3), 1, 1)
    with no_grad(), profile() as recs:
        conv(Tensor(np.zeros((1, 1, 4, 4))))
        Linear(128, 8)(Tensor(np.zeros((1, 128))))
    assert (layer_cost(recs[0]).macs, layer_cost(recs[0]).flops) == (144, 288)
    assert layer_cost(recs[1]).macs == 1024


def test_temporal_kernel_scales_linearly():
    costs = []
    for kt in (1, 3):
        conv = Conv(2, 4, (kt, 3, 3), 1, (kt // 2, 1, 1))
        with no_grad(), profile() as recs:
            conv(Tensor(np.zeros((1, 2, 4, 6, 6))))
        costs.append(layer_cost(recs[0]).macs)
    assert costs[1] == 3 * costs[0]


def test_report_totals_and_area_scaling():
    net = build_p_stream(p_stream_spec(8))
    small = count_flops(net, (5, 8, 64, 64))
    assert small.total_flops == sum(l.flops for l in small.layers)
    assert small.totals["p"] == small.total_flops
    conv = [l for l in small.layers if l.kind in ("conv", "linear")]
    assert all(l.flops == 2 * l.macs for l in conv)
    big = count_flops(net, (5, 8, 128, 128))
    assert 3.5 < big.total_flops / small.total_flops < 4.1
    with pytest.raises(InputError):
        count_flops(net, (3, 8, 64, 64))


def test_p_stream_cheaper_than_i_stream():
    p = count_flops(build_p_stream(p_stream_spec(8)), (5, 16, 64, 64)).total_flops
    i = count_flops(build_i_stream(i_stream_spec(8)), (3, 64, 64), batch=16).total_flops
    assert p < i


def test_flops_fall_as_inflation_moves_later():
    small = dict(stage_widths=(4, 8, 8, 16, 16), blocks_per_stage=(1, 1, 1, 1))
    flops = [count_flops(build_p_stream(NetworkSpec(**small, inflate_at=k)), (5, 8, 32, 32)).total_flops
             for k in (1, 2, 3, 4, 5)]
    assert all(a > b for a, b in zip(flops, flops[1:]))


@pytest.fixture(scope="module")
def tiny(tmp_path_factory):
    from cvip.data import SyntheticConfig, generate_synthetic_dataset
    cfg = SyntheticConfig(classes=2, clips_per_class=2, test_per_class=1, frames=13, size=32)
    return generate_synthetic_dataset(tmp_path_factory.mktemp("bench"), cfg, seed=1, with_flows=False)


def test_vps_stub_timing(tiny):
    def sleeper(seconds):
        return lambda x: time.sleep(seconds)
    rep = measure_vps(sleeper(0.02), sleeper(0.05), tiny, reps=3, warmup=1, n_segments=4)
    assert rep.timing["i_stream"] == pytest.approx(0.02, rel=0.2)
    assert rep.timing["p_stream"] == pytest.approx(0.05, rel=0.2)
    assert rep.vps == pytest.approx(1.0 / sum(rep.timing.values()))
    slower = measure_vps(sleeper(0.02), sleeper(0.1), tiny, reps=3, warmup=1, n_segments=4)
    assert slower.vps < rep.vps


def test_vps_real_networks(tiny):
    rep = measure_vps(build_i_stream(i_stream_spec(2)), build_p_stream(p_stream_spec(2)), tiny,
                      reps=3, warmup=1, n_segments=4)
    assert rep.vps > 0 and set(rep.timing) == {"preprocessing", "i_stream", "p_stream"}


def test_vps_guards(tiny):
    with pytest.raises(InputError):
        measure_vps(lambda x: None, lambda x: None, tiny, reps=2)
    calls = iter([0.0, 0.2] + [0.0] * 10)
    with pytest.raises(BenchError):
        measure_vps(lambda x: time.sleep(next(calls)), lambda x: None, tiny, reps=3, warmup=2, n_segments=4)
