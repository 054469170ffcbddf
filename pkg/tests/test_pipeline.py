import math

import numpy as np
import pytest

from cvip.data import SyntheticConfig, VideoStore, generate_synthetic_dataset
from cvip.distill import LossConfig
from cvip.errors import InputError, TrainingError
from cvip.tensor.checkpoint import checkpoint_bytes
from cvip.pipeline import (
    ALL_STAGES, FusionConfig, ScheduleConfig, TrainConfig, evaluate, late_fuse, load_network,
    run_training_schedule, save_network, state_digest, train_i_stream, train_network,
)


@pytest.fixture(scope="module")
def tiny(tmp_path_factory):
    cfg = SyntheticConfig(classes=2, clips_per_class=3, test_per_class=1, frames=13, size=32)
    return generate_synthetic_dataset(tmp_path_factory.mktemp("tiny"), cfg, seed=3)


def sched(seed=0, **kw):
    base = TrainConfig(seed=seed, batch_size=2, n_segments=4, i_train_segments=2, **kw)
    return ScheduleConfig(base=base, epochs={s: 1 for s in ALL_STAGES}, num_classes=2)


def test_late_fuse_examples():
    np.testing.assert_allclose(late_fuse([0.2, 0.8], [0.6, 0.4], FusionConfig(0.5, 0.5), normalized=True),
                               [0.4, 0.6])
    s = late_fuse(np.log([0.2, 0.8]), np.log([0.6, 0.4]), FusionConfig(1, 1))
    np.testing.assert_allclose(s, [0.8, 1.2])
    with pytest.raises(InputError):
        late_fuse([1, 2], [1, 2, 3])
    with pytest.raises(InputError):
        FusionConfig(0, 0)


def test_late_fuse_scale_invariance():
    rng = np.random.default_rng(0)
    si, sp = rng.normal(size=(20, 5)), rng.normal(size=(20, 5))
    a = late_fuse(si, sp, FusionConfig(1.0, 2.0)).argmax(1)
    b = late_fuse(si, sp, FusionConfig(3.0, 6.0)).argmax(1)
    assert np.array_equal(a, b)


def test_lr_schedule():
    cfg = TrainConfig(epochs=8, lr=0.1, milestones=(0.5, 0.75))
    assert [round(cfg.lr_at(e), 6) for e in range(8)] == [0.1] * 4 + [0.01] * 2 + [0.001] * 2
    with pytest.raises(InputError):
        TrainConfig(stage="warmup")


def test_stage_config_epochs_and_lr_scale():
    sc = ScheduleConfig(base=TrainConfig(lr=0.04, epochs=3), epochs={"of2d": 7}, lr_scale={"istream": 0.25})
    assert (sc.stage_cfg("of2d").epochs, sc.stage_cfg("of2d").lr) == (7, 0.04)
    assert (sc.stage_cfg("istream").epochs, sc.stage_cfg("istream").lr) == (3, 0.01)
    assert sc.stage_cfg("istream", lr=0.5).lr == 0.5
    assert sc.stage_cfg("mr2d").stage == "mr2d"


def test_schedule_is_deterministic_and_teacher_frozen(tiny, tmp_path):
    store = VideoStore(tiny)
    r1 = run_training_schedule(tiny, sched(seed=4), out_dir=tmp_path / "a", store=store)
    r2 = run_training_schedule(tiny, sched(seed=4), out_dir=tmp_path / "b", store=store)
    assert set(r1) == {"mr2d", "of2d", "distill2d", "inflate", "inflate_teacher", "distill3d"}
    for key in r1:
        assert state_digest(r1[key].net) == state_digest(r2[key].net)
        assert (tmp_path / "a" / f"{key}.ckpt").read_bytes() == (tmp_path / "b" / f"{key}.ckpt").read_bytes()
    r3 = run_training_schedule(tiny, sched(seed=5), ["mr2d"], store=store)
    assert state_digest(r3["mr2d"].net) != state_digest(r1["mr2d"].net)


def test_teacher_digest_unchanged_by_distillation(tiny):
    store = VideoStore(tiny)
    s = sched()
    pre = run_training_schedule(tiny, s, ["mr2d", "of2d"], store=store)
    teacher = pre["of2d"].net
    before, ckpt = state_digest(teacher), checkpoint_bytes(teacher.spec.descriptor(), teacher.state_dict())
    cfg = s.stage_cfg("distill2d", loss=LossConfig(5.0, 1.0))
    res = train_network(pre["mr2d"].net, tiny, cfg, "p", "distill2d", teacher, store=store)
    assert state_digest(teacher) == before
    assert checkpoint_bytes(teacher.spec.descriptor(), teacher.state_dict()) == ckpt
    assert res.teacher is teacher


def test_missing_prerequisite(tiny):
    with pytest.raises(TrainingError, match=r"\[C\]"):
        run_training_schedule(tiny, sched(), ["distill2d"])


def test_nan_loss_aborts(tiny):
    from cvip.models import build_p_stream, p_stream_spec
    net = build_p_stream(p_stream_spec(2, None))
    net.head.weight.data[:] = np.nan
    with pytest.raises(TrainingError, match="non-finite"):
        train_network(net, tiny, sched().stage_cfg("mr2d"), "p", "mr2d")


def test_first_batch_loss_is_near_chance(tiny):
    res = run_training_schedule(tiny, sched(), ["mr2d"])
    assert res["mr2d"].log[0]["first_batch_loss"] == pytest.approx(math.log(2), abs=0.05)
    i = train_i_stream(tiny, sched().stage_cfg("istream"))
    assert i.log[0]["first_batch_loss"] == pytest.approx(math.log(2), abs=0.05)


def test_evaluate_report_and_fusion_degeneracy(tiny, tmp_path):
    store = VideoStore(tiny)
    s = sched()
    p = run_training_schedule(tiny, s, ["mr2d"], store=store)["mr2d"].net
    i = train_i_stream(tiny, s.stage_cfg("istream"), store).net
    cfg = s.base
    both = evaluate(tiny, i, p, FusionConfig(1, 1), store=store, cfg=cfg)
    assert {"top1_i", "top1_p", "top1_fused", "confusion", "n_videos"} <= set(both)
    assert both["n_videos"] == 2 and np.sum(both["confusion"]) == 2
    only_i = evaluate(tiny, i, p, FusionConfig(1, 0), store=store, cfg=cfg)
    only_p = evaluate(tiny, i, p, FusionConfig(0, 1), store=store, cfg=cfg)
    assert only_i["top1_fused"] == only_i["top1_i"] and only_p["top1_fused"] == only_p["top1_p"]
    save_network(tmp_path / "p.ckpt", p)
    again = evaluate(tiny, p_net=load_network(tmp_path / "p.ckpt"), store=store, cfg=cfg)
    assert again["top1_p"] == both["top1_p"]
    with pytest.raises(InputError):
        evaluate(tiny)
