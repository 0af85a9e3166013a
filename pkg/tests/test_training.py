import math

import numpy as np
import pytest

from gmlp.autodiff import Tape
from gmlp.models import ModelConfig, ParamStore, build_model
from gmlp.training import (
    DESK_TRAIN,
    METRIC_FIELDS,
    TrainConfig,
    TrainingDiverged,
    TrainState,
    adamw_step,
    lr_schedule,
    train,
)

SHORT = DESK_TRAIN.replace(total_steps=60, warmup_steps=10, eval_every=20, eval_size=32)


def test_full_scale_defaults():
    tc = TrainConfig()
    assert (tc.peak_lr, tc.warmup_steps, tc.total_steps, tc.batch_size) == (7e-4, 10_000, 125_000, 2048)
    assert tc.weight_decay == 0.01 and tc.adam_eps == 1e-6


@pytest.mark.parametrize("bad", [dict(decay="step"), dict(warmup_steps=10, total_steps=5), dict(peak_lr=0),
                                 dict(adam_beta1=1.0), dict(weight_decay=-1)])
def test_train_config_validation(bad):
    with pytest.raises(ValueError):
        TrainConfig(**bad)


def test_linear_schedule_points():
    tc = TrainConfig(peak_lr=1.0, warmup_steps=10, total_steps=110)
    assert lr_schedule(0, tc) == 0.0
    assert lr_schedule(5, tc) == 0.5
    assert lr_schedule(10, tc) == 1.0
    assert lr_schedule(60, tc) == pytest.approx(0.5)
    assert lr_schedule(110, tc) == 0.0
    with pytest.raises(ValueError):
        lr_schedule(111, tc)


def test_cosine_schedule_points():
    tc = TrainConfig(peak_lr=2.0, warmup_steps=0, total_steps=100, decay="cosine")
    assert lr_schedule(0, tc) == 2.0
    assert lr_schedule(50, tc) == pytest.approx(1.0)
    assert lr_schedule(100, tc) == pytest.approx(0.0, abs=1e-15)


def _store(value, decay):
    s = ParamStore()
    s.add("p", np.array(value, dtype=np.float64), "zeros", decay)
    return s


def test_adamw_first_step_against_hand_computation():
    tc = TrainConfig(weight_decay=0.1, adam_eps=1e-8)
    s = _store([1.0, -2.0], True)
    g = np.array([0.5, 0.25])
    adamw_step(s, {"p": g}, TrainState(), 0.01, tc)
    # bias-corrected m/sqrt(v) = sign(g) on the first step
    expected = np.array([1.0, -2.0]) - 0.01 * (g / (np.abs(g) + 1e-8) + 0.1 * np.array([1.0, -2.0]))
    np.testing.assert_allclose(s["p"], expected, rtol=1e-12)


def test_adamw_decay_is_decoupled_and_skips_gains():
    tc = TrainConfig(weight_decay=0.5)
    decayed, kept = _store([2.0], True), _store([2.0], False)
    adamw_step(decayed, {"p": np.zeros(1)}, TrainState(), 0.1, tc)
    adamw_step(kept, {"p": np.zeros(1)}, TrainState(), 0.1, tc)
    assert decayed["p"][0] == pytest.approx(2.0 - 0.1 * 0.5 * 2.0)
    assert kept["p"][0] == 2.0


def test_adamw_frozen_and_mismatch():
    tc = TrainConfig()
    s = _store([1.0], True)
    adamw_step(s, {"p": np.ones(1)}, TrainState(), 0.1, tc, frozen=frozenset({"p"}))
    assert s["p"][0] == 1.0
    with pytest.raises(KeyError):
        adamw_step(s, {"q": np.ones(1)}, TrainState(), 0.1, tc)
    with pytest.raises(ValueError):
        adamw_step(s, {"p": np.ones(2)}, TrainState(), 0.1, tc)


def test_gradients_on_mlm_loss_cover_every_param():
    cfg = ModelConfig()
    store, _ = build_model(cfg, np.random.default_rng(0))
    from gmlp.data import synth_task_generate
    from gmlp.training import masked_loss

    batch = synth_task_generate("copy_shift_1", 16, 16, np.random.default_rng(1), 4)
    tape = Tape()
    grads = tape.backward(masked_loss(cfg, store.bind(tape), batch))
    assert set(grads) == set(store)
    assert all(np.all(np.isfinite(g)) for g in grads.values())


def test_short_run_reduces_loss_and_logs_fields():
    res = train(ModelConfig(), "copy_shift_1", SHORT)
    assert [r["step"] for r in res.records] == [20, 40, 60]
    assert all(set(r) == set(METRIC_FIELDS) for r in res.records)
    assert res.final_eval_loss < math.log(16)
    assert res.params["embed/table"].dtype == np.float32


def test_identical_seeds_identical_records():
    a = train(ModelConfig(), "copy_shift_1", SHORT)
    b = train(ModelConfig(), "copy_shift_1", SHORT)
    assert a.records == b.records
    c = train(ModelConfig(), "copy_shift_1", SHORT.replace(seed=1))
    assert c.records != a.records


def test_freeze_spatial_keeps_weights_zero():
    res = train(ModelConfig(), "copy_shift_1", SHORT, freeze_spatial=True)
    for k in res.params:
        if k.endswith("spatial/weight"):
            assert not np.any(res.params[k])


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_is_reported():
    tc = SHORT.replace(peak_lr=1e30, warmup_steps=0, eval_every=1)
    with pytest.raises(TrainingDiverged) as info:
        train(ModelConfig(), "copy_shift_1", tc)
    assert info.value.step >= 1


def test_rejects_vision_config():
    cfg = ModelConfig(protocol="vision_patch", L=1, n=4, vocab_size=None, num_classes=2, image_size=4,
                      patch_size=2, channels=1)
    with pytest.raises(ValueError):
        train(cfg, "copy_shift_1", SHORT)


def test_adamw_zero_gradient_examples():
    s = _store([1.0, -3.0], True)
    adamw_step(s, {"p": np.zeros(2)}, TrainState(), 0.1, TrainConfig(weight_decay=0.0))
    np.testing.assert_array_equal(s["p"], [1.0, -3.0])
    adamw_step(s, {"p": np.zeros(2)}, TrainState(), 0.1, TrainConfig(weight_decay=0.01))
    np.testing.assert_allclose(s["p"], np.array([1.0, -3.0]) * (1 - 0.1 * 0.01), rtol=1e-15)


def test_adamw_descends_quadratic():
    s = _store([1.0], True)
    adamw_step(s, {"p": 2.0 * s["p"]}, TrainState(), 0.01, TrainConfig())
    assert abs(s["p"][0]) < 1.0


def test_warmup_end_hits_peak():
    tc = TrainConfig()
    assert lr_schedule(0, tc) == 0.0
    assert lr_schedule(tc.warmup_steps, tc) == 7e-4
    mid = tc.warmup_steps + (tc.total_steps - tc.warmup_steps) // 2
    assert lr_schedule(mid, tc) == pytest.approx(3.5e-4)
