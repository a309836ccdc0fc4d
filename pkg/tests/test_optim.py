import math

import numpy as np
import pytest

from engine import functional as F
from engine.errors import ConfigurationError, MissingGradientError, ScheduleRangeError
from engine.optim import (AdamW, AdamWConfig, AdamWState, ScheduleConfig, accumulate_and_step,
                          adamw_step, clip_grad_norm, lr_at_step)
from engine.tensor import Tensor, backward

REFERENCE_SCHEDULE = ScheduleConfig(total_steps=300, base_lr=1e-4, warmup_steps=100)


class TestSchedule:
    def test_key_points(self):
        assert lr_at_step(REFERENCE_SCHEDULE, 0) == 0.0
        assert lr_at_step(REFERENCE_SCHEDULE, 100) == 1e-4
        assert lr_at_step(REFERENCE_SCHEDULE, 200) == pytest.approx(5e-5, abs=1e-15)
        assert lr_at_step(REFERENCE_SCHEDULE, 300) == pytest.approx(0.0, abs=1e-15)

    def test_min_lr_at_end(self):
        cfg = ScheduleConfig(total_steps=50, base_lr=1e-3, warmup_steps=5, min_lr=1e-5)
        assert lr_at_step(cfg, 50) == pytest.approx(1e-5, abs=1e-15)

    def test_warmup_boundary_continuity(self):
        jump = abs(lr_at_step(REFERENCE_SCHEDULE, 100) - lr_at_step(REFERENCE_SCHEDULE, 99))
        assert jump <= 1e-4 / 100 + 1e-15

    def test_non_increasing_after_warmup(self):
        values = [lr_at_step(REFERENCE_SCHEDULE, s) for s in range(100, 301)]
        assert all(b <= a for a, b in zip(values, values[1:]))

    def test_no_decay_window(self):
        cfg = ScheduleConfig(total_steps=10, base_lr=1e-3, warmup_steps=10)
        assert lr_at_step(cfg, 10) == 1e-3

    @pytest.mark.parametrize("step", [-1, 301])
    def test_out_of_range(self, step):
        with pytest.raises(ScheduleRangeError):
            lr_at_step(REFERENCE_SCHEDULE, step)

    def test_warmup_longer_than_run(self):
        with pytest.raises(ConfigurationError):
            ScheduleConfig(total_steps=10, warmup_steps=11)


class TestAdamWStep:
    def test_hand_computed_scalar(self):
        w = Tensor([1.0], requires_grad=True)
        adamw_step({"w": w}, {"w": np.array([0.1])}, AdamWState(), lr=1e-4)
        assert w.data[0] == pytest.approx(0.999899, abs=1e-9)

    def test_missing_gradient(self):
        w = Tensor([1.0], requires_grad=True)
        with pytest.raises(MissingGradientError, match="w"):
            adamw_step({"w": w}, {}, AdamWState(), lr=1e-4)

    def test_frozen_untouched(self, rng):
        frozen = Tensor(rng.normal(size=(3, 3)))
        live = Tensor(rng.normal(size=(3,)), requires_grad=True)
        before = frozen.data.copy()
        state = AdamWState(weight_decay=0.5)
        for _ in range(25):
            adamw_step({"frozen": frozen, "live": live}, {"live": rng.normal(size=3)}, state, 1e-2)
        np.testing.assert_array_equal(frozen.data, before)
        assert "frozen" not in state.m
        assert state.step_count == 25

    def test_zero_decay_matches_scalar_adam(self):
        for seed in range(100):
            r = np.random.default_rng(seed)
            w0 = float(r.normal())
            grads = r.normal(size=5)
            lr, b1, b2, eps = 1e-2, 0.9, 0.999, 1e-8
            w, m, v = w0, 0.0, 0.0
            for t, g in enumerate(grads, start=1):
                m = b1 * m + (1 - b1) * g
                v = b2 * v + (1 - b2) * g * g
                w -= lr * (m / (1 - b1 ** t)) / (math.sqrt(v / (1 - b2 ** t)) + eps)
            tensor = Tensor([w0], requires_grad=True)
            state = AdamWState(weight_decay=0.0)
            for g in grads:
                adamw_step({"w": tensor}, {"w": np.array([g])}, state, lr)
            assert abs(tensor.data[0] - w) < 1e-12

    def test_config_validation(self):
        with pytest.raises(ConfigurationError):
            AdamWConfig(beta1=1.0)
        with pytest.raises(ConfigurationError):
            AdamWConfig(weight_decay=-0.1)


def _regression_loss(w: Tensor):
    def loss_fn(batch):
        x, y = batch
        diff = F.sub(F.matmul(Tensor(x), w), Tensor(y))
        return F.mean(F.mul(diff, diff))
    return loss_fn


class TestAccumulation:
    def test_two_halves_equal_full_batch(self, rng):
        x = rng.normal(size=(4, 3))
        y = rng.normal(size=(4, 1))
        init = rng.normal(size=(3, 1))

        w_full = Tensor(init.copy(), requires_grad=True)
        accumulate_and_step([(x, y)], _regression_loss(w_full),
                            AdamW([("w", w_full)]), lambda s: 1e-2, grad_accum_steps=1)

        w_acc = Tensor(init.copy(), requires_grad=True)
        halves = [(x[:2], y[:2]), (x[2:], y[2:])]
        applied = accumulate_and_step(halves, _regression_loss(w_acc),
                                      AdamW([("w", w_acc)]), lambda s: 1e-2, grad_accum_steps=2)
        assert applied == 1
        np.testing.assert_allclose(w_acc.data, w_full.data, atol=1e-12)

    def test_lr_read_before_increment(self, rng):
        w = Tensor(rng.normal(size=(3, 1)), requires_grad=True)
        seen = []
        batches = [(rng.normal(size=(2, 3)), rng.normal(size=(2, 1))) for _ in range(3)]
        accumulate_and_step(batches, _regression_loss(w), AdamW([("w", w)]),
                            lambda s: lr_at_step(REFERENCE_SCHEDULE, s),
                            on_step=lambda step, lr, loss: seen.append((step, lr)))
        assert [s for s, _ in seen] == [0, 1, 2]
        assert [lr for _, lr in seen] == pytest.approx([0.0, 1e-6, 2e-6], abs=1e-18)

    def test_trailing_partial_group_and_max_steps(self, rng):
        w = Tensor(rng.normal(size=(3, 1)), requires_grad=True)
        batches = [(rng.normal(size=(2, 3)), rng.normal(size=(2, 1))) for _ in range(5)]
        optimizer = AdamW([("w", w)])
        assert accumulate_and_step(batches, _regression_loss(w), optimizer, lambda s: 1e-3,
                                   grad_accum_steps=2) == 3
        assert accumulate_and_step(batches, _regression_loss(w), optimizer, lambda s: 1e-3,
                                   max_steps=2) == 2
        assert optimizer.state.step_count == 5

    def test_loss_decreases(self, rng):
        x = rng.normal(size=(8, 3))
        y = x @ np.array([[1.0], [-2.0], [0.5]])
        w = Tensor(np.zeros((3, 1)), requires_grad=True)
        losses = []
        accumulate_and_step([(x, y)] * 200, _regression_loss(w), AdamW([("w", w)], weight_decay=0.0),
                            lambda s: 5e-2 * (1 - s / 200),
                            on_step=lambda step, lr, loss: losses.append(loss))
        assert losses[-1] < 0.01 * losses[0]


class TestOptimizerState:
    def test_state_dict_round_trip(self, rng):
        w = Tensor(rng.normal(size=(2, 2)), requires_grad=True)
        optimizer = AdamW([("w", w)])
        backward(F.sum(F.mul(w, w)))
        optimizer.step(1e-3)
        restored = AdamW([("w", Tensor(w.data.copy(), requires_grad=True))])
        restored.load_state_dict(optimizer.state_dict(), optimizer.state.step_count)
        np.testing.assert_array_equal(restored.state.m["w"], optimizer.state.m["w"])
        assert restored.state.step_count == 1

    def test_clip_grad_norm(self):
        w = Tensor([0.0, 0.0], requires_grad=True)
        w.grad = np.array([3.0, 4.0])
        assert clip_grad_norm([w], 1.0) == pytest.approx(5.0)
        assert np.linalg.norm(w.grad) == pytest.approx(1.0, abs=1e-9)

    def test_from_config(self):
        optimizer = AdamW.from_config([], AdamWConfig(weight_decay=0.0), clip_norm=2.0)
        assert optimizer.state.weight_decay == 0.0
        assert optimizer.clip_norm == 2.0
