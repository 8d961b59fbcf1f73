import math

import numpy as np
import pytest

from maskspec.optim import AdamW, OptimizerState, ScheduleConfig, adamw_step, lr_at
from maskspec.tensor import Parameter


class TestSchedule:
    cfg = ScheduleConfig(warmup_epochs=40, total_epochs=80, peak_lr=1e-3)

    @pytest.mark.parametrize("epoch,expected", [(0, 0.0), (20, 5e-4), (40, 1e-3), (60, 5e-4), (80, 0.0)])
    def test_values(self, epoch, expected):
        assert lr_at(epoch, self.cfg) == pytest.approx(expected, abs=1e-15)

    def test_cosine_midpoint_formula(self):
        assert lr_at(60, self.cfg) == pytest.approx(0.001 * (1 + math.cos(math.pi * 0.5)) / 2, abs=1e-15)

    def test_continuous_at_boundary(self):
        below = lr_at(40 - 1e-9, self.cfg)
        assert abs(lr_at(40, self.cfg) - below) < 1e-12

    def test_monotone_pieces(self):
        grid = np.linspace(0, 80, 801)
        lrs = np.array([lr_at(e, self.cfg) for e in grid])
        assert np.all(np.diff(lrs[grid <= 40]) > 0)
        assert np.all(np.diff(lrs[grid >= 40]) <= 0)

    def test_floor(self):
        cfg = ScheduleConfig(5, 10, 1e-3, floor_lr=1e-5)
        assert lr_at(10, cfg) == pytest.approx(1e-5)

    @pytest.mark.parametrize("epoch", [-0.1, 80.5])
    def test_out_of_range(self, epoch):
        with pytest.raises(ValueError):
            lr_at(epoch, self.cfg)

    def test_warmup_must_be_shorter(self):
        with pytest.raises(ValueError):
            ScheduleConfig(warmup_epochs=80, total_epochs=80)


def params_of(*values):
    return {f"p{i}": Parameter(np.array(v, dtype=np.float64), f"p{i}") for i, v in enumerate(values)}


class TestAdamW:
    def test_zero_grad_no_decay_is_noop(self, rng):
        w = rng.standard_normal((3, 4))
        params = params_of(w.copy())
        adamw_step(params, OptimizerState(), lr=1e-3, weight_decay=0.0)
        np.testing.assert_array_equal(params["p0"].data, w)

    def test_pure_decay(self, rng):
        w = rng.standard_normal(5)
        params = params_of(w.copy())
        adamw_step(params, OptimizerState(), lr=1e-3, weight_decay=0.05)
        np.testing.assert_allclose(params["p0"].data, w * (1 - 5e-5), rtol=1e-15)

    def test_two_steps_match_unrolled_recursion(self):
        lr, wd, b1, b2, eps = 1e-3, 0.05, 0.9, 0.95, 1e-8
        w = 0.7
        m = v = 0.0
        for t in (1, 2):
            g = 1.0
            w = w - lr * wd * w
            m = b1 * m + (1 - b1) * g
            v = b2 * v + (1 - b2) * g * g
            m_hat = m / (1 - b1**t)
            v_hat = v / (1 - b2**t)
            w = w - lr * m_hat / (math.sqrt(v_hat) + eps)

        params = params_of([0.7])
        opt = AdamW(params, betas=(b1, b2), weight_decay=wd, eps=eps)
        for _ in range(2):
            params["p0"].grad[...] = 1.0
            opt.step(lr)
        assert abs(params["p0"].data[0] - w) < 1e-12
        assert opt.state.step == 2

    def test_grads_zeroed_after_step(self):
        params = params_of([1.0, 2.0])
        params["p0"].grad[...] = 3.0
        AdamW(params).step(1e-3)
        assert not params["p0"].grad.any()

    def test_zero_lr_changes_nothing_but_moments(self, rng):
        params = params_of(rng.standard_normal(4))
        before = params["p0"].data.copy()
        params["p0"].grad[...] = rng.standard_normal(4)
        opt = AdamW(params)
        opt.step(0.0)
        np.testing.assert_array_equal(params["p0"].data, before)
        assert opt.state.m["p0"].any()

    def test_lr_scale(self):
        params = params_of([1.0], [1.0])
        opt = AdamW(params, weight_decay=0.0, lr_scale={"p1": 0.5})
        for p in params.values():
            p.grad[...] = 1.0
        opt.step(1e-2)
        # first Adam step moves each weight by about its lr
        assert 1 - params["p0"].data[0] == pytest.approx(1e-2, rel=1e-5)
        assert 1 - params["p1"].data[0] == pytest.approx(5e-3, rel=1e-5)

    def test_moment_shapes_follow_params(self, rng):
        params = params_of(rng.standard_normal((2, 3)), rng.standard_normal(7))
        opt = AdamW(params)
        for n, p in params.items():
            assert opt.state.m[n].shape == p.shape == opt.state.v[n].shape

    def test_float32_update(self):
        p = Parameter(np.ones(3, dtype=np.float32), "w")
        p.grad[...] = 1.0
        AdamW([p]).step(1e-3)
        assert p.data.dtype == np.float32
        assert (p.data < 1).all()
