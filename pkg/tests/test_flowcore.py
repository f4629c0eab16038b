import math

import pytest
import torch
from hypothesis import given, settings, strategies as st

from flowtok import flowcore as fc


def randn(*shape, seed=0):
    g = torch.Generator().manual_seed(seed)
    return torch.randn(*shape, generator=g, dtype=torch.float64)


class TestInterpolate:
    def test_endpoint_t1(self):
        x0 = torch.zeros(3, 4)
        x1 = randn(3, 4)
        assert torch.equal(fc.interpolate(x0, x1, 1.0), x1)

    def test_midpoint_scalars(self):
        x0 = torch.zeros(1)
        x1 = torch.full((1,), 2.0)
        assert float(fc.interpolate(x0, x1, 0.5)) == pytest.approx(1.0)

    def test_fixed_point_equal_endpoints(self):
        v = randn(2, 5, seed=3)
        for t in (0.0, 0.25, 0.9):
            assert torch.allclose(fc.interpolate(v, v, t), v)

    def test_endpoint_t0(self):
        x0, x1 = randn(4, 4, seed=1), randn(4, 4, seed=2)
        assert torch.equal(fc.interpolate(x0, x1, 0.0), x0)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            fc.interpolate(torch.zeros(2, 3), torch.zeros(3, 2), 0.5)

    def test_t_out_of_range(self):
        x = torch.zeros(2)
        with pytest.raises(ValueError):
            fc.interpolate(x, x, 1.5)
        with pytest.raises(ValueError):
            fc.interpolate(x, x, -0.1)

    def test_per_sample_t(self):
        x0, x1 = randn(3, 2, seed=5), randn(3, 2, seed=6)
        t = torch.tensor([0.0, 0.5, 1.0], dtype=torch.float64)
        out = fc.interpolate(x0, x1, t)
        assert torch.allclose(out[0], x0[0])
        assert torch.allclose(out[2], x1[2])
        assert torch.allclose(out[1], 0.5 * (x0[1] + x1[1]))

    def test_affine_in_t(self):
        # second finite difference in t is zero to machine precision
        x0, x1 = randn(3, 3, seed=7), randn(3, 3, seed=8)
        h = 0.125
        a = fc.interpolate(x0, x1, 0.25)
        b = fc.interpolate(x0, x1, 0.25 + h)
        c = fc.interpolate(x0, x1, 0.25 + 2 * h)
        assert float((a - 2 * b + c).abs().max()) < 1e-12


class TestVelocityTarget:
    def test_zero_for_equal(self):
        x = randn(4, 2, seed=9)
        assert torch.equal(fc.velocity_target(x, x), torch.zeros_like(x))

    def test_unit_step(self):
        x0 = torch.zeros(5)
        x1 = torch.ones(5)
        assert torch.equal(fc.velocity_target(x0, x1), torch.ones(5))

    def test_finite_difference_oracle(self):
        x0, x1 = randn(6, 3, seed=10), randn(6, 3, seed=11)
        h = 1e-4
        t = 0.3
        fd = (fc.interpolate(x0, x1, t + h) - fc.interpolate(x0, x1, t)) / h
        v = fc.velocity_target(x0, x1)
        rel = float(((fd - v).norm()) / v.norm())
        assert rel < 1e-6

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            fc.velocity_target(torch.zeros(2), torch.zeros(3))


class TestRFLoss:
    def test_exact_prediction(self):
        x0, x1 = randn(3, 4, seed=12), randn(3, 4, seed=13)
        assert float(fc.rf_loss(x1 - x0, x0, x1)) == 0.0

    def test_unit_offset(self):
        x0, x1 = randn(3, 4, seed=14), randn(3, 4, seed=15)
        assert float(fc.rf_loss(x1 - x0 + 1.0, x0, x1)) == pytest.approx(1.0)

    def test_scalar_loop_oracle(self):
        x0, x1, vp = randn(2, 3, seed=16), randn(2, 3, seed=17), randn(2, 3, seed=18)
        acc, count = 0.0, 0
        for i in range(2):
            for j in range(3):
                acc += (float(vp[i, j]) - (float(x1[i, j]) - float(x0[i, j]))) ** 2
                count += 1
        assert float(fc.rf_loss(vp, x0, x1)) == pytest.approx(acc / count, rel=1e-12)

    def test_nonnegative_and_zero_iff_exact(self):
        x0, x1 = randn(2, 2, seed=19), randn(2, 2, seed=20)
        assert float(fc.rf_loss(x1 - x0 + 1e-3, x0, x1)) > 0.0


class TestShiftFactor:
    def test_reference_point(self):
        assert fc.shift_factor(16, 16) == pytest.approx(1.0)

    def test_high_dim(self):
        assert fc.shift_factor(16, 128) == pytest.approx(math.sqrt(0.125))

    def test_mid_dim(self):
        assert fc.shift_factor(16, 64) == pytest.approx(0.5)

    def test_domain(self):
        with pytest.raises(ValueError):
            fc.shift_factor(0, 16)
        with pytest.raises(ValueError):
            fc.shift_factor(16, 0)


class TestShiftMap:
    def test_endpoints(self):
        for s in (0.1, 0.5, 1.0, 3.0):
            assert fc.shift_map(0.0, s) == pytest.approx(0.0)
            assert fc.shift_map(1.0, s) == pytest.approx(1.0)

    def test_identity_at_s1(self):
        assert fc.shift_map(0.37, 1.0) == pytest.approx(0.37)

    def test_hand_value(self):
        assert fc.shift_map(0.5, 0.5) == pytest.approx(1.0 / 3.0)

    def test_strictly_increasing(self):
        ts = torch.linspace(0, 1, 101, dtype=torch.float64)
        out = fc.shift_map(ts, 0.3)
        assert bool((out[1:] > out[:-1]).all())

    def test_round_trip(self):
        ts = torch.linspace(0, 1, 57, dtype=torch.float64)
        for s in (0.25, 0.7, 2.5):
            back = fc.shift_map(fc.shift_map_inverse(ts, s), s)
            assert float((back - ts).abs().max()) < 1e-12

    @given(st.floats(0.0, 1.0), st.floats(0.01, 0.999))
    @settings(max_examples=200, deadline=None)
    def test_noisier_bias_for_s_below_1(self, t_prime, s):
        assert fc.shift_map(t_prime, s) <= t_prime + 1e-15

    def test_domain_errors(self):
        with pytest.raises(ValueError):
            fc.shift_map(0.5, 0.0)
        with pytest.raises(ValueError):
            fc.shift_map(1.5, 1.0)


class TestSampleTimesteps:
    def test_uniform_mean(self):
        g = torch.Generator().manual_seed(0)
        t = fc.sample_timesteps(fc.NoiseSchedule(kind="uniform"), 10**6, g)
        assert float(t.mean()) == pytest.approx(0.5, abs=0.002)

    def test_shift_cdf_matches_analytic_inverse(self):
        # F(t) = t / (s - (s - 1) t) is the CDF of shift_map(U(0,1), s)
        s = 0.5
        g = torch.Generator().manual_seed(1)
        t = fc.sample_timesteps(fc.NoiseSchedule(kind="shift", shift=s), 10**5, g)
        ts = torch.sort(t).values.double()
        emp = torch.arange(1, len(ts) + 1, dtype=torch.float64) / len(ts)
        analytic = fc.shift_map_inverse(ts, s)
        ks = float((emp - analytic).abs().max())
        assert ks < 0.005

    def test_logit_normal_median(self):
        g = torch.Generator().manual_seed(2)
        t = fc.sample_timesteps(fc.NoiseSchedule(kind="logit_normal"), 10**6, g)
        assert float(t.median()) == pytest.approx(0.5, abs=0.005)

    def test_range(self):
        g = torch.Generator().manual_seed(3)
        for kind in ("uniform", "shift", "logit_normal"):
            t = fc.sample_timesteps(fc.NoiseSchedule(kind=kind, shift=0.3), 1000, g)
            assert float(t.min()) >= 0.0 and float(t.max()) <= 1.0

    def test_unknown_kind_rejected(self):
        with pytest.raises(ValueError):
            fc.NoiseSchedule(kind="cosine")

    def test_scalar_wrapper(self):
        g = torch.Generator().manual_seed(4)
        t = fc.sample_timestep(fc.NoiseSchedule(kind="uniform"), g)
        assert 0.0 <= t <= 1.0


class TestScaleNoise:
    def test_identity_at_one(self):
        eps = randn(4, 4, seed=21)
        assert torch.equal(fc.scale_noise(eps, 1.0), eps)

    def test_doubling(self):
        assert torch.equal(fc.scale_noise(torch.ones(3), 2.0), torch.full((3,), 2.0))

    def test_variance_scaling(self):
        g = torch.Generator().manual_seed(5)
        eps = torch.randn(10**6, generator=g)
        scaled = fc.scale_noise(eps, 3.0)
        assert float(scaled.var()) == pytest.approx(9.0, abs=0.05)

    def test_nonpositive_gamma(self):
        with pytest.raises(ValueError):
            fc.scale_noise(torch.ones(2), 0.0)
        with pytest.raises(ValueError):
            fc.scale_noise(torch.ones(2), -1.0)
