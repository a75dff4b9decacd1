import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from momentum_ssm.gradient_lab import finite_diff_oracle
from momentum_ssm.numkit import ContractError, Rng
from momentum_ssm.selective_ssm import (
    SelectiveParams,
    discretize_zoh,
    init_selective_params,
    inverse_softplus,
    readout,
    selective_projections,
    ssm_backward,
    ssm_forward,
)

PARAM_NAMES = ("a_log", "w_b", "w_c", "w_delta", "theta_delta", "skip")


def scalar_params(delta=1.0, w_b=1.0, w_c=1.0, skip=0.0):
    return SelectiveParams(
        a_log=np.zeros((1, 1)), w_b=np.full((1, 1), w_b), w_c=np.full((1, 1), w_c),
        w_delta=np.zeros(1), theta_delta=inverse_softplus([delta]), skip=np.full(1, skip),
    )


def frozen_params(rng, D, N):
    """Projections read only input channel 0, which callers hold at 1."""
    p = init_selective_params(D, N, rng, dt_min=0.05, dt_max=0.5)
    mask = np.zeros(D)
    mask[0] = 1.0
    return SelectiveParams(p.a_log, p.w_b * mask, p.w_c * mask, p.w_delta * mask,
                           p.theta_delta, p.skip)


def relative_errors(analytic, numeric, floor=1e-8):
    keep = np.abs(analytic) > floor
    return np.abs(analytic - numeric)[keep] / np.abs(analytic)[keep]


class TestProjections:
    def test_zero_input(self):
        p = init_selective_params(4, 3, Rng(0))
        delta, b, c = selective_projections(p, np.zeros(4))
        np.testing.assert_allclose(delta, np.logaddexp(0.0, p.theta_delta), rtol=1e-15)
        assert not np.any(b) and not np.any(c)

    def test_zero_bias_gives_log_two(self):
        p = init_selective_params(3, 2, Rng(1))
        p = SelectiveParams(p.a_log, p.w_b, p.w_c, np.zeros(3), np.zeros(3), p.skip)
        delta, _, _ = selective_projections(p, Rng(2).normal(3))
        np.testing.assert_array_equal(delta, np.full(3, math.log(2.0)))

    def test_identity_projection(self):
        p = init_selective_params(3, 3, Rng(1))
        p = SelectiveParams(p.a_log, np.eye(3), np.eye(3), p.w_delta, p.theta_delta, p.skip)
        _, b, c = selective_projections(p, np.array([0.0, 1.0, 0.0]))
        np.testing.assert_array_equal(b, [0.0, 1.0, 0.0])
        np.testing.assert_array_equal(c, [0.0, 1.0, 0.0])

    def test_steps_positive_for_extreme_inputs(self):
        p = init_selective_params(4, 2, Rng(3))
        delta, _, _ = selective_projections(p, np.full(4, -1e3) * np.sign(p.w_delta))
        assert np.all(delta > 0)

    def test_init_follows_conventions(self):
        p = init_selective_params(5, 4, Rng(4))
        np.testing.assert_allclose(p.a, -np.tile(np.arange(1.0, 5.0), (5, 1)), rtol=1e-15)
        dt = np.logaddexp(0.0, p.theta_delta)
        assert np.all((dt >= 1e-3 * (1 - 1e-12)) & (dt <= 1e-1 * (1 + 1e-12)))
        np.testing.assert_array_equal(p.skip, np.ones(5))


class TestDiscretize:
    def test_decay(self):
        a_bar, b_scale = discretize_zoh(-2.0, 0.1)
        assert a_bar == 0.8187307530779818
        assert b_scale == 0.1

    def test_exact_input_scale(self):
        _, b_scale = discretize_zoh(-2.0, 0.1, exact=True)
        assert abs(b_scale - (math.exp(-0.2) - 1.0) / -2.0) <= 1e-16
        assert abs(b_scale - 0.0906346234) <= 1e-10

    def test_approximation_gap(self):
        _, exact = discretize_zoh(-2.0, 0.1, exact=True)
        _, approx = discretize_zoh(-2.0, 0.1)
        assert abs(abs(exact - approx) / approx - 0.0936537660) <= 1e-9

    @settings(max_examples=300, deadline=None)
    @given(a=st.floats(-10.0, -1e-6), delta=st.floats(1e-6, 1.0))
    def test_first_order_bound(self, a, delta):
        if abs(delta * a) > 0.1:
            return
        _, exact = discretize_zoh(a, delta, exact=True)
        _, approx = discretize_zoh(a, delta)
        # the gap is |delta a| / 2 to leading order, so allow rounding slack
        assert abs(exact - approx) / approx <= 0.5 * abs(delta * a) + 1e-15

    @settings(max_examples=200, deadline=None)
    @given(a=st.floats(-50.0, -1e-6), delta=st.floats(1e-6, 10.0))
    def test_decay_strictly_inside_unit_interval(self, a, delta):
        a_bar, _ = discretize_zoh(a, delta)
        assert 0.0 <= a_bar < 1.0

    @pytest.mark.parametrize("a, delta", [(0.0, 0.1), (1.0, 0.1), (-1.0, 0.0), (-1.0, -0.1)])
    def test_domain(self, a, delta):
        with pytest.raises(ContractError):
            discretize_zoh(a, delta)


class TestForward:
    def test_zero_input(self):
        p = init_selective_params(4, 8, Rng(0))
        y, _ = ssm_forward(p, np.zeros((10, 4)))
        assert not np.any(y)

    def test_hand_recurrence(self):
        # delta = 1, a = -1, B_n = x_n so the drive is x_n^2 = [1, 0]
        p = scalar_params()
        y, cache = ssm_forward(p, np.array([[1.0], [0.0]]))
        np.testing.assert_allclose(cache.h[:, 0, 0, 0], [1.0, math.exp(-1.0)], rtol=1e-15)
        assert y[0, 0] == pytest.approx(1.0, rel=1e-15)
        cache.c = np.ones_like(cache.c)  # hold C at 1 for the second step
        np.testing.assert_allclose(readout(p, cache, cache.h)[:, 0], [1.0, 0.36787944117144233], rtol=1e-15)

    @pytest.mark.parametrize("exact", [False, True])
    def test_parallel_matches_sequential(self, exact):
        rng = Rng(5)
        p = init_selective_params(4, 8, rng)
        x = rng.normal((3, 257, 4))
        y_par, _ = ssm_forward(p, x, exact=exact, parallel=True)
        y_seq, _ = ssm_forward(p, x, exact=exact, parallel=False)
        np.testing.assert_allclose(y_par, y_seq, rtol=1e-9, atol=1e-9)

    def test_batched_matches_unbatched(self):
        rng = Rng(6)
        p = init_selective_params(3, 4, rng)
        x = rng.normal((2, 20, 3))
        y, _ = ssm_forward(p, x)
        for b in range(2):
            np.testing.assert_allclose(ssm_forward(p, x[b])[0], y[b], rtol=1e-14)

    def test_matches_stepwise_loop(self):
        rng = Rng(7)
        p = init_selective_params(3, 5, rng)
        x = rng.normal((30, 3))
        y, _ = ssm_forward(p, x)
        h = np.zeros((3, 5))
        for n in range(30):
            delta = np.logaddexp(0.0, p.theta_delta + p.w_delta @ x[n])
            b, c = p.w_b @ x[n], p.w_c @ x[n]
            h = np.exp(delta[:, None] * p.a) * h + delta[:, None] * b[None] * x[n][:, None]
            np.testing.assert_allclose(y[n], h @ c + p.skip * x[n], rtol=1e-11, atol=1e-13)

    def test_superposition_with_frozen_projections(self):
        rng = Rng(8)
        D, N, L = 4, 6, 40
        p = frozen_params(rng, D, N)

        def run(u):
            x = np.concatenate([np.ones((L, 1)), u], axis=1)
            return ssm_forward(p, x)[0][:, 1:]

        u1, u2 = rng.normal((L, D - 1)), rng.normal((L, D - 1))
        zero = run(np.zeros((L, D - 1)))
        lhs = run(2.0 * u1 - 0.5 * u2) - zero
        rhs = 2.0 * (run(u1) - zero) - 0.5 * (run(u2) - zero)
        np.testing.assert_allclose(lhs, rhs, rtol=1e-10, atol=1e-10)

    def test_superposition_fails_with_active_projections(self):
        rng = Rng(9)
        p = init_selective_params(4, 6, rng)
        u1, u2 = rng.normal((40, 4)), rng.normal((40, 4))
        lhs = ssm_forward(p, u1 + u2)[0]
        rhs = ssm_forward(p, u1)[0] + ssm_forward(p, u2)[0]
        assert np.max(np.abs(lhs - rhs)) > 1e-3

    def test_decay_products_shrink_with_horizon(self):
        rng = Rng(10)
        p = init_selective_params(4, 8, rng)
        _, cache = ssm_forward(p, rng.normal((64, 4)))
        assert np.all((cache.a_bar > 0) & (cache.a_bar < 1))
        prods = np.cumprod(cache.a_bar[:, 0], axis=0)
        assert np.all(np.diff(prods, axis=0) < 0)

    @pytest.mark.parametrize("shape", [(5, 3), (2, 5, 4, 1), (0, 4)])
    def test_rejects_bad_shapes(self, shape):
        p = init_selective_params(4, 2, Rng(0))
        with pytest.raises(ContractError):
            ssm_forward(p, np.ones(shape))

    def test_rejects_non_finite(self):
        p = init_selective_params(2, 2, Rng(0))
        x = np.ones((3, 2))
        x[1, 0] = np.nan
        with pytest.raises(ContractError):
            ssm_forward(p, x)


class TestBackward:
    def test_zero_upstream_gradient(self):
        rng = Rng(11)
        p = init_selective_params(3, 4, rng)
        x = rng.normal((12, 3))
        _, cache = ssm_forward(p, x)
        grads, gx = ssm_backward(p, cache, np.zeros((12, 3)))
        for g in grads.values():
            assert not np.any(g)
        assert not np.any(gx)

    def test_single_step_readout_gradient(self):
        # y = C . h + skip x, so dL/dC_1 = gy * h_1 and dL/dw_c = outer(dL/dC_1, x_1)
        rng = Rng(12)
        p = init_selective_params(3, 4, rng)
        x = rng.normal((1, 3))
        gy = rng.normal((1, 3))
        _, cache = ssm_forward(p, x)
        grads, _ = ssm_backward(p, cache, gy)
        g_c = gy[0] @ cache.h[0, 0]
        np.testing.assert_allclose(grads["w_c"], np.outer(g_c, x[0]), rtol=1e-13)
        np.testing.assert_allclose(grads["skip"], gy[0] * x[0], rtol=1e-15)

    def test_stale_cache_rejected(self):
        rng = Rng(13)
        p = init_selective_params(2, 2, rng)
        x = rng.normal((4, 2))
        _, cache = ssm_forward(p, x)
        other = SelectiveParams(p.a_log, p.w_b, p.w_c, p.w_delta, p.theta_delta, p.skip + 1.0)
        with pytest.raises(ContractError):
            ssm_backward(other, cache, np.ones((4, 2)))
        with pytest.raises(ContractError):
            ssm_backward(p, cache, np.ones((4, 2)), x=x + 1.0)

    @pytest.mark.parametrize("seed", range(20))
    @pytest.mark.parametrize("exact", [False, True])
    def test_matches_finite_differences(self, seed, exact):
        rng = Rng(100 + seed)
        D, N, L = 4, 8, 32
        p = init_selective_params(D, N, rng, dt_min=0.01, dt_max=0.5)
        x = rng.normal((L, D))
        gy = rng.normal((L, D))
        _, cache = ssm_forward(p, x, exact=exact)
        grads, gx = ssm_backward(p, cache, gy, x)
        values = p.as_dict()

        for name in PARAM_NAMES:
            def loss(v, name=name):
                q = SelectiveParams(**{**values, name: v})
                return float(np.sum(ssm_forward(q, x, exact=exact)[0] * gy))

            num = finite_diff_oracle(loss, values[name], step=1e-5)
            errs = relative_errors(grads[name], num)
            assert errs.size == 0 or errs.max() <= 1e-4, name

        num_x = finite_diff_oracle(lambda v: float(np.sum(ssm_forward(p, v, exact=exact)[0] * gy)), x, 1e-5)
        assert relative_errors(gx, num_x).max() <= 1e-4

    def test_state_gradient_is_reverse_adjoint(self):
        rng = Rng(14)
        p = init_selective_params(2, 3, rng)
        x = rng.normal((15, 2))
        gy = rng.normal((15, 2))
        _, cache = ssm_forward(p, x)
        ssm_backward(p, cache, gy)
        lam = cache.extra["state_grad"].reshape(15, 1, 2, 3)
        direct = gy[:, None, :, None] * cache.c[:, :, None, :]
        ref = np.zeros_like(lam)
        ref[-1] = direct[-1]
        for n in range(13, -1, -1):
            ref[n] = direct[n] + cache.a_bar[n + 1] * ref[n + 1]
        np.testing.assert_allclose(lam, ref, rtol=1e-12, atol=1e-15)
