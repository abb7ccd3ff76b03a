import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from modets.counters import OpCounter
from modets.numerics import Parameter, Tensor, backward, finite_diff_grad, spectral_norm_estimate
from modets.ssm import (
    HiddenState,
    LowRankFactors,
    SegmentPlan,
    causal_conv1d,
    dense_apply,
    lowrank_apply,
    lowrank_norm,
    lowrank_spectral_norm,
    ode_integrate_step,
    readout,
    recurrent_scan_dense,
    selective_scan_segmented,
    stability_clamp,
    zoh_discretize,
)


def _factors(rng, d, r, vi=2, vo=2, delta=0.3, D=True):
    return LowRankFactors(rng.normal(size=(d, r)) * 0.3, rng.normal(size=(d, r)) * 0.3,
                          rng.normal(size=(d, vi)), rng.normal(size=(vo, d)),
                          np.ones(vi) if D and vi == vo else None, delta)


class TestLowRankFactors:
    def test_rank_above_state_size_rejected(self):
        with pytest.raises(ValueError):
            LowRankFactors(np.ones((2, 3)), np.ones((2, 3)), np.ones((2, 1)), np.ones((1, 2)))

    def test_non_positive_delta_rejected(self):
        with pytest.raises(ValueError):
            LowRankFactors(np.ones((2, 1)), np.ones((2, 1)), np.ones((2, 1)), np.ones((1, 2)), delta=0.0)

    def test_shape_mismatch_rejected(self):
        with pytest.raises(ValueError):
            LowRankFactors(np.ones((3, 1)), np.ones((2, 1)), np.ones((3, 1)), np.ones((1, 3)))


class TestLowRankApply:
    def test_worked_example(self):
        f = LowRankFactors(np.array([[1.0], [0.0], [2.0]]), np.array([[0.0], [1.0], [1.0]]),
                           np.zeros((3, 1)), np.zeros((1, 3)))
        np.testing.assert_array_equal(lowrank_apply(f, np.ones(3)).data, [2.0, 0.0, 4.0])

    def test_zero_v_gives_zero(self):
        rng = np.random.default_rng(0)
        f = LowRankFactors(rng.normal(size=(4, 2)), np.zeros((4, 2)), np.zeros((4, 1)), np.zeros((1, 4)))
        assert not np.any(lowrank_apply(f, rng.normal(size=4)).data)

    def test_identity_factors(self):
        h = np.array([0.3, -1.0, 2.0])
        f = LowRankFactors(np.eye(3), np.eye(3), np.zeros((3, 1)), np.zeros((1, 3)))
        np.testing.assert_array_equal(lowrank_apply(f, h).data, h)

    def test_counter_charges_two_d_r_per_row(self):
        rng = np.random.default_rng(1)
        f = _factors(rng, 6, 2)
        c = OpCounter()
        lowrank_apply(f, rng.normal(size=(5, 6)), c)
        assert c.state_transition == 5 * 2 * 6 * 2

    @settings(max_examples=50, deadline=None)
    @given(st.integers(1, 8), st.data())
    def test_matches_dense_oracle(self, d, data):
        r = data.draw(st.integers(1, d))
        rng = np.random.default_rng(data.draw(st.integers(0, 2**31 - 1)))
        f = _factors(rng, d, r)
        h = rng.normal(size=d)
        dense = (f.U.data @ f.V.data.T) @ h
        got = lowrank_apply(f, h).data
        assert np.max(np.abs(got - dense)) <= 1e-12 * max(1.0, np.max(np.abs(dense)))

    def test_dense_apply_matches_matmul(self):
        rng = np.random.default_rng(2)
        a, h = rng.normal(size=(4, 4)), rng.normal(size=(3, 4))
        c = OpCounter()
        np.testing.assert_allclose(dense_apply(a, h, c).data, h @ a.T, rtol=1e-14)
        assert c.dense_transition == 3 * 16


def _scalar_factors(a, b, delta):
    # A = U V^T = a for d = r = 1
    u = math.copysign(math.sqrt(abs(a)), a)
    return LowRankFactors(np.array([[u]]), np.array([[math.sqrt(abs(a))]]),
                          np.array([[b]]), np.array([[1.0]]), None, delta)


class TestOdeIntegrate:
    @pytest.mark.parametrize("method", ["euler", "heun"])
    def test_zero_transition_is_exact(self, method):
        f = LowRankFactors(np.zeros((2, 1)), np.zeros((2, 1)), np.eye(2), np.eye(2), None, 1.0)
        out = ode_integrate_step(f, HiddenState(Tensor(np.zeros(2))), np.array([1.0, 2.0]), 4, method)
        np.testing.assert_array_equal(out.h.data, [1.0, 2.0])
        assert out.step_index == 1

    def test_scalar_euler_single_step(self):
        f = _scalar_factors(-1.0, 1.0, 0.5)
        out = ode_integrate_step(f, HiddenState(Tensor(np.zeros(1))), np.ones(1), 1, "euler")
        assert out.h.data[0] == pytest.approx(0.5, abs=1e-15)

    def test_scalar_heun_close_to_closed_form(self):
        f = _scalar_factors(-1.0, 1.0, 0.5)
        out = ode_integrate_step(f, HiddenState(Tensor(np.zeros(1))), np.ones(1), 8, "heun")
        assert abs(out.h.data[0] - (1 - math.exp(-0.5))) < 1e-3

    @pytest.mark.parametrize("method", ["euler", "heun", "discrete"])
    def test_zero_fixed_point(self, method):
        rng = np.random.default_rng(3)
        f = _factors(rng, 4, 2)
        out = ode_integrate_step(f, HiddenState(Tensor(np.zeros(4))), np.zeros(2), 4, method)
        assert not np.any(out.h.data)

    def test_euler_matches_manual_loop(self):
        rng = np.random.default_rng(4)
        f = _factors(rng, 5, 2, delta=0.4)
        h0, x = rng.normal(size=5), rng.normal(size=2)
        A = f.U.data @ f.V.data.T
        h, dt = h0.copy(), 0.4 / 3
        for _ in range(3):
            h = h + dt * (A @ h + f.B.data @ x)
        out = ode_integrate_step(f, HiddenState(Tensor(h0)), x, 3, "euler")
        np.testing.assert_allclose(out.h.data, h, rtol=1e-13)

    def test_heun_order(self):
        a, b, delta, x = -1.3, 0.7, 0.9, 1.0
        exact = (math.expm1(a * delta) / a) * b * x
        errs = []
        for T in (1, 2, 4, 8, 16):
            f = _scalar_factors(a, b, delta)
            h = ode_integrate_step(f, HiddenState(Tensor(np.zeros(1))), np.array([x]), T, "heun").h
            errs.append(abs(h.data[0] - exact))
        orders = [math.log2(e0 / e1) for e0, e1 in zip(errs, errs[1:])]
        assert min(orders) >= 1.8

    def test_bad_method_and_steps(self):
        f = _scalar_factors(-1.0, 1.0, 0.5)
        s = HiddenState(Tensor(np.zeros(1)))
        with pytest.raises(ValueError):
            ode_integrate_step(f, s, np.ones(1), 4, "rk4")
        with pytest.raises(ValueError):
            ode_integrate_step(f, s, np.ones(1), 0)

    def test_gradients_through_heun(self):
        rng = np.random.default_rng(5)
        U, V = Parameter(rng.normal(size=(3, 2)) * 0.4), Parameter(rng.normal(size=(3, 2)) * 0.4)
        B = Parameter(rng.normal(size=(3, 2)))
        dl = Parameter(np.array(0.6))
        h0, x = rng.normal(size=3), rng.normal(size=2)

        def f():
            fac = LowRankFactors(U, V, B, np.eye(3)[:2], None, dl)
            return ode_integrate_step(fac, HiddenState(Tensor(h0)), x, 3, "heun").h.square().sum()

        for p in (U, V, B, dl):
            p.grad = None
        backward(f())
        for p in (U, V, B, dl):
            np.testing.assert_allclose(p.grad, finite_diff_grad(f, p, 1e-6), rtol=1e-6, atol=1e-9)


class TestZoh:
    def test_worked_example(self):
        a_bar, b_bar = zoh_discretize(np.array([-1.0]), np.array([[1.0]]), 0.5)
        assert a_bar.data[0] == pytest.approx(math.exp(-0.5), abs=1e-12)
        assert b_bar.data[0, 0] == pytest.approx(1 - math.exp(-0.5), abs=1e-12)

    def test_zero_rate_limit(self):
        _, b_bar = zoh_discretize(np.array([0.0]), np.array([[2.0]]), 0.5)
        assert b_bar.data[0, 0] == pytest.approx(1.0, abs=1e-15)

    def test_small_step_limit(self):
        a_bar, b_bar = zoh_discretize(np.array([-2.0]), np.array([[1.0]]), 1e-12)
        assert a_bar.data[0] == pytest.approx(1.0) and abs(b_bar.data[0, 0]) < 1e-11

    def test_rejects_non_positive_delta(self):
        with pytest.raises(ValueError):
            zoh_discretize(np.array([-1.0]), np.array([[1.0]]), 0.0)

    @settings(max_examples=100, deadline=None)
    @given(st.floats(-5.0, 0.0), st.floats(1e-3, 5.0), st.floats(-3.0, 3.0))
    def test_closed_form(self, a, delta, b):
        a_bar, b_bar = zoh_discretize(np.array([a]), np.array([[b]]), delta)
        ref_b = delta * b if a == 0 else math.expm1(a * delta) / a * b
        assert abs(a_bar.data[0] - math.exp(a * delta)) <= 1e-9
        assert abs(b_bar.data[0, 0] - ref_b) <= 1e-9

    def test_per_step_delta_broadcast(self):
        a = np.array([-1.0, -0.5])
        b = np.ones((2, 3))
        delta = np.array([[0.1], [0.2]])
        a_bar, b_bar = zoh_discretize(a, b, delta)
        assert a_bar.shape == (2, 2) and b_bar.shape == (2, 2, 3)
        np.testing.assert_allclose(a_bar.data[1], np.exp(0.2 * a))


class TestRecurrentScan:
    def test_hand_unrolled(self):
        ys = recurrent_scan_dense(np.array([0.5]), np.array([[1.0]]), np.array([[1.0]]), None,
                                  np.array([[1.0], [0.0], [0.0]]))
        np.testing.assert_allclose(ys.data[:, 0], [1.0, 0.5, 0.25])

    def test_zero_input(self):
        rng = np.random.default_rng(0)
        ys = recurrent_scan_dense(rng.uniform(size=3), rng.normal(size=(3, 2)), rng.normal(size=(2, 3)),
                                  np.ones(2), np.zeros((5, 2)))
        assert not np.any(ys.data)

    def test_pure_skip(self):
        xs = np.random.default_rng(1).normal(size=(4, 2))
        ys = recurrent_scan_dense(np.ones(3), np.ones((3, 2)), np.zeros((2, 3)), np.eye(2), xs)
        np.testing.assert_array_equal(ys.data, xs)

    def test_matches_scalar_loop(self):
        rng = np.random.default_rng(2)
        a, b, c = rng.uniform(0, 1, 3), rng.normal(size=(3, 2)), rng.normal(size=(2, 3))
        xs = rng.normal(size=(6, 2))
        h, ref = np.zeros(3), []
        for x in xs:
            h = a * h + b @ x
            ref.append(c @ h + 0.5 * x)
        ys = recurrent_scan_dense(a, b, c, np.full(2, 0.5), xs)
        np.testing.assert_allclose(ys.data, ref, rtol=1e-13)


def _loop_reference(f, xs, T, method):
    h = HiddenState(Tensor(np.zeros((xs.shape[0], f.d))))
    ys = []
    for t in range(xs.shape[1]):
        h = ode_integrate_step(f, h, xs[:, t], T, method)
        ys.append(readout(f, h.h, Tensor(xs[:, t])).data)
    return np.stack(ys, axis=1)


class TestSegmentPlan:
    def test_worked_example(self):
        plan = SegmentPlan.build(np.array([0.9, 0.1, 0.2, 0.8]), 2, 1)
        assert [s.tolist() for s in plan.selected] == [[0], [3]]

    def test_ties_go_to_earlier_index(self):
        plan = SegmentPlan.build(np.array([0.5, 0.5, 0.5, 0.1, 0.5, 0.5]), 3, 2)
        assert [s.tolist() for s in plan.selected] == [[0, 1], [4, 5]]

    @settings(max_examples=60, deadline=None)
    @given(st.integers(1, 30), st.integers(1, 8), st.data())
    def test_counts_and_top_k(self, L, S, data):
        k = data.draw(st.integers(0, S))
        scores = np.array(data.draw(st.lists(st.sampled_from([0.0, 0.25, 0.5, 1.0]), min_size=L, max_size=L)))
        plan = SegmentPlan.build(scores, S, k)
        for start, sel in zip(range(0, L, S), plan.selected):
            seg = scores[start:start + S]
            assert len(sel) == min(k, len(seg))
            rest = np.setdiff1d(np.arange(start, start + len(seg)), sel)
            if len(sel) and len(rest):
                assert scores[sel].min() >= scores[rest].max()
        assert plan.full_update_count == sum(min(k, len(scores[s:s + S])) for s in range(0, L, S))

    def test_invalid_k(self):
        with pytest.raises(ValueError):
            SegmentPlan.build(np.ones(4), 2, 3)


class TestSelectiveScan:
    @pytest.mark.parametrize("method", ["euler", "heun"])
    def test_full_selection_is_bitwise_loop(self, method):
        rng = np.random.default_rng(0)
        f = _factors(rng, 4, 2)
        xs = rng.normal(size=(3, 8, 2))
        plan = SegmentPlan.build(rng.uniform(size=(3, 8)), 4, 4)
        ys, stats = selective_scan_segmented(f, xs, plan, a_decay=-np.ones(4), ode_steps=3, method=method)
        np.testing.assert_array_equal(ys.data, _loop_reference(f, xs, 3, method))
        assert stats.full_updates == 24 and stats.decay_updates == 0

    def test_half_selection_halves_work(self):
        rng = np.random.default_rng(1)
        f = _factors(rng, 4, 2)
        xs = rng.normal(size=(2, 16, 2))
        scores = rng.uniform(size=(2, 16))
        _, full = selective_scan_segmented(f, xs, SegmentPlan.build(scores, 8, 8), a_decay=-np.ones(4))
        _, half = selective_scan_segmented(f, xs, SegmentPlan.build(scores, 8, 4), a_decay=-np.ones(4))
        assert half.full_updates * 2 == full.full_updates
        assert half.state_transition * 2 == full.state_transition
        assert half.selection > 0 and full.selection == 0

    def test_zero_selection_keeps_state_zero(self):
        rng = np.random.default_rng(2)
        f = _factors(rng, 4, 2)
        xs = rng.normal(size=(6, 2))
        ys, _, states = selective_scan_segmented(f, xs, SegmentPlan.build(np.ones(6), 3, 0),
                                                 a_decay=-np.ones(4), return_states=True)
        assert not np.any(states.data)
        np.testing.assert_array_equal(ys.data, xs)

    def test_unselected_steps_decay(self):
        rng = np.random.default_rng(3)
        f = _factors(rng, 3, 1, delta=0.5)
        xs = rng.normal(size=(4, 2))
        a = -np.array([0.2, 0.5, 1.0])
        plan = SegmentPlan.build(np.array([1.0, 0.0, 0.0, 0.0]), 4, 1)
        _, _, states = selective_scan_segmented(f, xs, plan, a_decay=a, return_states=True)
        h = states.data
        for t in (1, 2, 3):
            np.testing.assert_allclose(h[t], h[t - 1] * np.exp(0.5 * a), rtol=1e-14)

    def test_mixed_batch_rows_match_single_rows(self):
        rng = np.random.default_rng(4)
        f = _factors(rng, 4, 2)
        xs = rng.normal(size=(3, 8, 2))
        scores = rng.uniform(size=(3, 8))
        ys, _ = selective_scan_segmented(f, xs, SegmentPlan.build(scores, 4, 2), a_decay=-np.ones(4))
        for i in range(3):
            yi, _ = selective_scan_segmented(f, xs[i], SegmentPlan.build(scores[i], 4, 2), a_decay=-np.ones(4))
            np.testing.assert_allclose(ys.data[i], yi.data, rtol=1e-14)

    def test_per_step_factors(self):
        rng = np.random.default_rng(5)
        B_, L, d, r = 2, 5, 3, 2
        f = LowRankFactors(rng.normal(size=(B_, L, d, r)) * 0.3, rng.normal(size=(B_, L, d, r)) * 0.3,
                           rng.normal(size=(B_, L, d, 2)), rng.normal(size=(B_, L, 2, d)), np.ones(2),
                           rng.uniform(0.1, 1.0, size=(B_, L)))
        xs = rng.normal(size=(B_, L, 2))
        ys, _ = selective_scan_segmented(f, xs, SegmentPlan.full((B_, L)), ode_steps=2, method="euler")
        for b in range(B_):
            h = np.zeros(d)
            for t in range(L):
                A = f.U.data[b, t] @ f.V.data[b, t].T
                dt = f.delta.data[b, t] / 2
                for _ in range(2):
                    h = h + dt * (A @ h + f.B.data[b, t] @ xs[b, t])
                y = f.C.data[b, t] @ h + xs[b, t]
                np.testing.assert_allclose(ys.data[b, t], y, rtol=1e-12)

    def test_causal_with_full_selection(self):
        rng = np.random.default_rng(6)
        f = _factors(rng, 4, 2)
        xs = rng.normal(size=(10, 2))
        plan = SegmentPlan.full((10,))
        base, _ = selective_scan_segmented(f, xs, plan)
        xs2 = xs.copy()
        xs2[6] += 1.0
        pert, _ = selective_scan_segmented(f, xs2, plan)
        np.testing.assert_array_equal(base.data[:6], pert.data[:6])
        assert np.all(np.any(base.data[6:] != pert.data[6:], axis=-1))

    def test_plan_length_must_match(self):
        rng = np.random.default_rng(7)
        with pytest.raises(ValueError):
            selective_scan_segmented(_factors(rng, 2, 1), rng.normal(size=(5, 2)), SegmentPlan.full((4,)))


class TestCounters:
    @pytest.mark.parametrize("d,r,L,T", [(8, 2, 5, 4), (16, 4, 3, 2), (6, 6, 7, 1)])
    def test_euler_transition_count(self, d, r, L, T):
        rng = np.random.default_rng(0)
        f = _factors(rng, d, r)
        c = OpCounter()
        selective_scan_segmented(f, rng.normal(size=(L, 2)), SegmentPlan.full((L,)), ode_steps=T,
                                 method="euler", counter=c)
        assert c.state_transition == 2 * L * T * d * r
        assert c.input_injection == L * d * 2 and c.output_map == L * d * 2 and c.skip == L * 2

    def test_heun_spends_two_applications_per_substep(self):
        rng = np.random.default_rng(1)
        f = _factors(rng, 4, 2)
        c = OpCounter()
        selective_scan_segmented(f, rng.normal(size=(3, 2)), SegmentPlan.full((3,)), ode_steps=2,
                                 method="heun", counter=c)
        assert c.state_transition == 2 * (2 * 3 * 2 * 4 * 2)

    def test_addition_and_merge(self):
        a, b = OpCounter(state_transition=3, skip=1), OpCounter(state_transition=4, selection=2)
        s = a + b
        assert (s.state_transition, s.skip, s.selection) == (7, 1, 2)
        a.merge(b)
        assert a == s and s.multiply_adds == 8


class TestCausalConv:
    def test_identity_kernel(self):
        xs = np.random.default_rng(0).normal(size=(5, 2))
        k = np.zeros((3, 2))
        k[-1] = 1.0
        np.testing.assert_array_equal(causal_conv1d(xs, k, np.zeros(2)).data, xs)

    def test_running_sum(self):
        out = causal_conv1d(np.array([[1.0], [2.0], [3.0]]), np.ones((3, 1)))
        np.testing.assert_array_equal(out.data[:, 0], [1.0, 3.0, 6.0])

    def test_impulse_response(self):
        out = causal_conv1d(np.array([[1.0], [0.0], [0.0], [0.0]]), np.array([[2.0], [3.0], [5.0]]))
        np.testing.assert_array_equal(out.data[:, 0], [5.0, 3.0, 2.0, 0.0])

    def test_matches_numpy_convolve(self):
        rng = np.random.default_rng(1)
        xs, k = rng.normal(size=(9, 3)), rng.normal(size=(4, 3))
        out = causal_conv1d(xs, k).data
        for c in range(3):
            ref = np.convolve(xs[:, c], k[::-1, c])[:9]
            np.testing.assert_allclose(out[:, c], ref, rtol=1e-13)

    def test_gradients(self):
        rng = np.random.default_rng(2)
        xs = Parameter(rng.normal(size=(2, 6, 3)))
        k, b = Parameter(rng.normal(size=(3, 3))), Parameter(rng.normal(size=3))

        def f():
            return causal_conv1d(xs, k, b).square().sum()

        for p in (xs, k, b):
            p.grad = None
        backward(f())
        for p in (xs, k, b):
            np.testing.assert_allclose(p.grad, finite_diff_grad(f, p, 1e-6), rtol=1e-7, atol=1e-8)


class TestStabilityClamp:
    def test_identity_factors_scaled_to_alpha(self):
        f = LowRankFactors(np.eye(3), np.eye(3), np.ones((3, 1)), np.ones((1, 3)))
        g = stability_clamp(f, 0.9)
        assert abs(float(lowrank_norm(g)) - 0.9) < 1e-6
        assert abs(np.linalg.norm(g.U.data @ g.V.data.T, 2) - 0.9) < 1e-6

    def test_zero_factors_unchanged(self):
        f = LowRankFactors(np.zeros((3, 1)), np.zeros((3, 1)), np.ones((3, 1)), np.ones((1, 3)))
        assert stability_clamp(f, 0.9) is f

    def test_small_norm_is_noop(self):
        f = LowRankFactors(np.eye(2) * 0.5, np.eye(2), np.ones((2, 1)), np.ones((1, 2)))
        g = stability_clamp(f, 0.9)
        np.testing.assert_array_equal(g.U.data, f.U.data)

    def test_stacked_factors(self):
        rng = np.random.default_rng(0)
        f = LowRankFactors(rng.normal(size=(5, 4, 2)), rng.normal(size=(5, 4, 2)),
                           np.ones((4, 1)), np.ones((1, 4)))
        g = stability_clamp(f, 0.8)
        norms = np.linalg.norm(g.U.data @ np.swapaxes(g.V.data, -1, -2), 2, axis=(-2, -1))
        assert np.all(norms <= 0.8 * (1 + 1e-6))

    def test_alpha_range(self):
        f = LowRankFactors(np.eye(2), np.eye(2), np.ones((2, 1)), np.ones((1, 2)))
        with pytest.raises(ValueError):
            stability_clamp(f, 1.0)

    @settings(max_examples=60, deadline=None)
    @given(st.integers(1, 8), st.data())
    def test_clamped_norm_never_exceeds_alpha(self, d, data):
        r = data.draw(st.integers(1, d))
        seed = data.draw(st.integers(0, 2**31 - 1))
        alpha = data.draw(st.floats(0.05, 0.99))
        rng = np.random.default_rng(seed)
        scale = data.draw(st.floats(1e-3, 1e3))
        f = LowRankFactors(rng.normal(size=(d, r)) * scale, rng.normal(size=(d, r)),
                           np.ones((d, 1)), np.ones((1, d)))
        g = stability_clamp(f, alpha)
        assert np.linalg.norm(g.U.data @ g.V.data.T, 2) <= alpha * (1 + 1e-12)


class TestLowRankSpectralNorm:
    @settings(max_examples=60, deadline=None)
    @given(st.integers(1, 8), st.data())
    def test_matches_full_svd(self, d, data):
        r = data.draw(st.integers(1, d))
        rng = np.random.default_rng(data.draw(st.integers(0, 2**31 - 1)))
        U, V = rng.normal(size=(d, r)), rng.normal(size=(d, r))
        ref = np.linalg.svd(U @ V.T, compute_uv=False)[0]
        assert abs(lowrank_spectral_norm(U, V) - ref) <= 1e-12 * ref

    def test_stacked(self):
        rng = np.random.default_rng(1)
        U, V = rng.normal(size=(3, 4, 6, 2)), rng.normal(size=(3, 4, 6, 2))
        ref = np.linalg.norm(U @ np.swapaxes(V, -1, -2), 2, axis=(-2, -1))
        np.testing.assert_allclose(lowrank_spectral_norm(U, V), ref, rtol=1e-12)

    def test_rank_one_closed_form(self):
        u, v = np.array([[3.0], [4.0]]), np.array([[1.0], [0.0]])
        assert lowrank_spectral_norm(u, v) == pytest.approx(5.0, rel=1e-15)


class TestSpectralNormExamples:
    def test_diagonal(self):
        assert abs(spectral_norm_estimate(np.diag([0.5, 0.2])) - 0.5) < 1e-6

    def test_nilpotent(self):
        assert abs(spectral_norm_estimate(np.array([[0.0, 1.0], [0.0, 0.0]])) - 1.0) < 1e-6

    def test_zero(self):
        assert spectral_norm_estimate(np.zeros((3, 3))) == 0.0
