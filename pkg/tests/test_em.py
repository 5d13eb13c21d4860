import itertools

import numpy as np
import pytest
from scipy import optimize

from embp.baselines import bcjr_map, brute_posterior
from embp.channel import BPSK, QPSK, ChannelParams, channel_matrix, random_block, random_blocks
from embp.em import (SIGMA2_FLOOR, EmSchedule, bcd_terms, elbo, em_monotonicity_probe, em_step,
                     embp_op_counts, embp_run, entropy, expected_complete_loglik, expected_residual,
                     update_sigma2, update_tap)
from embp.errors import InvalidParameter
from embp.graph import bp_detect

from conftest import perturbed, random_beliefs


def _enumerated_residual(q, y, h, const):
    """E ||y - H c||^2 under the product distribution q, by full enumeration."""
    N, M = q.shape
    H = channel_matrix(h, N)
    total = 0.0
    for idx in itertools.product(range(M), repeat=N):
        p = np.prod(q[np.arange(N), idx])
        total += p * np.sum(np.abs(y - H @ const.points[list(idx)]) ** 2)
    return total


class TestResidualDecomposition:
    def test_matches_enumeration(self, rng, const):
        for _ in range(5):
            blk = random_block(5, 2, const, rng.uniform(0, 12), rng)
            h = perturbed(blk.truth, rng).h
            q = random_beliefs(rng, 5, const.M)
            got = expected_residual(q, bcd_terms(blk.y, h, const))
            np.testing.assert_allclose(got, _enumerated_residual(q, blk.y, h, const), rtol=1e-12)

    def test_hard_beliefs_give_squared_error(self, rng):
        blk = random_block(9, 3, QPSK, 5.0, rng)
        q = np.eye(4)[blk.indices]
        resid = blk.y - channel_matrix(blk.truth.h, 9) @ blk.symbols
        np.testing.assert_allclose(expected_residual(q, bcd_terms(blk.y, blk.truth.h, QPSK)),
                                   np.sum(np.abs(resid) ** 2), rtol=1e-12)

    def test_exact_pairs_match_joint_expectation(self, rng):
        blk = random_block(6, 2, BPSK, 4.0, rng)
        res = bcjr_map(blk.y, blk.truth, BPSK, pairs=True)
        # with exact pairwise marginals, E||y - Hc||^2 equals the posterior expectation
        H = channel_matrix(blk.truth.h, 6)
        logs, resid = [], []
        for idx in itertools.product(range(2), repeat=6):
            c = BPSK.points[list(idx)]
            r = np.sum(np.abs(blk.y - H @ c) ** 2)
            logs.append(-r / float(blk.truth.sigma2))
            resid.append(r)
        w = np.exp(np.array(logs) - max(logs))
        expected = np.sum(w * resid) / w.sum()
        got = expected_residual(res.beliefs, bcd_terms(blk.y, blk.truth.h), res.pairs)
        np.testing.assert_allclose(got, expected, rtol=1e-10)


class TestClosedFormUpdates:
    def _instance(self, rng, const):
        blk = random_block(7, 2, const, rng.uniform(0, 12), rng)
        theta = perturbed(blk.truth, rng, 0.2)
        res = bcjr_map(blk.y, theta, const, pairs=True)
        return blk, theta, res

    def test_tap_update_is_coordinate_argmax(self, rng, const):
        for _ in range(5):
            blk, theta, res = self._instance(rng, const)
            for ell in range(3):
                def neg_q(v):
                    h = theta.h.copy()
                    h[ell] = v[0] + 1j * v[1]
                    return -expected_complete_loglik(res.beliefs, blk.y, ChannelParams(h, theta.sigma2),
                                                     const, res.pairs)
                num = optimize.minimize(neg_q, [theta.h[ell].real, theta.h[ell].imag], method="BFGS",
                                        options={"gtol": 1e-11}).x
                closed = update_tap(ell, res.beliefs, blk.y, theta.h, const, res.pairs)
                np.testing.assert_allclose([closed.real, closed.imag], num, rtol=1e-6, atol=1e-7)

    def test_sigma2_update_is_argmax(self, rng, const):
        blk, theta, res = self._instance(rng, const)
        terms = bcd_terms(blk.y, theta.h, const)
        closed = update_sigma2(res.beliefs, terms, res.pairs)

        def neg_q(s2):
            return -expected_complete_loglik(res.beliefs, blk.y, ChannelParams(theta.h, s2), const, res.pairs)
        num = optimize.minimize_scalar(neg_q, bracket=(closed / 3, closed * 3), method="golden",
                                       tol=1e-12).x
        np.testing.assert_allclose(closed, num, rtol=1e-6)

    def test_gradient_vanishes_at_update(self, rng):
        blk, theta, res = self._instance(rng, QPSK)
        new = update_tap(1, res.beliefs, blk.y, theta.h, QPSK, res.pairs)
        step = 1e-5

        def q_at(v):
            h = theta.h.copy()
            h[1] = v
            return expected_complete_loglik(res.beliefs, blk.y, ChannelParams(h, theta.sigma2), QPSK, res.pairs)
        for direction in (1, 1j):
            fd = (q_at(new + step * direction) - q_at(new - step * direction)) / (2 * step)
            assert abs(fd) < 1e-6

    def test_sigma2_floor(self, rng):
        blk = random_block(6, 1, BPSK, 10.0, rng)
        y = np.zeros_like(blk.y)
        terms = bcd_terms(y, np.zeros(2), BPSK)
        assert update_sigma2(np.full((6, 2), 0.5), terms) == SIGMA2_FLOOR

    def test_tap_index_checked(self, rng):
        blk = random_block(6, 1, BPSK, 10.0, rng)
        with pytest.raises(InvalidParameter):
            update_tap(2, np.full((6, 2), 0.5), blk.y, blk.truth.h)


class TestEmStep:
    def test_jacobi_uses_current_taps(self, rng):
        blk = random_block(12, 2, QPSK, 6.0, rng)
        theta = perturbed(blk.truth, rng)
        q = bp_detect(blk.y, theta, 4, constellation=QPSK)
        both = em_step(theta, q, blk.y, [1, 1, 0, 0], QPSK)
        np.testing.assert_allclose(both.h[0], update_tap(0, q, blk.y, theta.h, QPSK))
        np.testing.assert_allclose(both.h[1], update_tap(1, q, blk.y, theta.h, QPSK))
        np.testing.assert_array_equal(both.h[2], theta.h[2])
        assert both.sigma2 == theta.sigma2

    def test_momentum_blend(self, rng):
        blk = random_block(12, 1, BPSK, 6.0, rng)
        theta = perturbed(blk.truth, rng)
        q = bp_detect(blk.y, theta, 4)
        full = em_step(theta, q, blk.y, [0, 0, 1])
        half = em_step(theta, q, blk.y, [0, 0, 0.5])
        np.testing.assert_allclose(half.sigma2, 0.5 * full.sigma2 + 0.5 * theta.sigma2)

    def test_zero_weights_change_nothing(self, rng):
        blk = random_block(12, 1, BPSK, 6.0, rng)
        theta = perturbed(blk.truth, rng)
        out = em_step(theta, np.full((12, 2), 0.5), blk.y, np.zeros(3))
        np.testing.assert_array_equal(out.h, theta.h)

    def test_length_checked(self, rng):
        blk = random_block(12, 1, BPSK, 6.0, rng)
        with pytest.raises(InvalidParameter):
            em_step(blk.truth, np.full((12, 2), 0.5), blk.y, np.ones(2))

    def test_monotone_with_exact_posteriors(self, rng):
        for _ in range(5):
            blk = random_block(8, 2, BPSK, rng.uniform(0, 12), rng)
            ev = em_monotonicity_probe(blk.y, perturbed(blk.truth, rng, 0.4))
            assert np.all(np.diff(ev) >= -1e-9)


class TestSchedules:
    def test_serial_cycles(self):
        s = EmSchedule.serial(2)
        assert s.T == 12
        np.testing.assert_array_equal(np.argmax(s.beta_em, axis=1), np.arange(12) % 4)
        assert s.active.sum() == 12

    def test_nonfinite_rejected(self):
        with pytest.raises(InvalidParameter):
            EmSchedule(np.array([[np.nan, 1.0, 1.0]]))


class TestEmbpRun:
    def test_empty_schedule_is_bp_detect(self, rng):
        blk = random_blocks(4, 20, 2, QPSK, 7.0, seed=8)
        res = embp_run(blk.y, blk.truth, EmSchedule.empty(2, 6), constellation=QPSK)
        np.testing.assert_array_equal(res.beliefs, bp_detect(blk.y, blk.truth, 6, constellation=QPSK))
        np.testing.assert_array_equal(res.theta.h, blk.truth.h)

    def test_zero_channel_deadlock(self, rng):
        blk = random_blocks(3, 20, 2, BPSK, 10.0, seed=1)
        res = embp_run(blk.y, ChannelParams(np.zeros(3), 1.0), EmSchedule.serial(2), keep_trace=True)
        np.testing.assert_array_equal(res.beliefs, 0.5)
        assert np.all(res.trace[:, :, :3] == 0)

    def test_trace_shape_and_start(self, rng):
        blk = random_blocks(3, 20, 1, BPSK, 10.0, seed=2)
        res = embp_run(blk.y, blk.truth, EmSchedule.serial(1, 5), keep_trace=True)
        assert res.trace.shape == (6, 3, 3)
        np.testing.assert_array_equal(res.trace[0], blk.truth.as_vector())

    def test_single_block(self, rng):
        blk = random_block(20, 1, BPSK, 10.0, rng)
        res = embp_run(blk.y, blk.truth, EmSchedule.serial(1))
        assert res.beliefs.shape == (20, 2)
        assert res.theta.h.shape == (2,)

    def test_genie_start_stays_close(self, rng):
        blk = random_blocks(50, 100, 2, BPSK, 12.0, seed=3)
        res = embp_run(blk.y, blk.truth, EmSchedule.serial(2))
        err = np.sum(np.abs(res.theta.h - blk.truth.h) ** 2, axis=-1)
        assert np.median(err) < 0.05

    def test_failures_are_masked(self, rng):
        blk = random_blocks(3, 10, 1, BPSK, 10.0, seed=2)
        y = blk.y.copy()
        y[1, 0] = np.nan
        res = embp_run(y, blk.truth, EmSchedule.serial(1), on_failure="mask")
        np.testing.assert_array_equal(res.failed, [False, True, False])

    def test_op_counts_drop_with_masked_entries(self):
        full = EmSchedule.parallel(3, 10)
        pruned = full.beta_em.copy()
        pruned[::2, 1:3] = 0.0
        a = embp_op_counts(100, 3, 2, full)
        b = embp_op_counts(100, 3, 2, EmSchedule(pruned))
        assert b["ADD"] < a["ADD"] and b["MULT"] < a["MULT"]
        assert a["LSE"] == b["LSE"]


class TestElbo:
    def test_bounded_by_evidence(self, rng, const):
        for _ in range(10):
            blk = random_block(6, 2, const, rng.uniform(0, 12), rng)
            theta = perturbed(blk.truth, rng)
            q = random_beliefs(rng, 6, const.M)
            _, logev = brute_posterior(blk.y, theta, const)
            assert elbo(q, blk.y, theta, const) <= logev + 1e-9

    def test_tight_on_memoryless_channel(self, rng):
        blk = random_block(6, 0, QPSK, 3.0, rng)
        exact, logev = brute_posterior(blk.y, blk.truth, QPSK)
        np.testing.assert_allclose(elbo(exact, blk.y, blk.truth, QPSK), logev, rtol=0, atol=1e-8)

    def test_entropy_of_uniform(self):
        np.testing.assert_allclose(entropy(np.full((5, 4), 0.25)), 5 * np.log(4))
