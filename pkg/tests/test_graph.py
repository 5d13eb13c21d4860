import itertools

import numpy as np
import pytest

from embp.baselines import brute_posterior
from embp.channel import BPSK, QPSK, ChannelParams, channel_matrix, random_block, random_blocks
from embp.errors import InvalidParameter, NumericalFailure
from embp.graph import (FACTOR_CLAMP, bp_detect, bp_init, bp_iteration, build_graph,
                        compute_beliefs, graph_for, op_counters, with_sigma2)
from embp.channel import matched_stats


def _sequence_score(graph, idx):
    """Sum of local and pairwise log factors for one symbol-index sequence (batch 0)."""
    N, L = graph.N, graph.L
    total = sum(graph.F[0, n, idx[n]] for n in range(N))
    for n in range(N):
        for d in range(1, L + 1):
            if n - d >= 0:
                total += graph.I[0, n, d - 1, idx[n], idx[n - d]]
    return total


class TestFactorTables:
    def test_factors_reproduce_likelihood(self, rng, const):
        blk = random_block(5, 2, const, 6.0, rng)
        graph = graph_for(blk.y, blk.truth, const)
        H = channel_matrix(blk.truth.h, 5)
        s2 = float(blk.truth.sigma2)
        offset = np.sum(np.abs(blk.y) ** 2) / s2
        for idx in itertools.islice(itertools.product(range(const.M), repeat=5), 40):
            c = const.points[list(idx)]
            direct = -np.sum(np.abs(blk.y - H @ c) ** 2) / s2
            np.testing.assert_allclose(_sequence_score(graph, idx) - offset, direct, rtol=1e-12)

    def test_clamped(self, rng):
        blk = random_block(6, 1, BPSK, 10.0, rng)
        graph = build_graph(matched_stats(blk.y * 1e6, blk.truth.h), 1e-9)
        assert np.abs(graph.F).max() <= FACTOR_CLAMP
        assert np.abs(graph.I).max() <= FACTOR_CLAMP

    def test_rejects_nonpositive_sigma2(self, rng):
        blk = random_block(6, 1, BPSK, 10.0, rng)
        with pytest.raises(InvalidParameter):
            build_graph(matched_stats(blk.y, blk.truth.h), 0.0)

    def test_with_sigma2_matches_rebuild(self, rng):
        blk = random_block(8, 2, QPSK, 4.0, rng)
        g = graph_for(blk.y, blk.truth, QPSK)
        fresh = graph_for(blk.y, ChannelParams(blk.truth.h, 0.37), QPSK)
        np.testing.assert_array_equal(with_sigma2(g, 0.37).F, fresh.F)
        np.testing.assert_array_equal(with_sigma2(g, 0.37).I, fresh.I)

    def test_factor_count(self, rng):
        blk = random_block(10, 3, BPSK, 4.0, rng)
        assert graph_for(blk.y, blk.truth).num_factors == 9 + 8 + 7


class TestBeliefPropagation:
    def test_memoryless_channel_is_exact(self, rng, const):
        for _ in range(10):
            blk = random_block(6, 0, const, rng.uniform(0, 12), rng)
            exact, _ = brute_posterior(blk.y, blk.truth, const)
            for T in (1, 3):
                np.testing.assert_allclose(bp_detect(blk.y, blk.truth, T, constellation=const), exact, atol=1e-12)

    def test_chain_is_exact_after_enough_iterations(self, rng, const):
        # L = 1 gives a chain, a tree
        for _ in range(5):
            blk = random_block(6, 1, const, rng.uniform(0, 12), rng)
            exact, _ = brute_posterior(blk.y, blk.truth, const)
            np.testing.assert_allclose(bp_detect(blk.y, blk.truth, 8, constellation=const), exact, atol=1e-10)

    def test_beliefs_are_distributions(self, rng):
        blk = random_blocks(4, 20, 3, QPSK, 5.0, seed=1)
        b = bp_detect(blk.y, blk.truth, 5, constellation=QPSK)
        assert b.shape == (4, 20, 4)
        np.testing.assert_allclose(b.sum(-1), 1.0)
        assert np.all(b >= 0)

    def test_unit_momentum_is_plain_bp(self, rng):
        blk = random_blocks(3, 15, 2, BPSK, 8.0, seed=4)
        np.testing.assert_array_equal(bp_detect(blk.y, blk.truth, 6),
                                      bp_detect(blk.y, blk.truth, 6, np.ones(6)))

    def test_zero_momentum_is_noop(self, rng):
        blk = random_blocks(2, 15, 2, BPSK, 8.0, seed=5)
        graph = graph_for(blk.y, blk.truth)
        state = bp_iteration(graph, bp_init(graph))
        after = bp_iteration(graph, state, beta_bp=0.0)
        for a, b in zip(state.arrays(), after.arrays()):
            np.testing.assert_array_equal(a, b)

    def test_momentum_preserves_fixed_point(self, rng):
        blk = random_block(8, 1, BPSK, 6.0, rng)
        graph = graph_for(blk.y, blk.truth)
        state = bp_init(graph)
        for _ in range(30):
            state = bp_iteration(graph, state)
        damped = bp_iteration(graph, state, beta_bp=0.4)
        np.testing.assert_allclose(compute_beliefs(graph, damped), compute_beliefs(graph, state), atol=1e-12)

    def test_schedule_length_checked(self, rng):
        blk = random_block(8, 1, BPSK, 6.0, rng)
        with pytest.raises(InvalidParameter):
            bp_detect(blk.y, blk.truth, 3, np.ones(2))

    def test_nonfinite_message_raises_or_masks(self, rng):
        blk = random_blocks(3, 8, 1, BPSK, 6.0, seed=3)
        graph = graph_for(blk.y, blk.truth)
        graph.F[1, 2, 0] = np.nan
        with pytest.raises(NumericalFailure) as info:
            bp_iteration(graph, bp_init(graph), iteration=4)
        assert info.value.iteration == 4
        state, failed = bp_iteration(graph, bp_init(graph), on_failure="mask")
        np.testing.assert_array_equal(failed, [False, True, False])
        np.testing.assert_allclose(state.nu_hi[1], -np.log(2))


class TestOpCounters:
    def test_linear_in_block_length(self):
        a = op_counters((100, 5, 2), 10)["ADD"]
        b = op_counters((200, 5, 2), 10)["ADD"]
        assert 1.8 <= b / a <= 2.2

    def test_linear_in_iterations(self):
        assert op_counters((50, 3, 4), 6)["LSE"] == 2 * op_counters((50, 3, 4), 3)["LSE"]

    def test_momentum_costs_extra_only_when_active(self):
        plain = op_counters((40, 2, 2), 4)
        damped = op_counters((40, 2, 2), 4, [0.5, 1.0, 1.0, 1.0], detail=True)
        assert damped["MULT"] > plain["MULT"]
        assert op_counters((40, 2, 2), 4, [0.0, 1.0, 1.0, 1.0])["ADD"] < plain["ADD"]
        assert set(damped["stages"]) == {"variable", "factor", "momentum"}

    def test_graph_and_tuple_agree(self, rng):
        blk = random_block(30, 2, QPSK, 5.0, rng)
        assert op_counters(graph_for(blk.y, blk.truth, QPSK), 3) == op_counters((30, 2, 4), 3)
