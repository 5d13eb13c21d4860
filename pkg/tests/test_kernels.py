import os
import subprocess
import sys

import numpy as np
import pytest

from embp import _npkernels, kernels
from embp.channel import BPSK, random_blocks
from embp.graph import bp_init, graph_for

needs_compiled = pytest.mark.skipif(not kernels.compiled_available(), reason="extension not built")


def _graph_and_state(const, L, seed):
    blk = random_blocks(3, 25, L, const, 4.0, seed=seed)
    graph = graph_for(blk.y, blk.truth, const)
    state = bp_init(graph)
    rng = np.random.default_rng(seed)
    # non-uniform starting messages exercise every code path
    arrays = [a + rng.standard_normal(a.shape) for a in state.arrays()]
    return graph, arrays


class TestLogSumExp:
    def test_matches_naive(self, rng):
        a = rng.standard_normal((4, 7))
        np.testing.assert_allclose(_npkernels.logsumexp(a), np.log(np.exp(a).sum(-1)))

    def test_stable_for_large_values(self):
        np.testing.assert_allclose(_npkernels.logsumexp(np.array([1000.0, 1000.0])), 1000 + np.log(2))


@needs_compiled
class TestBackendEquivalence:
    @pytest.mark.parametrize("beta", [1.0, 0.6, 1.3, 0.0])
    def test_bp_sweep(self, const, beta):
        graph, arrays = _graph_and_state(const, 3, 5)
        a = kernels.bp_sweep(graph.F, graph.I, *arrays, beta, backend="numpy")
        b = kernels.bp_sweep(graph.F, graph.I, *arrays, beta, backend="cython")
        for x, y in zip(a, b):
            np.testing.assert_allclose(x, y, rtol=1e-12, atol=1e-12)

    def test_bcjr(self, const):
        graph, _ = _graph_and_state(const, 2, 9)
        ma, za = kernels.bcjr(graph.F, graph.I, backend="numpy")[:2]
        mb, zb = kernels.bcjr(graph.F, graph.I, backend="cython")[:2]
        np.testing.assert_allclose(ma, mb, atol=1e-12)
        np.testing.assert_allclose(za, zb, rtol=1e-12)


class TestSelection:
    def test_unknown_backend(self):
        with pytest.raises(ValueError):
            kernels.bp_sweep(np.zeros((1, 2, 2)), np.zeros((1, 2, 0, 2, 2)), *[np.zeros((1, 2, 0, 2))] * 4,
                             1.0, backend="fortran")

    def test_environment_forces_numpy(self):
        env = dict(os.environ, EMBP_PURE_PYTHON="1")
        out = subprocess.run([sys.executable, "-c", "from embp import kernels; print(kernels.backend_name())"],
                             env=env, capture_output=True, text=True, check=True)
        assert out.stdout.strip() == "numpy"

    def test_pairs_use_reference(self):
        graph, _ = _graph_and_state(BPSK, 1, 3)
        out = kernels.bcjr(graph.F, graph.I, pairs=True)
        assert len(out) == 3
