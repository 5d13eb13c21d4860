import numpy as np
import pytest

from embp.channel import BPSK, QPSK, ChannelParams, random_block


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


def small_instance(rng, N=6, L=2, const=BPSK, snr=None):
    """One random block with its true parameters; SNR drawn from [0, 12] dB if not given."""
    snr = rng.uniform(0, 12) if snr is None else snr
    return random_block(N, L, const, snr, rng)


def random_beliefs(rng, shape, M):
    q = rng.dirichlet(np.ones(M), size=shape)
    return q


@pytest.fixture(params=["BPSK", "QPSK"])
def const(request):
    return {"BPSK": BPSK, "QPSK": QPSK}[request.param]


def perturbed(params: ChannelParams, rng, scale=0.3):
    h = params.h + scale * (rng.standard_normal(params.h.shape) + 1j * rng.standard_normal(params.h.shape))
    return ChannelParams(h, float(params.sigma2) * rng.uniform(0.5, 2.0))


ACCEPTANCE_LINES: list[str] = []


@pytest.fixture(scope="session")
def verdict():
    """Record one PASS/FAIL line per acceptance criterion, then assert it."""
    def record(number: int, ok: bool, detail: str):
        line = f"criterion {number:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
        ACCEPTANCE_LINES.append(line)
        print(line)
        assert ok, line
    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
