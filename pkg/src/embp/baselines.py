"""Exact MAP detection, exhaustive-enumeration oracle and pilot-based estimators."""
from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np

from . import kernels
from .channel import BPSK, ChannelParams, Constellation, convolve, get_constellation
from .errors import IdentifiabilityError, InvalidParameter, StateSpaceTooLarge
from .graph import graph_for

MAX_TRELLIS_STATES = 2 ** 16
MAX_ENUMERATION = 2 ** 20
PIN_PENALTY = 1e4  # log-domain penalty that rules out non-pilot values at pilot positions


@dataclass
class MapResult:
    beliefs: np.ndarray  # (..., N, M) exact symbol posteriors
    log_evidence: np.ndarray  # log p(y | theta) under a uniform symbol prior
    pairs: np.ndarray | None = None  # (..., N, L, M, M) joint P(c_n, c_{n-d})


def log_evidence_offset(y, params: ChannelParams, M: int, N: int) -> np.ndarray:
    """Constant turning log Z of the factor graph into log p(y | theta)."""
    s2 = np.asarray(params.sigma2, dtype=float)
    return -N * np.log(M * np.pi * s2) - np.sum(np.abs(y) ** 2, axis=-1) / s2


def bcjr_map(y, params: ChannelParams, constellation: Constellation | str = BPSK,
             pairs: bool = False, log_prior=None, backend: str | None = None) -> MapResult:
    """Forward-backward over the M**L trellis of the Ungerboeck factorization.

    ``log_prior`` (shape ``(..., N, M)``) is added to the local factors; it
    lets known symbols be pinned.  The returned evidence always refers to the
    uniform prior when ``log_prior`` is None.
    """
    const = get_constellation(constellation)
    L = np.shape(params.h)[-1] - 1
    if const.M ** L > MAX_TRELLIS_STATES:
        raise StateSpaceTooLarge(f"{const.M}**{L} trellis states exceed {MAX_TRELLIS_STATES}")
    graph = graph_for(y, params, const)
    F = graph.F
    if log_prior is not None:
        F = F + np.broadcast_to(log_prior, F.shape)
    out = kernels.bcjr(F, graph.I, pairs=pairs, backend=backend)
    marg, logZ = out[0], out[1]
    ev = logZ + log_evidence_offset(np.atleast_2d(y), params, const.M, graph.N)
    joint = out[2] if pairs else None
    if not graph.batched:
        return MapResult(marg[0], float(ev[0]), None if joint is None else joint[0])
    return MapResult(marg, ev, joint)


def brute_posterior(y, params: ChannelParams, constellation: Constellation | str = BPSK):
    """Exact marginals and log-evidence of one block by enumerating every sequence.

    Returns ``(beliefs, log_evidence)``; used as a reference implementation.
    """
    const = get_constellation(constellation)
    y = np.asarray(y)
    h = np.asarray(params.h)
    s2 = float(params.sigma2)
    N = y.shape[-1] - (h.shape[-1] - 1)
    M = const.M
    if M ** N > MAX_ENUMERATION:
        raise StateSpaceTooLarge(f"{M}**{N} sequences exceed {MAX_ENUMERATION}")
    idx = np.array(list(itertools.product(range(M), repeat=N)), dtype=np.intp)
    logp = np.empty(len(idx))
    chunk = 1 << 14
    for s in range(0, len(idx), chunk):
        c = const.points[idx[s:s + chunk]]
        resid = y - convolve(h, c)
        logp[s:s + chunk] = -np.sum(np.abs(resid) ** 2, axis=-1) / s2
    logp -= N * np.log(M * np.pi * s2)
    top = logp.max()
    w = np.exp(logp - top)
    total = w.sum()
    beliefs = np.zeros((N, M))
    for n in range(N):
        beliefs[n] = np.bincount(idx[:, n], weights=w, minlength=M)
    return beliefs / total, float(np.log(total) + top)


@dataclass
class PilotConfig:
    """Known symbols: ``values[..., k]`` is transmitted at ``positions[k]`` (0-based)."""

    positions: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=np.intp)
        self.values = np.asarray(self.values, dtype=complex)
        if len(np.unique(self.positions)) != len(self.positions):
            raise InvalidParameter("pilot positions must be distinct")
        if self.values.shape[-1] != len(self.positions):
            raise InvalidParameter("one value per pilot position required")

    @classmethod
    def prefix(cls, symbols, fraction: float) -> "PilotConfig":
        """First ``round(fraction * N)`` transmitted symbols act as pilots."""
        symbols = np.asarray(symbols)
        count = int(round(fraction * symbols.shape[-1]))
        return cls(np.arange(count), symbols[..., :count])

    def log_prior(self, N: int, constellation: Constellation) -> np.ndarray:
        """Penalty table (..., N, M) that pins pilot positions to their values."""
        pts = constellation.points
        vals = self.values
        prior = np.zeros(vals.shape[:-1] + (N, len(pts)))
        hit = np.abs(vals[..., :, None] - pts) < 1e-9
        prior[..., self.positions, :] = np.where(hit, 0.0, -PIN_PENALTY)
        return prior


def _design(c, L: int, rows=None):
    """A[..., i, k] = c_{i-k} (zero outside the block) for output rows ``rows``."""
    N = c.shape[-1]
    rows = np.arange(N + L) if rows is None else rows
    A = np.zeros(c.shape[:-1] + (len(rows), L + 1), dtype=complex)
    for k in range(L + 1):
        src = rows - k
        ok = (src >= 0) & (src < N)
        A[..., ok, k] = c[..., src[ok]]
    return A


def _least_squares(A, obs):
    AhA = np.conj(np.swapaxes(A, -1, -2)) @ A
    rank = np.linalg.matrix_rank(A)
    if np.any(rank < A.shape[-1]):
        raise IdentifiabilityError("pilot layout does not determine every tap")
    Ahy = np.einsum("...ik,...i->...k", np.conj(A), obs)
    return np.linalg.solve(AhA, Ahy[..., None])[..., 0]


def ml_pilot_estimate(y, pilots: PilotConfig, L: int) -> np.ndarray:
    """Least-squares taps from the outputs whose inputs are all known.

    Only rows ``y_i`` with every contributing symbol a pilot (or outside the
    block) enter the fit, so unknown data symbols never bias the estimate.
    """
    y = np.asarray(y)
    N = y.shape[-1] - L
    known = np.zeros(N, dtype=bool)
    known[pilots.positions] = True
    rows = np.array([i for i in range(N + L)
                     if all(not (0 <= i - k < N) or known[i - k] for k in range(L + 1))
                     and any(0 <= i - k < N for k in range(L + 1))], dtype=np.intp)
    if len(rows) < L + 1:
        raise IdentifiabilityError(f"{len(rows)} fully known outputs for {L + 1} taps")
    c = np.zeros(pilots.values.shape[:-1] + (N,), dtype=complex)
    c[..., pilots.positions] = pilots.values
    A = _design(c, L, rows)
    return _least_squares(A, y[..., rows])


@dataclass
class DdResult:
    h: np.ndarray  # refined taps
    beliefs: np.ndarray  # second-pass MAP posteriors
    h_pilot: np.ndarray  # first-pass pilot estimate


def dd_map_estimate(y, pilots: PilotConfig, L: int, sigma2,
                    constellation: Constellation | str = BPSK, backend: str | None = None) -> DdResult:
    """Decision-directed refinement: pilot ML, MAP, hard decisions, full least squares, MAP."""
    const = get_constellation(constellation)
    y = np.asarray(y)
    N = y.shape[-1] - L
    prior = pilots.log_prior(N, const)
    h0 = ml_pilot_estimate(y, pilots, L)
    first = bcjr_map(y, ChannelParams(h0, sigma2), const, log_prior=prior, backend=backend)
    decided = const.points[np.argmax(first.beliefs, axis=-1)]
    decided[..., pilots.positions] = pilots.values
    h1 = _least_squares(_design(decided, L), y)
    second = bcjr_map(y, ChannelParams(h1, sigma2), const, log_prior=prior, backend=backend)
    return DdResult(h1, second.beliefs, h0)
