"""Ungerboeck factor graph and log-domain belief propagation with momentum.

All arrays carry a leading batch axis internally; functions accept a single
block as well and drop the batch axis again on output.
"""
from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from . import kernels
from .channel import BPSK, ChannelParams, Constellation, MatchedStats, get_constellation, matched_stats
from .errors import InvalidParameter, NumericalFailure

FACTOR_CLAMP = 700.0


@dataclass
class FactorGraph:
    """Log-domain factor tables for a batch of blocks.

    ``F[b, n, i]`` is the local factor of symbol ``n`` taking point ``i``;
    ``I[b, n, d - 1, i, j]`` couples ``c_n = points[i]`` with ``c_{n-d} = points[j]``.
    """

    F: np.ndarray
    I: np.ndarray
    points: np.ndarray
    sigma2: np.ndarray
    stats: MatchedStats
    batched: bool = True

    @property
    def M(self) -> int:
        return self.F.shape[2]

    @property
    def N(self) -> int:
        return self.F.shape[1]

    @property
    def L(self) -> int:
        return self.I.shape[2]

    @property
    def num_factors(self) -> int:
        return sum(self.N - d for d in range(1, self.L + 1) if d < self.N)


@dataclass
class MessageState:
    """Variable-to-factor (``mu``) and factor-to-variable (``nu``) log messages.

    ``*_hi`` live on ``c_n`` and ``*_lo`` on ``c_{n-d}`` for factor ``(n, n-d)``.
    """

    mu_hi: np.ndarray
    mu_lo: np.ndarray
    nu_hi: np.ndarray
    nu_lo: np.ndarray

    def arrays(self):
        return self.mu_hi, self.mu_lo, self.nu_hi, self.nu_lo

    def copy(self) -> "MessageState":
        return MessageState(*(a.copy() for a in self.arrays()))


def _as_batch(a, ndim):
    a = np.asarray(a)
    return (a[None], False) if a.ndim == ndim else (a, True)


def _factor_tables(stats: MatchedStats, sigma2, points):
    x, band = stats.x, stats.band
    s2 = np.broadcast_to(np.asarray(sigma2, dtype=float), x.shape[:-1])[..., None, None]
    F = (2.0 * np.real(x[..., None] * np.conj(points)) - band[..., 0, None].real * np.abs(points) ** 2)
    F = F / s2
    pair = points[None, :] * np.conj(points)[:, None]  # [i, j] = c_j conj(c_i)
    I = -2.0 * np.real(band[..., 1:, None, None] * pair) / s2[..., None, None]
    np.clip(F, -FACTOR_CLAMP, FACTOR_CLAMP, out=F)
    np.clip(I, -FACTOR_CLAMP, FACTOR_CLAMP, out=I)
    return F, np.ascontiguousarray(I)


def build_graph(stats: MatchedStats, sigma2, constellation: Constellation | str = BPSK) -> FactorGraph:
    """Local factors F_n and pairwise factors I_{n,n-d} from matched-filter statistics."""
    if np.any(np.asarray(sigma2) <= 0):
        raise InvalidParameter("sigma2 must be positive")
    points = get_constellation(constellation).points
    batched = stats.x.ndim == 2
    if not batched:
        stats = MatchedStats(stats.x[None], stats.band[None])
    sigma2 = np.broadcast_to(np.asarray(sigma2, dtype=float), stats.x.shape[:1]).copy()
    F, I = _factor_tables(stats, sigma2, points)
    return FactorGraph(F, I, points, sigma2, stats, batched)


def graph_for(y, params: ChannelParams, constellation: Constellation | str = BPSK) -> FactorGraph:
    """Shorthand for ``build_graph(matched_stats(y, h), sigma2)``."""
    return build_graph(matched_stats(y, params.h), params.sigma2, constellation)


def bp_init(graph: FactorGraph) -> MessageState:
    shape = (graph.F.shape[0], graph.N, graph.L, graph.M)
    uniform = -np.log(graph.M)
    return MessageState(*(np.full(shape, uniform) for _ in range(4)))


def _finite_rows(state: MessageState) -> np.ndarray:
    ok = np.ones(state.mu_hi.shape[0], dtype=bool)
    for a in state.arrays():
        ok &= np.isfinite(a).reshape(a.shape[0], -1).all(axis=1)
    return ok


def bp_iteration(graph: FactorGraph, state: MessageState, beta_bp: float = 1.0,
                 iteration: int | None = None, on_failure: str = "raise",
                 backend: str | None = None):
    """One flooding BP iteration with momentum ``beta_bp``.

    With ``on_failure="raise"`` a non-finite message raises
    :class:`NumericalFailure`.  With ``on_failure="mask"`` the offending blocks
    are reset to uniform messages and ``(state, failed)`` is returned, where
    ``failed`` flags those blocks.
    """
    if not np.isfinite(beta_bp):
        raise InvalidParameter("beta_bp must be finite")
    with np.errstate(over="ignore", invalid="ignore"):
        new = MessageState(*kernels.bp_sweep(graph.F, graph.I, *state.arrays(), beta_bp, backend=backend))
    ok = _finite_rows(new)
    if on_failure == "raise":
        if not ok.all():
            raise NumericalFailure("non-finite BP message", iteration, np.flatnonzero(~ok))
        return new
    if on_failure != "mask":
        raise InvalidParameter(f"unknown failure mode {on_failure!r}")
    if not ok.all():
        for a in new.arrays():
            a[~ok] = -np.log(graph.M)
    return new, ~ok


def compute_beliefs(graph: FactorGraph, state: MessageState) -> np.ndarray:
    """Beliefs b_n(c) of shape (B, N, M) (or (N, M) for an unbatched graph)."""
    S = kernels.incoming(graph.F, state.nu_hi, state.nu_lo)
    b = np.exp(kernels.normalize(S))
    b /= b.sum(axis=-1, keepdims=True)
    return b if graph.batched else b[0]


def bp_detect(y, params: ChannelParams, T: int, beta_schedule=None,
              constellation: Constellation | str = BPSK, backend: str | None = None) -> np.ndarray:
    """Coherent BP detection: ``T`` flooding iterations on the graph of ``params``."""
    if T < 1:
        raise InvalidParameter("T must be >= 1")
    beta_schedule = np.ones(T) if beta_schedule is None else np.asarray(beta_schedule, dtype=float)
    if beta_schedule.shape != (T,):
        raise InvalidParameter("beta schedule must have length T")
    graph = graph_for(y, params, constellation)
    state = bp_init(graph)
    for t in range(T):
        state = bp_iteration(graph, state, beta_schedule[t], iteration=t + 1, backend=backend)
    return compute_beliefs(graph, state)


def _dims(graph_or_dims):
    if isinstance(graph_or_dims, FactorGraph):
        return graph_or_dims.N, graph_or_dims.L, graph_or_dims.M
    return tuple(int(v) for v in graph_or_dims)


def op_counters(graph_or_dims, T: int, beta_schedule=None, detail: bool = False) -> dict:
    """Real-valued operations spent by ``T`` BP iterations of :func:`bp_iteration`.

    ``graph_or_dims`` is a graph or an ``(N, L, M)`` tuple.  ``LSE`` counts the
    terms entering log-sum-exp reductions (an M-term reduction counts M).  With
    ``detail=True`` the per-stage breakdown is returned as well.
    """
    N, L, M = _dims(graph_or_dims)
    K = sum(N - d for d in range(1, L + 1) if d < N)
    betas = np.ones(T) if beta_schedule is None else np.asarray(beta_schedule, dtype=float)
    stages = {
        "variable": {"ADD": 0, "MULT": 0, "LSE": 0},
        "factor": {"ADD": 0, "MULT": 0, "LSE": 0},
        "momentum": {"ADD": 0, "MULT": 0, "LSE": 0},
    }
    for t in range(T):
        beta = betas[t]
        if beta == 0.0:
            continue
        v = stages["variable"]
        v["ADD"] += 2 * K * M + 2 * K * M + 2 * K * M  # incoming sums, exclusions, normalization
        v["LSE"] += 2 * K * M
        f = stages["factor"]
        f["ADD"] += 2 * K * M * M + 2 * K * M  # pairwise table plus message, normalization
        f["LSE"] += 2 * K * M * M + 2 * K * M
        if beta != 1.0:
            m = stages["momentum"]
            m["MULT"] += 4 * K * 2 * M
            m["ADD"] += 4 * K * (M + M)
            m["LSE"] += 4 * K * M
    total = {k: sum(s[k] for s in stages.values()) for k in ("ADD", "MULT", "LSE")}
    if detail:
        total["stages"] = stages
    return total


def graph_build_counts(N: int, L: int, M: int) -> dict:
    """Operations to rebuild x, G and the factor tables for one parameter vector."""
    mf = {"ADD": 2 * N * (L + 1) * 2, "MULT": 4 * N * (L + 1)}  # x = H^H y
    g = {"ADD": 4 * (L + 1) ** 2, "MULT": 4 * (L + 1) ** 2}
    F = {"ADD": 2 * N * M, "MULT": 4 * N * M}
    I = {"ADD": N * L * M * M, "MULT": 3 * N * L * M * M}
    return {k: mf[k] + g[k] + F[k] + I[k] for k in ("ADD", "MULT")} | {"LSE": 0}


def with_sigma2(graph: FactorGraph, sigma2) -> FactorGraph:
    """Same statistics, new noise variance."""
    F, I = _factor_tables(graph.stats, sigma2, graph.points)
    return replace(graph, F=F, I=I, sigma2=np.broadcast_to(sigma2, graph.sigma2.shape).copy())
