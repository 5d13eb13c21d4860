"""Closed-form EM parameter updates and the interleaved EM/BP estimator.

The likelihood is normalized per information symbol:
``log p(y, c | theta) = -N log(M pi sigma2) - ||y - H c||^2 / sigma2``.
Expectations over ``c`` use per-symbol marginals ``q`` (shape ``(B, N, M)``),
and optionally exact pairwise marginals ``pairs`` (shape ``(B, N, L, M, M)``,
``pairs[b, n, d - 1, i, j] = P(c_n = i, c_{n-d} = j)``) in place of the
product ``q_n q_{n-d}``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .channel import BPSK, ChannelParams, Constellation, get_constellation, matched_stats
from .errors import DegeneratePosterior, InvalidParameter
from .graph import MessageState, bp_init, bp_iteration, build_graph, compute_beliefs

SIGMA2_FLOOR = 1e-8


@dataclass
class BcdTerms:
    """Residual decomposition ``||y - H c||^2 = B - sum_n C_n(c_n) + sum D_{n,n-d}(c_n, c_{n-d})``.

    ``C`` has shape (B, N, M); ``D[b, n, d - 1, i, j]`` pairs ``c_n = i`` with ``c_{n-d} = j``.
    """

    B: np.ndarray
    C: np.ndarray
    D: np.ndarray


def _batch(y, h, q=None):
    y = np.asarray(y)
    single = y.ndim == 1
    y = np.atleast_2d(y)
    h = np.atleast_2d(np.asarray(h, dtype=complex))
    out = [y, h]
    if q is not None:
        q = np.asarray(q, dtype=float)
        out.append(q[None] if q.ndim == 2 else q)
    return single, out


def bcd_terms(y, h, constellation: Constellation | str = BPSK) -> BcdTerms:
    points = get_constellation(constellation).points
    single, (y, h) = _batch(y, h)
    st = matched_stats(y, h)
    B = np.sum(np.abs(y) ** 2, axis=-1)
    C = 2.0 * np.real(st.x[..., None] * np.conj(points)) - st.band[..., 0, None].real * np.abs(points) ** 2
    pair = points[None, :] * np.conj(points)[:, None]
    D = 2.0 * np.real(st.band[..., 1:, None, None] * pair)
    if single:
        return BcdTerms(B[0], C[0], D[0])
    return BcdTerms(B, C, D)


def pair_weights(q, L: int, pairs=None) -> np.ndarray:
    """Joint weights for every factor slot: exact ``pairs`` or the product ``q_n q_{n-d}``."""
    if pairs is not None:
        return np.asarray(pairs)
    Bn, N, M = q.shape
    W = np.zeros((Bn, N, L, M, M))
    for d in range(1, L + 1):
        W[:, d:, d - 1] = q[:, d:, :, None] * q[:, :N - d, None, :]
    return W


def expected_residual(q, terms: BcdTerms, pairs=None) -> np.ndarray:
    """E ||y - H c||^2 under the marginals (and optional pairwise marginals)."""
    q = np.asarray(q)
    single = q.ndim == 2
    if single:
        q = q[None]
        terms = BcdTerms(np.atleast_1d(terms.B), terms.C[None], terms.D[None])
        pairs = None if pairs is None else np.asarray(pairs)[None]
    L = terms.D.shape[2]
    W = pair_weights(q, L, pairs)
    out = np.atleast_1d(terms.B) - np.sum(q * terms.C, axis=(1, 2)) + np.sum(W * terms.D, axis=(1, 2, 3, 4))
    return out[0] if single else out


def update_sigma2(q, terms: BcdTerms, pairs=None) -> np.ndarray:
    """Closed-form noise-variance update, floored at ``SIGMA2_FLOOR``."""
    N = np.shape(q)[-2]
    if N < 1:
        raise InvalidParameter("empty block")
    return np.maximum(expected_residual(q, terms, pairs) / N, SIGMA2_FLOOR)


def lag_correlations(q, points, L: int, pairs=None) -> np.ndarray:
    """R[b, d] = sum_n E[c_n conj(c_{n-d})] for d = 0..L."""
    Bn = q.shape[0]
    R = np.zeros((Bn, L + 1), dtype=complex)
    R[:, 0] = np.sum(q * np.abs(points) ** 2, axis=(1, 2))
    if L == 0:
        return R
    pair = points[:, None] * np.conj(points)[None, :]  # [i, j] = c_i conj(c_j)
    W = pair_weights(q, L, pairs)
    R[:, 1:] = np.einsum("bndij,ij->bd", W, pair)
    return R


def _tap_updates(q, y, h, points, which, pairs=None):
    """Updated values of taps ``which``, each computed with the other taps held at ``h``."""
    L = h.shape[-1] - 1
    N = q.shape[1]
    R = lag_correlations(q, points, L, pairs)
    energy = R[:, 0].real
    if np.any(energy <= 0):
        raise DegeneratePosterior("posterior has zero symbol energy")
    mean = q @ points  # (B, N)
    out = {}
    for ell in which:
        num = np.sum(np.conj(mean) * y[:, ell:ell + N], axis=-1)
        for k in range(L + 1):
            if k == ell:
                continue
            delta = ell - k  # S(delta) = sum_n E[conj(c_n) c_{n+delta}]
            S = R[:, delta] if delta > 0 else np.conj(R[:, -delta])
            num = num - h[:, k] * S
        out[ell] = num / energy
    return out


def update_tap(ell: int, q, y, h, constellation: Constellation | str = BPSK, pairs=None):
    """Closed-form update of tap ``ell`` with the remaining taps fixed at ``h``."""
    points = get_constellation(constellation).points
    single, (y, h, q) = _batch(y, h, q)
    if not 0 <= ell < h.shape[-1]:
        raise InvalidParameter("tap index out of range")
    if pairs is not None and single:
        pairs = np.asarray(pairs)[None]
    val = _tap_updates(q, y, h, points, [ell], pairs)[ell]
    return val[0] if single else val


@dataclass
class EmSchedule:
    """Per-iteration momentum weights ``beta_em[t, k]`` for theta = (h_0..h_L, sigma2).

    A zero weight means the parameter is not updated in that iteration.
    """

    beta_em: np.ndarray

    def __post_init__(self):
        self.beta_em = np.atleast_2d(np.asarray(self.beta_em, dtype=float))
        if not np.all(np.isfinite(self.beta_em)):
            raise InvalidParameter("schedule weights must be finite")

    @property
    def T(self) -> int:
        return self.beta_em.shape[0]

    @property
    def L(self) -> int:
        return self.beta_em.shape[1] - 2

    @property
    def active(self) -> np.ndarray:
        return self.beta_em != 0.0

    @classmethod
    def serial(cls, L: int, T: int | None = None) -> "EmSchedule":
        """One parameter per iteration, cycling h_0, ..., h_L, sigma2."""
        T = 3 * (L + 2) if T is None else T
        beta = np.zeros((T, L + 2))
        beta[np.arange(T), np.arange(T) % (L + 2)] = 1.0
        return cls(beta)

    @classmethod
    def parallel(cls, L: int, T: int) -> "EmSchedule":
        return cls(np.ones((T, L + 2)))

    @classmethod
    def empty(cls, L: int, T: int) -> "EmSchedule":
        return cls(np.zeros((T, L + 2)))


def em_step(theta: ChannelParams, q, y, beta_em, constellation: Constellation | str = BPSK,
            pairs=None) -> ChannelParams:
    """Jacobi M-step: every selected parameter is updated from the current theta.

    ``beta_em`` has length L + 2; entry ``k`` blends the closed-form update
    into theta as ``beta * new + (1 - beta) * old``.  Zero entries are skipped.
    """
    const = get_constellation(constellation)
    points = const.points
    single, (y, h, q) = _batch(y, theta.h, q)
    if pairs is not None and single:
        pairs = np.asarray(pairs)[None]
    L = h.shape[-1] - 1
    beta_em = np.asarray(beta_em, dtype=float)
    if beta_em.shape[-1] != L + 2:
        raise InvalidParameter("beta_em must have L + 2 entries")
    beta_em = np.broadcast_to(beta_em, (h.shape[0], L + 2))
    sigma2 = np.broadcast_to(np.asarray(theta.sigma2, dtype=float), h.shape[:1]).copy()
    new_h = h.copy()
    taps = [k for k in range(L + 1) if np.any(beta_em[:, k] != 0.0)]
    if taps:
        upd = _tap_updates(q, y, h, points, taps, pairs)
        for k in taps:
            new_h[:, k] = _blend(upd[k], h[:, k], beta_em[:, k])
    if np.any(beta_em[:, L + 1] != 0.0):
        terms = bcd_terms(y, h, const)
        upd = expected_residual(q, terms, pairs) / q.shape[1]
        sigma2 = np.maximum(_blend(upd, sigma2, beta_em[:, L + 1]), SIGMA2_FLOOR)
    if single:
        return ChannelParams(new_h[0], sigma2[0])
    return ChannelParams(new_h, sigma2)


def _blend(new, old, beta):
    out = np.where(beta == 1.0, new, beta * new + (1.0 - beta) * old)
    return np.where(beta == 0.0, old, out)


@dataclass
class EmbpResult:
    theta: ChannelParams
    beliefs: np.ndarray
    trace: np.ndarray | None  # (T + 1, B, L + 2) complex theta vectors
    failed: np.ndarray  # (B,) blocks that hit a numerical failure


def embp_run(y, theta0: ChannelParams, schedule: EmSchedule, beta_bp=None,
             constellation: Constellation | str = BPSK, keep_trace: bool = False,
             on_failure: str = "raise", backend: str | None = None) -> EmbpResult:
    """Interleaved estimation and detection: one BP iteration per EM step.

    Each iteration rebuilds the factor graph from the current estimate, runs a
    single momentum-BP sweep continuing from the persistent message state,
    computes beliefs and applies the M-step weights of ``schedule``.  With
    ``on_failure="mask"`` blocks with non-finite messages are flagged in
    ``failed`` instead of raising.
    """
    const = get_constellation(constellation)
    T = schedule.T
    if T < 1:
        raise InvalidParameter("schedule needs at least one iteration")
    beta_bp = np.ones(T) if beta_bp is None else np.asarray(beta_bp, dtype=float)
    if beta_bp.shape != (T,):
        raise InvalidParameter("beta_bp must have length T")
    single = np.ndim(y) == 1
    y = np.atleast_2d(y)
    h = np.atleast_2d(np.asarray(theta0.h, dtype=complex)).copy()
    if schedule.L != h.shape[-1] - 1:
        raise InvalidParameter("schedule does not match the channel memory")
    Bn = y.shape[0]
    h = np.broadcast_to(h, (Bn, h.shape[-1])).copy()
    sigma2 = np.broadcast_to(np.asarray(theta0.sigma2, dtype=float), (Bn,)).copy()
    theta = ChannelParams(h, sigma2)
    failed = np.zeros(Bn, dtype=bool)
    trace = [theta.as_vector()] if keep_trace else None
    graph = build_graph(matched_stats(y, theta.h), theta.sigma2, const)
    state: MessageState = bp_init(graph)
    beliefs = compute_beliefs(graph, state)
    changed = False
    for t in range(T):
        if changed:
            graph = build_graph(matched_stats(y, theta.h), theta.sigma2, const)
        if on_failure == "raise":
            state = bp_iteration(graph, state, beta_bp[t], iteration=t + 1, backend=backend)
        else:
            state, bad = bp_iteration(graph, state, beta_bp[t], iteration=t + 1,
                                      on_failure="mask", backend=backend)
            failed |= bad
        beliefs = compute_beliefs(graph, state)
        row = schedule.beta_em[t]
        changed = bool(np.any(row != 0.0))
        if changed:
            if on_failure == "raise":
                theta = em_step(theta, beliefs, y, row, const)
            else:
                with np.errstate(invalid="ignore", divide="ignore", over="ignore"):
                    theta = em_step(theta, beliefs, y, row, const)
                bad = ~np.isfinite(theta.as_vector()).all(axis=-1)
                if bad.any():
                    failed |= bad
                    theta.h[bad] = 0.0
                    theta.sigma2[bad] = 1.0
        if keep_trace:
            trace.append(theta.as_vector())
    trace_arr = np.stack(trace) if keep_trace else None
    if single:
        return EmbpResult(theta[0], beliefs[0], None if trace_arr is None else trace_arr[:, 0], failed[0])
    return EmbpResult(theta, beliefs, trace_arr, failed)


def embp_op_counts(N: int, L: int, M: int, schedule: EmSchedule, beta_bp=None) -> dict:
    """Operations of :func:`embp_run` for one block, counting only active M-step entries."""
    from .graph import graph_build_counts, op_counters

    T = schedule.T
    beta_bp = np.ones(T) if beta_bp is None else np.asarray(beta_bp, dtype=float)
    total = op_counters((N, L, M), T, beta_bp)
    build = graph_build_counts(N, L, M)
    changed = False
    for t in range(T):
        if t == 0 or changed:
            for k in ("ADD", "MULT"):
                total[k] += build[k]
        active = schedule.active[t]
        changed = bool(active.any())
        n_taps = int(active[:L + 1].sum())
        if n_taps:
            # lag correlations and means, shared by all taps this iteration
            total["ADD"] += N * M * (2 * L + 2) + 2 * N * L * M * M
            total["MULT"] += N * M * (2 * L + 4) + 4 * N * L * M * M
            total["ADD"] += n_taps * (2 * N + 2 * L + 2)
            total["MULT"] += n_taps * (4 * N + 4 * L + 2)
        if active[L + 1]:
            total["ADD"] += N * M * (2 * L * M + 4) + 2 * (N + L)
            total["MULT"] += N * M * (3 * L * M + 3) + 2 * (N + L)
    return total


def expected_complete_loglik(q, y, theta: ChannelParams, constellation: Constellation | str = BPSK,
                             pairs=None) -> np.ndarray:
    """E_q[log p(c, y | theta)] with a uniform symbol prior."""
    const = get_constellation(constellation)
    terms = bcd_terms(y, theta.h, const)
    N = np.shape(q)[-2]
    res = expected_residual(q, terms, pairs)
    s2 = np.asarray(theta.sigma2, dtype=float)
    return -N * np.log(const.M * np.pi * s2) - res / s2


def entropy(q) -> np.ndarray:
    q = np.asarray(q)
    with np.errstate(divide="ignore", invalid="ignore"):
        t = np.where(q > 0, q * np.log(q), 0.0)
    return -np.sum(t, axis=(-2, -1))


def elbo(q, y, theta: ChannelParams, constellation: Constellation | str = BPSK) -> np.ndarray:
    """Evidence lower bound of a factorized posterior approximation ``q``."""
    return expected_complete_loglik(q, y, theta, constellation) + entropy(q)


def em_monotonicity_probe(y, theta0: ChannelParams, T: int | None = None,
                          constellation: Constellation | str = BPSK) -> np.ndarray:
    """Exact-E-step EM with serial single-parameter M-steps.

    Returns ``log p(y | theta^(t))`` for t = 0..T.  The E-step supplies exact
    marginals and pairwise marginals, so every M-step maximizes the exact
    expected complete log-likelihood along one coordinate.
    """
    from .baselines import bcjr_map

    const = get_constellation(constellation)
    L = np.shape(theta0.h)[-1] - 1
    schedule = EmSchedule.serial(L, T)
    theta = theta0
    out = []
    for t in range(schedule.T + 1):
        res = bcjr_map(y, theta, const, pairs=True)
        out.append(res.log_evidence)
        if t == schedule.T:
            break
        theta = em_step(theta, res.beliefs, y, schedule.beta_em[t], const, pairs=res.pairs)
    return np.array(out)
