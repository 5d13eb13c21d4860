"""Estimation and detection metrics: squared error, BER, bit LLRs, BMI and KL diagnostics.

Blind estimation identifies the channel only up to the rotations that map the
constellation onto itself (a sign for BPSK, powers of j for QPSK).  The
``align_*`` helpers pick the rotation closest to the true channel so errors
measure estimation quality rather than the arbitrary phase label.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .channel import BPSK, ChannelParams, Constellation, get_constellation
from .errors import InvalidParameter

LLR_CLAMP = 50.0


def squared_error(h_hat, h) -> np.ndarray:
    """sum_l |h_hat_l - h_l|^2 over the last axis."""
    h_hat = np.asarray(h_hat)
    h = np.asarray(h)
    if h_hat.shape[-1] != h.shape[-1]:
        raise InvalidParameter(f"tap counts differ: {h_hat.shape[-1]} vs {h.shape[-1]}")
    return np.sum(np.abs(h_hat - h) ** 2, axis=-1)


def symmetry_rotations(constellation: Constellation | str) -> np.ndarray:
    """Unit-modulus scalars g with g * points equal to points as a set."""
    pts = get_constellation(constellation).points
    candidates = pts / pts[0]
    keep = []
    for g in candidates:
        if abs(abs(g) - 1.0) > 1e-9:
            continue
        moved = g * pts
        if np.all(np.min(np.abs(moved[:, None] - pts[None, :]), axis=1) < 1e-9):
            keep.append(g)
    return np.array(keep)


def best_rotation(h_hat, h, constellation: Constellation | str = BPSK) -> np.ndarray:
    """Rotation g minimizing ||g h_hat - h||^2 per block."""
    rot = symmetry_rotations(constellation)
    h_hat = np.asarray(h_hat)
    errs = np.stack([squared_error(g * h_hat, h) for g in rot], axis=-1)
    return rot[np.argmin(errs, axis=-1)]


def aligned_squared_error(h_hat, h, constellation: Constellation | str = BPSK) -> np.ndarray:
    """Squared error after removing the constellation's rotation ambiguity."""
    g = best_rotation(h_hat, h, constellation)
    return squared_error(np.asarray(h_hat) * g[..., None], h)


def rotate_beliefs(beliefs, g, constellation: Constellation | str = BPSK) -> np.ndarray:
    """Beliefs about ``c`` from beliefs about ``g * c``.

    If the estimate satisfies ``g h_hat ~ h`` the detector sees ``g c``, so the
    probability of ``points[i]`` is read off at the index of ``g * points[i]``.
    """
    pts = get_constellation(constellation).points
    beliefs = np.asarray(beliefs)
    g = np.asarray(g)
    moved = g[..., None] * pts
    perm = np.argmin(np.abs(moved[..., :, None] - pts), axis=-1)
    perm = np.broadcast_to(perm[..., None, :], beliefs.shape)
    return np.take_along_axis(beliefs, perm, axis=-1)


def bmd_llrs(beliefs, constellation: Constellation | str = BPSK) -> np.ndarray:
    """Bit LLRs log P(b=0)/P(b=1) of shape (..., N * m), clamped to +-50."""
    const = get_constellation(constellation)
    beliefs = np.asarray(beliefs, dtype=float)
    labels = const.bit_labels
    with np.errstate(divide="ignore"):
        logb = np.log(beliefs)
    out = []
    for i in range(const.bits_per_symbol):
        zero = labels[:, i] == 0
        l0 = np.logaddexp.reduce(np.where(zero, logb, -np.inf), axis=-1)
        l1 = np.logaddexp.reduce(np.where(~zero, logb, -np.inf), axis=-1)
        with np.errstate(invalid="ignore"):
            llr = l0 - l1
        llr = np.where(np.isnan(llr), 0.0, llr)  # both sums empty
        out.append(np.clip(llr, -LLR_CLAMP, LLR_CLAMP))
    llrs = np.stack(out, axis=-1)
    return llrs.reshape(*llrs.shape[:-2], -1)


def hard_bits(llrs) -> np.ndarray:
    """Bit decisions from LLR signs; a zero LLR decides 0."""
    return (np.asarray(llrs) < 0).astype(np.int8)


def ber(decisions, true_bits) -> float:
    """Fraction of wrong bits.  Float inputs are read as LLRs, integers as bits."""
    decisions = np.asarray(decisions)
    if np.issubdtype(decisions.dtype, np.floating):
        decisions = hard_bits(decisions)
    true_bits = np.asarray(true_bits)
    if decisions.shape != true_bits.shape:
        raise InvalidParameter("decision and truth shapes differ")
    return float(np.mean(decisions != true_bits))


def bmi_estimate(llrs, true_bits, constellation: Constellation | str = BPSK) -> float:
    """Sample-mean bit-wise mutual information in bits per symbol."""
    m = get_constellation(constellation).bits_per_symbol
    llrs = np.asarray(llrs, dtype=float)
    bits = np.asarray(true_bits)
    if llrs.shape != bits.shape:
        raise InvalidParameter("LLR and bit shapes differ")
    signed = np.where(bits == 0, llrs, -llrs)
    loss = np.logaddexp(0.0, -signed) / np.log(2.0)
    symbols = loss.size / m
    return float(m - loss.sum() / symbols)


@dataclass
class KlDiagnostic:
    elbo: np.ndarray
    log_evidence: np.ndarray
    kl: np.ndarray


def kl_qp_diagnostic(q, params: ChannelParams, y,
                     constellation: Constellation | str = BPSK) -> KlDiagnostic:
    """Gap between the exact log-evidence and the ELBO of a factorized ``q``."""
    from .baselines import bcjr_map
    from .em import elbo

    lower = elbo(q, y, params, constellation)
    evidence = bcjr_map(y, params, constellation).log_evidence
    return KlDiagnostic(lower, evidence, evidence - lower)


@dataclass
class OrderStats:
    mean: float
    median: float
    p25: float
    p75: float


def order_statistics(values) -> OrderStats:
    """Mean and quartiles of per-block values (sorted-sample interpolation)."""
    v = np.asarray(values, dtype=float).ravel()
    if v.size == 0:
        raise InvalidParameter("no values")
    p25, med, p75 = np.percentile(v, [25, 50, 75])
    return OrderStats(float(v.mean()), float(med), float(p25), float(p75))
