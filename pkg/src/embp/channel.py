"""Constellations, block-fading ISI channels and matched-filter statistics.

Every array function accepts optional leading batch dimensions, so a stack of
``B`` blocks can be pushed through in one call: ``y`` of shape ``(B, N + L)``,
``h`` of shape ``(B, L + 1)`` and so on.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import InvalidParameter


@dataclass(frozen=True)
class Constellation:
    """Symbol alphabet with per-point bit labels (row ``i`` labels ``points[i]``)."""

    name: str
    points: np.ndarray
    bit_labels: np.ndarray

    def __post_init__(self):
        M = len(self.points)
        if M < 2 or M & (M - 1):
            raise InvalidParameter(f"constellation size {M} is not a power of two")
        m = int(np.log2(M))
        labels = np.asarray(self.bit_labels)
        if labels.shape != (M, m):
            raise InvalidParameter("bit labels must have shape (M, log2 M)")
        if len({tuple(row) for row in labels}) != M:
            raise InvalidParameter("bit labels are not distinct")

    @property
    def M(self) -> int:
        return len(self.points)

    @property
    def bits_per_symbol(self) -> int:
        return self.bit_labels.shape[1]

    @property
    def energies(self) -> np.ndarray:
        return np.abs(self.points) ** 2

    def symbols_to_bits(self, idx: np.ndarray) -> np.ndarray:
        """Map symbol indices ``(..., N)`` to bits ``(..., N * m)``."""
        bits = self.bit_labels[np.asarray(idx)]
        return bits.reshape(*bits.shape[:-2], -1)


BPSK = Constellation(
    "BPSK",
    np.array([1.0 + 0j, -1.0 + 0j]),
    np.array([[0], [1]], dtype=np.int8),
)

# Gray mapping: first bit is the sign of the real part, second of the imaginary part.
QPSK = Constellation(
    "QPSK",
    np.array([1 + 1j, 1 - 1j, -1 + 1j, -1 - 1j]) / np.sqrt(2),
    np.array([[0, 0], [0, 1], [1, 0], [1, 1]], dtype=np.int8),
)

CONSTELLATIONS = {"BPSK": BPSK, "QPSK": QPSK}


def get_constellation(name: str | Constellation) -> Constellation:
    if isinstance(name, Constellation):
        return name
    try:
        return CONSTELLATIONS[name.upper()]
    except KeyError:
        raise InvalidParameter(f"unknown constellation {name!r}") from None


@dataclass
class ChannelParams:
    """Parameter vector (h_0, ..., h_L, sigma2), possibly batched."""

    h: np.ndarray
    sigma2: np.ndarray | float

    def __post_init__(self):
        self.h = np.asarray(self.h, dtype=complex)
        self.sigma2 = np.asarray(self.sigma2, dtype=float)
        if self.h.ndim == 0 or self.h.shape[-1] < 1:
            raise InvalidParameter("channel needs at least one tap")
        if np.any(self.sigma2 <= 0):
            raise InvalidParameter("sigma2 must be positive")

    @property
    def L(self) -> int:
        return self.h.shape[-1] - 1

    def as_vector(self) -> np.ndarray:
        """Stack to the (L + 2)-vector theta; the last entry is sigma2."""
        s2 = np.broadcast_to(self.sigma2, self.h.shape[:-1])
        return np.concatenate([self.h, s2[..., None].astype(complex)], axis=-1)

    @classmethod
    def from_vector(cls, theta: np.ndarray) -> "ChannelParams":
        theta = np.asarray(theta)
        return cls(theta[..., :-1].copy(), theta[..., -1].real.copy())

    def __getitem__(self, idx) -> "ChannelParams":
        s2 = np.broadcast_to(self.sigma2, self.h.shape[:-1])
        return ChannelParams(self.h[idx], s2[idx])


@dataclass
class TransmissionBlock:
    symbols: np.ndarray  # complex (..., N)
    indices: np.ndarray  # constellation indices (..., N)
    bits: np.ndarray  # (..., N * m)
    y: np.ndarray  # (..., N + L)
    truth: ChannelParams

    @property
    def N(self) -> int:
        return self.symbols.shape[-1]


@dataclass
class MatchedStats:
    """x = H^H y and the band of G = H^H H.

    ``band[..., n, d] = G[n, n - d]`` for ``0 <= d <= L``; entries with ``n - d < 0``
    are zero.  The upper triangle follows from Hermitian symmetry.
    """

    x: np.ndarray
    band: np.ndarray

    @property
    def N(self) -> int:
        return self.x.shape[-1]

    @property
    def L(self) -> int:
        return self.band.shape[-1] - 1

    def dense(self) -> np.ndarray:
        N, L = self.N, self.L
        G = np.zeros(self.band.shape[:-2] + (N, N), dtype=complex)
        for d in range(L + 1):
            n = np.arange(d, N)
            G[..., n, n - d] = self.band[..., d:, d]
            if d:
                G[..., n - d, n] = np.conj(self.band[..., d:, d])
        return G


def block_rng(seed: int, *keys: int) -> np.random.Generator:
    """Independent generator for the stream addressed by ``(seed, *keys)``."""
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=tuple(keys)))


def sample_channel(L: int, pdp: str = "uniform", rng: np.random.Generator | None = None,
                   size: int | None = None) -> np.ndarray:
    """Draw unit-norm taps; returns shape (L + 1,) or (size, L + 1)."""
    if L < 0:
        raise InvalidParameter("L must be >= 0")
    rng = np.random.default_rng() if rng is None else rng
    if pdp == "uniform":
        var = np.ones(L + 1)
    elif pdp == "exponential":
        var = np.exp(-np.arange(L + 1.0))
    else:
        raise InvalidParameter(f"unknown power delay profile {pdp!r}")
    shape = (L + 1,) if size is None else (size, L + 1)
    h = np.sqrt(var / 2) * (rng.standard_normal(shape) + 1j * rng.standard_normal(shape))
    return h / np.linalg.norm(h, axis=-1, keepdims=True)


def snr_db(constellation: Constellation, sigma2) -> np.ndarray | float:
    sigma2 = np.asarray(sigma2, dtype=float)
    if np.any(sigma2 <= 0):
        raise InvalidParameter("sigma2 must be positive")
    es = constellation.energies.mean()
    out = 10 * np.log10(es / sigma2)
    return float(out) if out.ndim == 0 else out


def sigma2_for_snr(constellation: Constellation, snr) -> np.ndarray | float:
    out = constellation.energies.mean() / 10 ** (np.asarray(snr, dtype=float) / 10)
    return float(out) if np.ndim(out) == 0 else out


def convolve(h: np.ndarray, c: np.ndarray) -> np.ndarray:
    """Batched full linear convolution H c, output length N + L."""
    h = np.asarray(h)
    c = np.asarray(c)
    L = h.shape[-1] - 1
    N = c.shape[-1]
    batch = np.broadcast_shapes(h.shape[:-1], c.shape[:-1])
    out = np.zeros(batch + (N + L,), dtype=complex)
    for ell in range(L + 1):
        out[..., ell:ell + N] += h[..., ell, None] * c
    return out


def transmit(c: np.ndarray, params: ChannelParams, rng: np.random.Generator) -> np.ndarray:
    """y = H c + w with w ~ CN(0, sigma2)."""
    clean = convolve(params.h, c)
    scale = np.sqrt(np.asarray(params.sigma2, dtype=float) / 2)[..., None]
    noise = rng.standard_normal(clean.shape) + 1j * rng.standard_normal(clean.shape)
    return clean + scale * noise


def channel_matrix(h: np.ndarray, N: int) -> np.ndarray:
    """Dense (N + L) x N convolution matrix for a single tap vector."""
    h = np.asarray(h)
    L = len(h) - 1
    H = np.zeros((N + L, N), dtype=complex)
    for n in range(N):
        H[n:n + L + 1, n] = h
    return H


def tap_autocorrelation(h: np.ndarray) -> np.ndarray:
    """g[..., d] = sum_k conj(h_k) h_{k+d}, i.e. G[n, n-d]."""
    h = np.asarray(h)
    L = h.shape[-1] - 1
    g = np.empty(h.shape, dtype=complex)
    for d in range(L + 1):
        g[..., d] = np.sum(np.conj(h[..., :L + 1 - d]) * h[..., d:], axis=-1)
    return g


def matched_stats(y: np.ndarray, h: np.ndarray) -> MatchedStats:
    y = np.asarray(y)
    h = np.asarray(h)
    L = h.shape[-1] - 1
    N = y.shape[-1] - L
    if N < 1:
        raise InvalidParameter("observation shorter than the channel memory")
    x = np.zeros(np.broadcast_shapes(y.shape[:-1], h.shape[:-1]) + (N,), dtype=complex)
    for ell in range(L + 1):
        x += np.conj(h[..., ell, None]) * y[..., ell:ell + N]
    g = tap_autocorrelation(h)
    band = np.zeros(x.shape + (L + 1,), dtype=complex)
    band[...] = g[..., None, :]
    for d in range(1, L + 1):
        band[..., :d, d] = 0.0
    return MatchedStats(x, band)


def random_block(N: int, L: int, constellation: Constellation, snr: float,
                 rng: np.random.Generator, pdp: str = "uniform",
                 h: np.ndarray | None = None) -> TransmissionBlock:
    """One block: uniform symbols, a fresh channel (unless ``h`` is given) and noise."""
    idx = rng.integers(constellation.M, size=N)
    h = sample_channel(L, pdp, rng) if h is None else np.asarray(h, dtype=complex)
    params = ChannelParams(h, sigma2_for_snr(constellation, snr))
    c = constellation.points[idx]
    y = transmit(c, params, rng)
    return TransmissionBlock(c, idx, constellation.symbols_to_bits(idx), y, params)


def stack_blocks(blocks: Sequence[TransmissionBlock]) -> TransmissionBlock:
    """Stack single blocks along a new leading batch axis."""
    truth = ChannelParams(np.stack([b.truth.h for b in blocks]),
                          np.array([float(b.truth.sigma2) for b in blocks]))
    return TransmissionBlock(
        np.stack([b.symbols for b in blocks]),
        np.stack([b.indices for b in blocks]),
        np.stack([b.bits for b in blocks]),
        np.stack([b.y for b in blocks]),
        truth,
    )


def random_blocks(count: int, N: int, L: int, constellation: Constellation, snr: float,
                  seed: int, stream: int = 0, pdp: str = "uniform",
                  h: np.ndarray | None = None, start: int = 0) -> TransmissionBlock:
    """``count`` blocks with per-block generators ``block_rng(seed, stream, start + i)``.

    Each block owns its random stream, so results do not depend on how blocks
    are grouped into batches or workers.
    """
    return stack_blocks([
        random_block(N, L, constellation, snr, block_rng(seed, stream, start + i), pdp, h)
        for i in range(count)
    ])
