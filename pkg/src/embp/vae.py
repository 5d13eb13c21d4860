"""Blind initialization by a linear variational equalizer (VAE-LE).

The posterior family is a FIR equalizer followed by a Gaussian soft demapper;
the evidence lower bound is ascended jointly over the equalizer taps, the
channel taps, the noise variance and the demapper temperature with Adam.

Real parameter layout per block (``P = L_le + 1``)::

    [Re phi (P), Im phi (P), Re h (L+1), Im h (L+1), log sigma2, log sigma2_vae]
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .channel import BPSK, ChannelParams, Constellation, convolve, get_constellation
from .em import SIGMA2_FLOOR, elbo
from .errors import InvalidParameter, NumericalFailure

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8
BLIND_SIGMA2_SCALE = 4.0  # pessimistic start keeps the first posteriors soft


@dataclass
class VaeState:
    phi: np.ndarray  # (..., L_le + 1) equalizer taps
    theta: ChannelParams
    sigma2_vae: np.ndarray  # demapper temperature

    @property
    def L_le(self) -> int:
        return self.phi.shape[-1] - 1


def equalizer_delay(L_le: int, L: int) -> int:
    """Output delay so that the centre tap meets the impulse channel estimate."""
    return L_le // 2 + (L + 1) // 2


def equalize(phi, y, L: int) -> np.ndarray:
    """c_hat[n] = sum_j phi[j] y[n + delay - j] for n = 0..N-1 (zero outside y)."""
    phi = np.atleast_2d(phi)
    y = np.atleast_2d(y)
    N = y.shape[-1] - L
    D = equalizer_delay(phi.shape[-1] - 1, L)
    out = np.zeros(np.broadcast_shapes(phi.shape[:-1], y.shape[:-1]) + (N,), dtype=complex)
    n = np.arange(N)
    for j in range(phi.shape[-1]):
        src = n + D - j
        ok = (src >= 0) & (src < y.shape[-1])
        out[..., ok] += phi[..., j, None] * y[..., src[ok]]
    return out


def _demap(c_hat, tau, points):
    dist = np.abs(c_hat[..., None] - points) ** 2
    z = -dist / tau[..., None, None]
    z -= z.max(axis=-1, keepdims=True)
    q = np.exp(z)
    q /= q.sum(axis=-1, keepdims=True)
    return q, dist


def vae_q(phi, sigma2_vae, y, L: int, constellation: Constellation | str = BPSK) -> np.ndarray:
    """Soft-demapped equalizer output: rows are distributions over the constellation."""
    points = get_constellation(constellation).points
    single = np.ndim(y) == 1
    c_hat = equalize(phi, y, L)
    tau = np.broadcast_to(np.asarray(sigma2_vae, dtype=float), c_hat.shape[:-1])
    q, _ = _demap(c_hat, tau, points)
    return q[0] if single else q


def vae_elbo(q, theta: ChannelParams, y, constellation: Constellation | str = BPSK):
    """Evidence lower bound of ``q`` under ``theta`` (residual-decomposition route)."""
    return elbo(q, y, theta, constellation)


def pack(state: VaeState) -> np.ndarray:
    phi = np.atleast_2d(state.phi)
    h = np.atleast_2d(state.theta.h)
    Bn = max(phi.shape[0], h.shape[0])
    phi = np.broadcast_to(phi, (Bn, phi.shape[-1]))
    h = np.broadcast_to(h, (Bn, h.shape[-1]))
    s2 = np.broadcast_to(np.asarray(state.theta.sigma2, dtype=float), (Bn,))
    tau = np.broadcast_to(np.asarray(state.sigma2_vae, dtype=float), (Bn,))
    return np.concatenate([phi.real, phi.imag, h.real, h.imag,
                           np.log(s2)[:, None], np.log(tau)[:, None]], axis=1)


def unpack(params: np.ndarray, P: int, L: int) -> VaeState:
    H = L + 1
    phi = params[:, :P] + 1j * params[:, P:2 * P]
    h = params[:, 2 * P:2 * P + H] + 1j * params[:, 2 * P + H:2 * P + 2 * H]
    return VaeState(phi, ChannelParams(h, np.exp(params[:, -2])), np.exp(params[:, -1]))


def elbo_and_gradient(params: np.ndarray, y: np.ndarray, L: int, P: int, points: np.ndarray):
    """ELBO per block and its gradient w.r.t. the packed real parameters."""
    Bn, N = y.shape[0], y.shape[1] - L
    st = unpack(params, P, L)
    h, s2, tau = st.theta.h, st.theta.sigma2, st.sigma2_vae
    c_hat = equalize(st.phi, y, L)
    q, dist = _demap(c_hat, tau, points)
    mean = q @ points
    var = q @ np.abs(points) ** 2 - np.abs(mean) ** 2
    r = y - convolve(h, mean)
    hh = np.sum(np.abs(h) ** 2, axis=-1)
    V = var.sum(axis=-1)
    R = np.sum(np.abs(r) ** 2, axis=-1) + hh * V
    with np.errstate(divide="ignore"):
        logq = np.where(q > 0, np.log(np.where(q > 0, q, 1.0)), 0.0)
    H_q = -np.sum(q * logq, axis=(1, 2))
    M = len(points)
    value = -N * np.log(M * np.pi * s2) - R / s2 + H_q

    # d value / d q_n(c), up to a per-row constant
    a = -hh[:, None] * mean
    for ell in range(L + 1):
        a -= np.conj(h[:, ell, None]) * r[:, ell:ell + N]
    e = 2.0 * np.real(np.conj(a)[..., None] * points) + hh[:, None, None] * np.abs(points) ** 2
    g = -e / s2[:, None, None] - logq - 1.0
    w = q * (g - np.sum(q * g, axis=-1, keepdims=True))
    G = np.sum(w * (-2.0 * (c_hat[..., None] - points)), axis=-1) / tau[:, None]
    grad = np.empty_like(params)
    D = equalizer_delay(P - 1, L)
    n = np.arange(N)
    for j in range(P):
        src = n + D - j
        ok = (src >= 0) & (src < y.shape[1])
        gj = np.sum(G[:, ok] * np.conj(y[:, src[ok]]), axis=-1)
        grad[:, j] = gj.real
        grad[:, P + j] = gj.imag
    H = L + 1
    for ell in range(H):
        corr = np.sum(r[:, ell:ell + N] * np.conj(mean), axis=-1)
        gh = -2.0 * (-corr + h[:, ell] * V) / s2
        grad[:, 2 * P + ell] = gh.real
        grad[:, 2 * P + H + ell] = gh.imag
    grad[:, -2] = -N + R / s2
    grad[:, -1] = np.sum(w * dist, axis=(1, 2)) / tau
    return value, grad


def moment_sigma2(y, h, constellation: Constellation, L: int) -> np.ndarray:
    """Blind noise-variance guess from received power and the tap energy of ``h``."""
    y = np.atleast_2d(y)
    N = y.shape[-1] - L
    power = np.sum(np.abs(y) ** 2, axis=-1)
    signal = np.sum(np.abs(np.atleast_2d(h)) ** 2, axis=-1) * N * constellation.energies.mean()
    return np.maximum((power - signal) / (N + L), 1e-2 * power / (N + L))


def blind_sigma2(y, L: int) -> np.ndarray:
    """Blind starting noise variance: a multiple of the received power per sample."""
    y = np.atleast_2d(y)
    return BLIND_SIGMA2_SCALE * np.sum(np.abs(y) ** 2, axis=-1) / y.shape[-1]


def impulse(L: int) -> np.ndarray:
    h = np.zeros(L + 1, dtype=complex)
    h[(L + 1) // 2] = 1.0
    return h


@dataclass
class VaeResult:
    theta: ChannelParams
    state: VaeState
    elbo_trace: np.ndarray  # (S + 1, B)
    h_trace: np.ndarray | None  # (S + 1, B, L + 1)


def vae_le_run(y, L: int, S_vae: int = 10, lr=0.1, L_le: int | None = None, h_init=None,
               sigma2_init=None, sigma2_vae_init: float = 1.0,
               constellation: Constellation | str = BPSK, keep_trace: bool = False) -> VaeResult:
    """Ascend the ELBO of the FIR-equalizer family with ``S_vae`` Adam steps.

    ``lr`` is a scalar or a length-``S_vae`` schedule.  ``h_init`` defaults to
    an impulse at delay ceil(L/2); ``sigma2_init`` defaults to :func:`blind_sigma2`.
    """
    if S_vae < 1:
        raise InvalidParameter("S_vae must be >= 1")
    const = get_constellation(constellation)
    single = np.ndim(y) == 1
    y = np.atleast_2d(np.asarray(y, dtype=complex))
    Bn = y.shape[0]
    L_le = 2 * L if L_le is None else L_le
    P = L_le + 1
    lr = np.broadcast_to(np.asarray(lr, dtype=float), (S_vae,))
    h0 = impulse(L) if h_init is None else np.asarray(h_init, dtype=complex)
    h0 = np.broadcast_to(h0, (Bn, L + 1))
    s2 = blind_sigma2(y, L) if sigma2_init is None else sigma2_init
    phi = np.zeros((Bn, P), dtype=complex)
    phi[:, L_le // 2] = 1.0
    params = pack(VaeState(phi, ChannelParams(h0, s2), sigma2_vae_init))
    m = np.zeros_like(params)
    v = np.zeros_like(params)
    elbos, hs = [], []
    for s in range(S_vae + 1):
        with np.errstate(invalid="ignore", over="ignore"):  # checked just below
            value, grad = elbo_and_gradient(params, y, L, P, const.points)
        if not (np.all(np.isfinite(value)) and np.all(np.isfinite(grad))):
            raise NumericalFailure("non-finite ELBO", s)
        elbos.append(value)
        if keep_trace:
            hs.append(unpack(params, P, L).theta.h)
        if s == S_vae:
            break
        m = ADAM_BETA1 * m + (1 - ADAM_BETA1) * grad
        v = ADAM_BETA2 * v + (1 - ADAM_BETA2) * grad ** 2
        mhat = m / (1 - ADAM_BETA1 ** (s + 1))
        vhat = v / (1 - ADAM_BETA2 ** (s + 1))
        params = params + lr[s] * mhat / (np.sqrt(vhat) + ADAM_EPS)
    state = unpack(params, P, L)
    state.theta.sigma2 = np.maximum(state.theta.sigma2, SIGMA2_FLOOR)
    elbo_trace = np.stack(elbos)
    h_trace = np.stack(hs) if keep_trace else None
    if single:
        st = VaeState(state.phi[0], state.theta[0], state.sigma2_vae[0])
        return VaeResult(st.theta, st, elbo_trace[:, 0], None if h_trace is None else h_trace[:, 0])
    return VaeResult(state.theta, state, elbo_trace, h_trace)
