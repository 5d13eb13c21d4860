"""Pure numpy implementations of the hot loops.

Array layout shared with the compiled kernels (all float64, C-contiguous):

``F``      (B, N, M)          local factor F_n(c)
``I``      (B, N, L, M, M)    I[b, n, d-1, i, j] = I_{n, n-d}(c_n = i, c_{n-d} = j)
``mu_hi``  (B, N, L, M)       mu_{n, n-d}(c_n)      variable n   -> factor
``mu_lo``  (B, N, L, M)       mu_{n, n-d}(c_{n-d})  variable n-d -> factor
``nu_hi``  (B, N, L, M)       nu_{n, n-d}(c_n)      factor -> variable n
``nu_lo``  (B, N, L, M)       nu_{n, n-d}(c_{n-d})  factor -> variable n-d

Slots with ``n - d < 0`` hold no factor; their messages stay uniform and are
never summed into a variable node.
"""
from __future__ import annotations

import numpy as np

NEG = -1e250


def logsumexp(a: np.ndarray, axis: int = -1) -> np.ndarray:
    m = np.max(a, axis=axis, keepdims=True)
    out = np.log(np.sum(np.exp(a - m), axis=axis, keepdims=True)) + m
    return np.squeeze(out, axis=axis)


def normalize(msg: np.ndarray) -> np.ndarray:
    """Shift each length-M vector so that its log-sum-exp is zero."""
    return msg - logsumexp(msg)[..., None]


def incoming(F, nu_hi, nu_lo):
    """F_n plus every factor message arriving at variable n."""
    N, L = F.shape[1], nu_hi.shape[2]
    S = F.copy()
    for d in range(1, L + 1):
        S[:, d:] += nu_hi[:, d:, d - 1]
        S[:, :N - d] += nu_lo[:, d:, d - 1]
    return S


def _combine(new, old, beta):
    if beta == 1.0:
        return new
    return normalize(beta * new + (1.0 - beta) * old)


def _reset_unused(*msgs):
    uniform = -np.log(msgs[0].shape[-1])
    for msg in msgs:
        for d in range(1, msg.shape[2] + 1):
            msg[:, :d, d - 1] = uniform


def bp_sweep(F, I, mu_hi, mu_lo, nu_hi, nu_lo, beta):
    """One flooding iteration: variable updates from the old factor messages,
    then factor updates from the new variable messages."""
    if beta == 0.0:
        return mu_hi.copy(), mu_lo.copy(), nu_hi.copy(), nu_lo.copy()
    N, L = F.shape[1], I.shape[2]
    S = incoming(F, nu_hi, nu_lo)
    new_hi = S[:, :, None, :] - nu_hi
    new_lo = np.empty_like(mu_lo)
    for d in range(1, L + 1):
        new_lo[:, d:, d - 1] = S[:, :N - d] - nu_lo[:, d:, d - 1]
        new_lo[:, :d, d - 1] = 0.0
    new_hi = _combine(normalize(new_hi), mu_hi, beta)
    new_lo = _combine(normalize(new_lo), mu_lo, beta)
    _reset_unused(new_hi, new_lo)
    # nu(c_n) = lse_j I[i, j] + mu_lo[j];  nu(c_m) = lse_i I[i, j] + mu_hi[i]
    f_hi = logsumexp(I + new_lo[..., None, :], axis=-1)
    f_lo = logsumexp(I + new_hi[..., :, None], axis=-2)
    f_hi = _combine(normalize(f_hi), nu_hi, beta)
    f_lo = _combine(normalize(f_lo), nu_lo, beta)
    _reset_unused(f_hi, f_lo)
    return new_hi, new_lo, f_hi, f_lo


def _branch_tables(I):
    """branch[b, n, c_n, c_{n-1}, ..., c_{n-L}] = sum_d I_{n, n-d}(c_n, c_{n-d})."""
    B, N, L, M, _ = I.shape
    shape = (B, N) + (M,) * (L + 1)
    br = np.zeros(shape)
    for d in range(1, L + 1):
        view = [B, N, M] + [1] * L
        view[2 + d] = M
        table = I[:, :, d - 1].copy()
        table[:, :d] = 0.0  # no factor before the block start
        br += table.reshape(view)
    return br


def bcjr(F, I, pairs: bool = False):
    """Exact symbol marginals and log Z = log sum_c exp(sum F + sum I).

    With ``pairs=True`` also returns joint marginals P(c_n, c_{n-d}) in the
    (B, N, L, M, M) layout of ``I``.
    """
    B, N, M = F.shape
    L = I.shape[2]
    if L == 0:
        logZ = logsumexp(F).sum(axis=1)
        marg = np.exp(normalize(F))
        return (marg, logZ, np.zeros((B, N, 0, M, M))) if pairs else (marg, logZ)
    S = M ** L
    br = _branch_tables(I).reshape(B, N, M, S)  # (c_n, [c_{n-1}..c_{n-L}])
    alpha = np.empty((B, N, S))  # state (c_n, ..., c_{n-L+1})
    prev = np.full((B, S), NEG)
    prev[:, 0] = 0.0
    for n in range(N):
        t = prev[:, None, :] + br[:, n] + F[:, n, :, None]  # (B, M, S)
        t = t.reshape(B, S, M)  # trailing axis is c_{n-L}
        prev = logsumexp(t, axis=-1)
        alpha[:, n] = prev
    beta = np.empty((B, N, S))
    nxt = np.zeros((B, S))
    beta[:, N - 1] = nxt
    for n in range(N - 1, 0, -1):
        # state at n-1 is (c_{n-1}..c_{n-L}); sum over c_n
        t = br[:, n] + F[:, n, :, None] + np.repeat(nxt.reshape(B, M, S // M), M, axis=-1)
        nxt = logsumexp(t, axis=1)
        beta[:, n - 1] = nxt
    logZ = logsumexp(alpha[:, N - 1], axis=-1)
    post = (alpha + beta - logZ[:, None, None]).reshape(B, N, M, S // M)
    marg = np.exp(logsumexp(post, axis=-1))
    marg /= marg.sum(axis=-1, keepdims=True)
    if not pairs:
        return marg, logZ
    joint = np.zeros((B, N, L, M, M))
    for n in range(N):
        prev_alpha = np.full((B, S), NEG)
        if n == 0:
            prev_alpha[:, 0] = 0.0
        else:
            prev_alpha = alpha[:, n - 1]
        # full transition (c_n, c_{n-1}, ..., c_{n-L})
        t = prev_alpha[:, None, :] + br[:, n] + F[:, n, :, None]
        t = t + np.repeat(beta[:, n].reshape(B, M, S // M), M, axis=-1)
        p = np.exp(t - logZ[:, None, None]).reshape((B,) + (M,) * (L + 1))
        for d in range(1, min(L, n) + 1):
            axes = tuple(a for a in range(2, L + 2) if a != 1 + d)
            joint[:, n, d - 1] = p.sum(axis=axes)
    return marg, logZ, joint
