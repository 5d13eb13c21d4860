# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled counterparts of ``_npkernels.bp_sweep`` and ``_npkernels.bcjr``."""
import numpy as np
cimport numpy as cnp
from libc.math cimport exp, log

cnp.import_array()

cdef double NEG = -1e250


cdef inline double _lse(double* a, Py_ssize_t M) noexcept nogil:
    cdef Py_ssize_t k
    cdef double m = a[0], s = 0.0
    for k in range(1, M):
        if a[k] > m:
            m = a[k]
    for k in range(M):
        s += exp(a[k] - m)
    return m + log(s)


cdef inline void _normalize(double* a, Py_ssize_t M) noexcept nogil:
    cdef double z = _lse(a, M)
    cdef Py_ssize_t k
    for k in range(M):
        a[k] -= z


cdef inline void _combine(double* new, double* old, double beta, Py_ssize_t M) noexcept nogil:
    cdef Py_ssize_t k
    if beta == 1.0:
        return
    for k in range(M):
        new[k] = beta * new[k] + (1.0 - beta) * old[k]
    _normalize(new, M)


def bp_sweep(double[:, :, ::1] F, double[:, :, :, :, ::1] I,
             double[:, :, :, ::1] mu_hi, double[:, :, :, ::1] mu_lo,
             double[:, :, :, ::1] nu_hi, double[:, :, :, ::1] nu_lo, double beta):
    cdef Py_ssize_t B = F.shape[0], N = F.shape[1], M = F.shape[2], L = I.shape[2]
    out_mu_hi = np.empty((B, N, L, M))
    out_mu_lo = np.empty((B, N, L, M))
    out_nu_hi = np.empty((B, N, L, M))
    out_nu_lo = np.empty((B, N, L, M))
    if beta == 0.0:
        out_mu_hi[...] = mu_hi
        out_mu_lo[...] = mu_lo
        out_nu_hi[...] = nu_hi
        out_nu_lo[...] = nu_lo
        return out_mu_hi, out_mu_lo, out_nu_hi, out_nu_lo
    cdef double[:, :, :, ::1] mh = out_mu_hi, ml = out_mu_lo, fh = out_nu_hi, fl = out_nu_lo
    cdef double[:, ::1] S = np.empty((N, M))
    cdef double[::1] tmp = np.empty(M)
    cdef Py_ssize_t b, n, d, i, j
    cdef double uniform = -log(<double> M)
    with nogil:
        for b in range(B):
            for n in range(N):
                for i in range(M):
                    S[n, i] = F[b, n, i]
            for n in range(N):
                for d in range(1, L + 1):
                    if n - d < 0:
                        break
                    for i in range(M):
                        S[n, i] += nu_hi[b, n, d - 1, i]
                        S[n - d, i] += nu_lo[b, n, d - 1, i]
            for n in range(N):
                for d in range(1, L + 1):
                    if n - d < 0:
                        for i in range(M):
                            mh[b, n, d - 1, i] = uniform
                            ml[b, n, d - 1, i] = uniform
                            fh[b, n, d - 1, i] = uniform
                            fl[b, n, d - 1, i] = uniform
                        continue
                    for i in range(M):
                        mh[b, n, d - 1, i] = S[n, i] - nu_hi[b, n, d - 1, i]
                        ml[b, n, d - 1, i] = S[n - d, i] - nu_lo[b, n, d - 1, i]
                    _normalize(&mh[b, n, d - 1, 0], M)
                    _normalize(&ml[b, n, d - 1, 0], M)
                    _combine(&mh[b, n, d - 1, 0], &mu_hi[b, n, d - 1, 0], beta, M)
                    _combine(&ml[b, n, d - 1, 0], &mu_lo[b, n, d - 1, 0], beta, M)
                    for i in range(M):
                        for j in range(M):
                            tmp[j] = I[b, n, d - 1, i, j] + ml[b, n, d - 1, j]
                        fh[b, n, d - 1, i] = _lse(&tmp[0], M)
                    for j in range(M):
                        for i in range(M):
                            tmp[i] = I[b, n, d - 1, i, j] + mh[b, n, d - 1, i]
                        fl[b, n, d - 1, j] = _lse(&tmp[0], M)
                    _normalize(&fh[b, n, d - 1, 0], M)
                    _normalize(&fl[b, n, d - 1, 0], M)
                    _combine(&fh[b, n, d - 1, 0], &nu_hi[b, n, d - 1, 0], beta, M)
                    _combine(&fl[b, n, d - 1, 0], &nu_lo[b, n, d - 1, 0], beta, M)
    return out_mu_hi, out_mu_lo, out_nu_hi, out_nu_lo


def bcjr(double[:, :, ::1] F, double[:, :, :, :, ::1] I):
    """Forward-backward over the M**L trellis; returns (marginals, logZ)."""
    cdef Py_ssize_t B = F.shape[0], N = F.shape[1], M = F.shape[2], L = I.shape[2]
    cdef Py_ssize_t S = M ** L, SM = S // M if L > 0 else 1
    marg_arr = np.zeros((B, N, M))
    logZ_arr = np.zeros(B)
    cdef double[:, :, ::1] marg = marg_arr
    cdef double[::1] logZ = logZ_arr
    cdef double[:, ::1] alpha = np.empty((N, S))
    cdef double[:, ::1] beta = np.empty((N, S))
    cdef double[::1] prev = np.empty(S)
    cdef double[::1] tmp = np.empty(M)
    cdef double[:, ::1] br = np.empty((M, S))
    cdef Py_ssize_t[:, ::1] digit = np.empty((max(S, 1), max(L, 1)), dtype=np.intp)
    cdef Py_ssize_t b, n, d, s, k, c, nxt_state, st, p
    cdef double acc, z, tot
    if L == 0:
        for b in range(B):
            tot = 0.0
            for n in range(N):
                z = _lse(&F[b, n, 0], M)
                tot += z
                for c in range(M):
                    marg[b, n, c] = exp(F[b, n, c] - z)
            logZ[b] = tot
        return marg_arr, logZ_arr
    # digit[s, d-1] = index of c_{n-d} in the previous state s = (c_{n-1}, ..., c_{n-L})
    for s in range(S):
        p = s
        for d in range(L, 0, -1):
            digit[s, d - 1] = p % M
            p = p // M
    with nogil:
        for b in range(B):
            for s in range(S):
                prev[s] = NEG
            prev[0] = 0.0
            for n in range(N):
                for c in range(M):
                    for s in range(S):
                        acc = F[b, n, c]
                        for d in range(1, L + 1):
                            if n - d >= 0:
                                acc = acc + I[b, n, d - 1, c, digit[s, d - 1]]
                        br[c, s] = acc + prev[s]
                # new state (c, s // M) collects the M predecessors s that differ in c_{n-L}
                for c in range(M):
                    for st in range(SM):
                        for k in range(M):
                            tmp[k] = br[c, st * M + k]
                        alpha[n, c * SM + st] = _lse(&tmp[0], M)
                for s in range(S):
                    prev[s] = alpha[n, s]
            for s in range(S):
                beta[N - 1, s] = 0.0
            for n in range(N - 1, 0, -1):
                for s in range(S):
                    for c in range(M):
                        acc = F[b, n, c]
                        for d in range(1, L + 1):
                            if n - d >= 0:
                                acc = acc + I[b, n, d - 1, c, digit[s, d - 1]]
                        nxt_state = c * SM + s // M
                        tmp[c] = acc + beta[n, nxt_state]
                    beta[n - 1, s] = _lse(&tmp[0], M)
            z = _lse(&alpha[N - 1, 0], S)
            logZ[b] = z
            for n in range(N):
                for c in range(M):
                    for k in range(SM):
                        prev[k] = alpha[n, c * SM + k] + beta[n, c * SM + k]
                    marg[b, n, c] = exp(_lse(&prev[0], SM) - z)
                tot = 0.0
                for c in range(M):
                    tot += marg[b, n, c]
                for c in range(M):
                    marg[b, n, c] /= tot
    return marg_arr, logZ_arr
