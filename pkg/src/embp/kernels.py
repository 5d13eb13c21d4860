"""Backend selection for the hot loops.

The compiled extension is used when it was built; otherwise, or when the
environment variable ``EMBP_PURE_PYTHON`` is set to a non-empty value other
than ``0``, the numpy implementations are used.  Both expose the same
functions with the same array layout (see ``_npkernels``).
"""
from __future__ import annotations

import os

import numpy as np

from . import _npkernels

try:
    from . import _ckernels
except ImportError:  # extension not built
    _ckernels = None

_FORCE_PURE = os.environ.get("EMBP_PURE_PYTHON", "") not in ("", "0")

logsumexp = _npkernels.logsumexp
normalize = _npkernels.normalize
incoming = _npkernels.incoming


def compiled_available() -> bool:
    return _ckernels is not None


def backend_name() -> str:
    return "cython" if (_ckernels is not None and not _FORCE_PURE) else "numpy"


def _module(backend: str | None):
    backend = backend or backend_name()
    if backend == "cython":
        if _ckernels is None:
            raise ImportError("compiled kernels are not built")
        return _ckernels
    if backend == "numpy":
        return _npkernels
    raise ValueError(f"unknown backend {backend!r}")


def bp_sweep(F, I, mu_hi, mu_lo, nu_hi, nu_lo, beta, backend: str | None = None):
    mod = _module(backend)
    arrays = [np.ascontiguousarray(a, dtype=float) for a in (F, I, mu_hi, mu_lo, nu_hi, nu_lo)]
    return mod.bp_sweep(*arrays, float(beta))


def bcjr(F, I, pairs: bool = False, backend: str | None = None):
    if pairs:
        return _npkernels.bcjr(F, I, pairs=True)
    mod = _module(backend)
    return mod.bcjr(np.ascontiguousarray(F, dtype=float), np.ascontiguousarray(I, dtype=float))
