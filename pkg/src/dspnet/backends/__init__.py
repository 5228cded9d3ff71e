"""Conv kernel backend selection.

Two implementations of the conv kernels ship: compiled direct loops
(Cython) and numpy im2col on the BLAS path. On machines with a tuned BLAS
the numpy route wins at this package's production shapes (see
benchmarks/bench_conv.py), so it is the default; the compiled kernels win
scatter-heavy input gradients at larger feature maps and serve BLAS-poor
installs. `DSPNET_BACKEND=numpy|cython|auto` picks at import time;
`set_backend` switches at runtime (benchmark and cross-backend tests).
"""

import os

from . import numpy_backend

try:
    from . import _convkernels
except ImportError:
    _convkernels = None

_BACKENDS = {"numpy": numpy_backend}
if _convkernels is not None:
    _BACKENDS["cython"] = _convkernels


def _initial():
    choice = os.environ.get("DSPNET_BACKEND", "auto")
    if choice == "auto":
        return numpy_backend
    if choice not in _BACKENDS:
        raise ImportError(
            f"DSPNET_BACKEND={choice!r} unavailable; built backends: {sorted(_BACKENDS)}"
        )
    return _BACKENDS[choice]


_active = _initial()


def active_backend():
    return _active


def set_backend(name: str):
    global _active
    if name not in _BACKENDS:
        raise ValueError(f"unknown backend {name!r}; available: {sorted(_BACKENDS)}")
    _active = _BACKENDS[name]


def available_backends():
    return tuple(sorted(_BACKENDS))
