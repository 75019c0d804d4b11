"""Hot-loop kernels with a compiled backend and a numpy fallback.

The compiled ``_native`` extension is used when it was built; otherwise, or
when ``MVCORR_BACKEND=python`` is set, the pure numpy module is used.
"""

import os

from . import _pure

try:
    from . import _native
except ImportError:  # extension not built
    _native = None


def available():
    """Names of the importable backends, compiled first."""
    return [m.NAME for m in (_native, _pure) if m is not None]


def get_backend(name=None):
    if name is None:
        name = os.environ.get("MVCORR_BACKEND", "auto")
    if name == "auto":
        return _native if _native is not None else _pure
    if name == "python":
        return _pure
    if name == "native":
        if _native is None:
            raise ImportError("compiled mvcorr kernels are not built")
        return _native
    raise ValueError(f"unknown kernel backend {name!r}")


def use(name):
    """Switch the module-level kernel functions to another backend."""
    global backend, reproject, cosine_argmax, gather_attention, BACKEND
    backend = get_backend(name)
    reproject = backend.reproject
    cosine_argmax = backend.cosine_argmax
    gather_attention = backend.gather_attention
    BACKEND = backend.NAME


use(None)
