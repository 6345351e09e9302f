"""Hot inner-loop kernels with a compiled core and a pure-numpy fallback.

The compiled extension (``panosynth.kernels._core``, Cython) is preferred and
selected at import time; if it is missing (source checkout without a build
step) the numpy implementations in ``_fallback`` are used instead.  Set
``PANOSYNTH_KERNELS=numpy`` or ``PANOSYNTH_KERNELS=cython`` to force a
backend.  Both backends implement identical semantics; see
``benchmarks/bench_kernels.py`` for a speed comparison.
"""

import importlib
import os

from . import _fallback

_requested = os.environ.get("PANOSYNTH_KERNELS", "").strip().lower()

_core = None
if _requested != "numpy":
    try:
        _core = importlib.import_module("._core", __name__)
    except ImportError:
        if _requested == "cython":
            raise ImportError(
                "PANOSYNTH_KERNELS=cython but the compiled extension is not "
                "built; run `pip install -e . --no-build-isolation`"
            ) from None

_impl = _core if _core is not None else _fallback

BACKEND = "cython" if _core is not None else "numpy"

im2col = _impl.im2col
col2im = _impl.col2im
nearest_codebook = _impl.nearest_codebook
rgbe_rle_decode = _impl.rgbe_rle_decode


def get_backend(name=None):
    """Return the kernel namespace for `name` (default: the selected one)."""
    if name is None:
        return _impl
    if name == "numpy":
        return _fallback
    if name == "cython":
        if _core is None:
            raise ImportError("compiled kernel extension is not available")
        return _core
    raise ValueError(f"unknown kernel backend {name!r}")
