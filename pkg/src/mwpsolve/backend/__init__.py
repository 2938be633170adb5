"""Numeric kernel backend selection.

The compiled Cython backend is used when its extension module built
successfully; otherwise the numpy fallback takes over transparently.
Set MWPSOLVE_BACKEND=py or =c to force one (forcing "c" raises if the
extension is missing). Both backends expose the same kernel functions
and the same numerics; see `numpy_kernels` for the reference semantics.
"""

import os

from . import numpy_kernels

_forced = os.environ.get("MWPSOLVE_BACKEND", "").lower()

if _forced == "py":
    kernels = numpy_kernels
elif _forced == "c":
    from . import _ckernels as kernels
else:
    try:
        from . import _ckernels as kernels
    except ImportError:
        kernels = numpy_kernels

BACKEND_NAME = kernels.NAME
