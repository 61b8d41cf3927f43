"""Selects the convolution kernels at import time.

The compiled extension is preferred. Setting ``DYNSUBNET_PURE_PYTHON=1``
forces the numpy fallback, as does a missing or broken build.
"""

import os

from . import _kernels_py

BACKEND = "python"
im2col = _kernels_py.im2col
col2im = _kernels_py.col2im

if os.environ.get("DYNSUBNET_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _kernels as _compiled
    except ImportError:
        pass
    else:
        BACKEND = "cython"
        im2col = _compiled.im2col
        col2im = _compiled.col2im
