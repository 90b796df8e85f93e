"""Pick the compiled Jacobi kernels when available.

Set ``FEDDUAP_PURE_PYTHON=1`` to force the numpy fallback.
"""

import os

from . import _pykernels

BACKEND = "python"
kernels = _pykernels

if not os.environ.get("FEDDUAP_PURE_PYTHON"):
    try:
        from . import _core as kernels  # noqa: F811

        BACKEND = "cython"
    except ImportError:
        pass
