"""Hot-kernel dispatch: compiled extension when built, numpy fallback otherwise.

Set ``DUALATTN_PURE=1`` to force the fallback (used by the benchmark and the
cross-backend tests).
"""
import os

from . import _kernels_py as python_backend

compiled_backend = None
if os.environ.get("DUALATTN_PURE", "") not in ("1", "true", "yes"):
    try:
        from . import _kernels as compiled_backend
    except ImportError:
        compiled_backend = None

_active = compiled_backend or python_backend
BACKEND = "compiled" if compiled_backend is not None else "python"

im2col = _active.im2col
col2im = _active.col2im
ranked_average_precision = _active.ranked_average_precision
