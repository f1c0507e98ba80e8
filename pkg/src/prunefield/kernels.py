"""Hot-kernel dispatch: compiled extension when available, numpy fallback otherwise.

Set ``PRUNEFIELD_PURE_PYTHON=1`` to force the fallback.
"""
import os

from . import _kernels_py as py_impl

BACKEND = "python"
compiled_impl = None

if os.environ.get("PRUNEFIELD_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _kernels as compiled_impl  # type: ignore[attr-defined]

        BACKEND = "cython"
    except ImportError:
        compiled_impl = None

_impl = compiled_impl if compiled_impl is not None else py_impl

composite_forward = _impl.composite_forward
composite_backward = _impl.composite_backward
fh_merge = _impl.fh_merge
