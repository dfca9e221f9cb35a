"""Hot-loop kernels with a compiled core and a numpy fallback.

The compiled extension is used when it imports; set ``UTSRMORPH_PURE_PYTHON=1``
to force the fallback. ``BACKEND`` names the active implementation.
"""
import os

from . import _pykernels

python_impl = _pykernels
compiled_impl = None

if os.environ.get("UTSRMORPH_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _ckernels as compiled_impl
    except ImportError:  # extension not built
        compiled_impl = None

_impl = compiled_impl if compiled_impl is not None else python_impl
BACKEND = "cython" if compiled_impl is not None else "python"

im2col = _impl.im2col
col2im = _impl.col2im
trilinear_forward = _impl.trilinear_forward
trilinear_backward = _impl.trilinear_backward


def implementations():
    """Return ``{name: module}`` for every available backend."""
    impls = {"python": python_impl}
    if compiled_impl is not None:
        impls["cython"] = compiled_impl
    return impls
