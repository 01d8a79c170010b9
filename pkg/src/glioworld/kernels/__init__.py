"""Hot numeric kernels with a numba fast path and a pure-numpy fallback.

The backend is chosen once at import time: set ``GLIOWORLD_DISABLE_NUMBA=1``
to force the numpy path (useful on machines where JIT compilation is not
worth it, and for A/B benchmarking). If numba is not importable the numpy
path is used silently.

Both backends implement the same functions with identical semantics:

- ``trilinear_resize(x, out_shape)``: align-corners trilinear interpolation
  of a channel-first 3D grid.
- ``trilinear_resize_adjoint(grad, in_shape)``: exact adjoint of the above
  (the backward pass of upsampling).
- ``ssim3d_mean(x, y, win, c1, c2)``: mean SSIM over all valid cubic windows.
- ``sphere_labels(shape, center, radii)``: concentric-sphere region labels
  (0=BG, 1=ED, 2=ET, 3=NET, 4=CAV) from squared-distance binning.
"""

import os

from . import _numpy as _np_impl

_FLAG = os.environ.get("GLIOWORLD_DISABLE_NUMBA", "0").strip().lower()
_want_numba = _FLAG not in ("1", "true", "yes")

_nb_impl = None
if _want_numba:
    try:
        from . import _numba as _nb_impl
    except ImportError:  # pragma: no cover - numba missing entirely
        _nb_impl = None

_active = _nb_impl if _nb_impl is not None else _np_impl

trilinear_resize = _active.trilinear_resize
trilinear_resize_adjoint = _active.trilinear_resize_adjoint
ssim3d_mean = _active.ssim3d_mean
sphere_labels = _active.sphere_labels


def backend_name() -> str:
    return "numba" if _active is not _np_impl else "numpy"


def implementations(name: str) -> dict:
    """Return {'numpy': fn, 'numba': fn or None} for benchmarking/tests."""
    out = {"numpy": getattr(_np_impl, name)}
    out["numba"] = getattr(_nb_impl, name) if _nb_impl is not None else None
    return out
