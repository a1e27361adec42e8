"""Kernel backend selection.

The convolution gathers/scatters and depthwise loops dominate training time,
so they exist twice: compiled (``change3d._core``, Cython) and pure numpy
(``change3d._kernels_np``).  The compiled module is preferred when importable;
``CHANGE3D_BACKEND=numpy|cython`` forces a choice.  ``benchmarks/bench_kernels.py``
compares the two.
"""

from __future__ import annotations

import os

from change3d import _kernels_np

try:
    from change3d import _core
except ImportError:
    _core = None

_KERNEL_NAMES = (
    "im2col3d",
    "col2im3d",
    "im2col2d",
    "col2im2d",
    "dwconv3d",
    "dwconv3d_grad_input",
    "dwconv3d_grad_weight",
)


class Kernels:
    """Bound kernel functions for one backend."""

    def __init__(self, module, name: str):
        self.name = name
        for fn in _KERNEL_NAMES:
            setattr(self, fn, getattr(module, fn))


def available_backends() -> list[str]:
    names = ["numpy"]
    if _core is not None:
        names.insert(0, "cython")
    return names


def get_kernels(name: str | None = None) -> Kernels:
    """Resolve a backend by name; None/'auto' follows env then availability."""
    if name is None or name == "auto":
        name = os.environ.get("CHANGE3D_BACKEND", "auto")
    if name == "auto":
        name = "cython" if _core is not None else "numpy"
    if name == "cython":
        if _core is None:
            raise RuntimeError(
                "compiled backend requested but change3d._core is not built; "
                "reinstall without CHANGE3D_SKIP_EXT or use CHANGE3D_BACKEND=numpy"
            )
        return Kernels(_core, "cython")
    if name == "numpy":
        return Kernels(_kernels_np, "numpy")
    raise ValueError(f"unknown backend {name!r} (expected cython|numpy|auto)")


kernels = get_kernels()


def set_backend(name: str) -> Kernels:
    """Switch the process-wide default backend (mainly for tests/benchmarks)."""
    global kernels
    kernels = get_kernels(name)
    return kernels
