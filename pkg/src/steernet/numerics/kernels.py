"""Kernel backend selection.

The compiled extension is used when it imports cleanly; otherwise the numpy
reference kernels take over. Set ``STEERNET_PURE_PYTHON=1`` to force the
fallback (used by the benchmark and by the backend-parity tests).

Under the compiled backend, kernels listed in ``_NUMPY_FASTER`` still route
to numpy: their bodies are single transcendental sweeps where numpy's SIMD
loops beat scalar libm calls (see ``benchmarks/bench_kernels.py``).
"""

import os

from . import _pykernels

BACKEND = "python"
_impl = _pykernels

if os.environ.get("STEERNET_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _ckernels as _impl  # type: ignore[no-redef]

        BACKEND = "cython"
    except ImportError:  # extension not built
        _impl = _pykernels

_NUMPY_FASTER = frozenset({"softmax_fwd", "gelu_fwd", "gelu_bwd", "xent_fwd"})


def _pick(name):
    mod = _pykernels if name in _NUMPY_FASTER else _impl
    return getattr(mod, name)


layer_norm_fwd = _pick("layer_norm_fwd")
layer_norm_bwd = _pick("layer_norm_bwd")
softmax_fwd = _pick("softmax_fwd")
softmax_bwd = _pick("softmax_bwd")
gelu_fwd = _pick("gelu_fwd")
gelu_bwd = _pick("gelu_bwd")
xent_fwd = _pick("xent_fwd")
adam_update = _pick("adam_update")


def backend_module(name):
    """Return the kernel module for ``name`` ("python" or "cython")."""
    if name == "python":
        return _pykernels
    if name == "cython":
        from . import _ckernels

        return _ckernels
    raise ValueError(f"unknown kernel backend {name!r}")
