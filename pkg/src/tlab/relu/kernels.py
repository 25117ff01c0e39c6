"""Backend selection for the hot ReLU kernels.

The compiled arccos Gram is used when importable; set TLAB_BACKEND=python to
force the numpy implementation. The masked outer product in backprop stays in
numpy for both backends because a compiled loop measured slower than the
vectorized version (see benchmarks/bench_kernels.py).
"""
import os

from . import _pykernels

BACKEND = "python"
_impl = _pykernels
if os.environ.get("TLAB_BACKEND", "").lower() != "python":
    try:
        from . import _ckernels as _impl  # noqa: F811

        BACKEND = "cython"
    except ImportError:
        _impl = _pykernels

arccos_kernel_matrix = _impl.arccos_kernel_matrix
relu_backprop = _pykernels.relu_backprop
