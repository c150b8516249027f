"""Backend selection for the convolution and batch-norm kernels.

The compiled extension is used when it imports; ``CODATS_KERNELS=numpy``
forces the pure-numpy fallback.
"""

import os

from . import _kernels_py

_forced = os.environ.get("CODATS_KERNELS", "").strip().lower()

backend = _kernels_py
if _forced != "numpy":
    try:
        from . import _ckernels as backend  # type: ignore[no-redef]
    except ImportError:
        if _forced in ("c", "cython", "compiled"):
            raise
        backend = _kernels_py


def use(name):
    """Switch the active backend at runtime ("numpy" or "cython")."""
    global backend
    if name == "numpy":
        backend = _kernels_py
    elif name in ("c", "cython", "compiled"):
        from . import _ckernels

        backend = _ckernels
    else:
        raise ValueError(f"unknown kernel backend {name!r}")
    return backend


def available():
    names = ["numpy"]
    try:
        from . import _ckernels  # noqa: F401

        names.append("cython")
    except ImportError:
        pass
    return names


def conv1d_forward(x, w):
    return backend.conv1d_forward(x, w)


def conv1d_backward(g, x_shape, w, cols, need_x=True):
    return backend.conv1d_backward(g, x_shape, w, cols, need_x)


def batchnorm_train_forward(x, gamma, beta, eps):
    return backend.batchnorm_train_forward(x, gamma, beta, eps)


def batchnorm_train_backward(g, xhat, inv_std, gamma):
    return backend.batchnorm_train_backward(g, xhat, inv_std, gamma)
