"""Kernel backend selection.

The compiled extension ``cer._ckernels`` is used when it was built; otherwise
the numpy versions in ``cer._pykernels`` are used. ``CER_KERNELS=python`` or
``CER_KERNELS=cython`` forces a choice at import time, and
:func:`set_backend` switches at runtime (tests and the benchmark use it).
"""
import importlib
import os

from cer import _pykernels

_NAMES = (
    "softmax_forward",
    "softmax_backward",
    "layernorm_forward",
    "layernorm_backward",
    "segment_max_forward",
)

BACKEND = "python"


def available_backends():
    out = ["python"]
    try:
        importlib.import_module("cer._ckernels")
    except ImportError:
        return out
    return out + ["cython"]


def set_backend(name):
    global BACKEND
    if name == "python":
        impl = _pykernels
    elif name == "cython":
        impl = importlib.import_module("cer._ckernels")
    else:
        raise ValueError(f"unknown kernel backend {name!r}")
    g = globals()
    for fn in _NAMES:
        g[fn] = getattr(impl, fn)
    BACKEND = name


def _init():
    choice = os.environ.get("CER_KERNELS", "auto").lower()
    if choice == "auto":
        set_backend("cython" if "cython" in available_backends() else "python")
    else:
        set_backend(choice)


_init()
