"""Kernel backend selection.

The compiled extension is used when it imports cleanly; otherwise the numpy
fallback is used. Setting ``ISOPROP_PURE_PYTHON=1`` forces the fallback.
"""
import importlib
import os

import numpy as np

from isoprop import _kernels_py

BACKENDS = ("cython", "python")


def load_backend(name):
    if name == "python":
        return _kernels_py
    if name == "cython":
        return importlib.import_module("isoprop._kernels")
    raise ValueError(f"unknown kernel backend {name!r}; expected one of {BACKENDS}")


def _select():
    if os.environ.get("ISOPROP_PURE_PYTHON", "") not in ("", "0"):
        return "python", _kernels_py
    try:
        return "cython", load_backend("cython")
    except ImportError:
        return "python", _kernels_py


BACKEND, _impl = _select()


def _c(a, dtype):
    return np.ascontiguousarray(a, dtype=dtype)


def cosine_matrix(Q, delta):
    return _impl.cosine_matrix(_c(Q, Q.dtype), float(delta))


def cosine_matrix_backward(Q, norms, C, gC, delta):
    t = Q.dtype
    return _impl.cosine_matrix_backward(_c(Q, t), _c(norms, t), _c(C, t), _c(gC, t), float(delta))


def masked_softmax(S, mask, gamma):
    return _impl.masked_softmax(_c(S, S.dtype), _c(mask, np.uint8), float(gamma))


def masked_softmax_backward(A, gA, gamma):
    return _impl.masked_softmax_backward(_c(A, A.dtype), _c(gA, A.dtype), float(gamma))


def relation_scores(U, V, w, b):
    t = U.dtype
    return _impl.relation_scores(_c(U, t), _c(V, t), _c(w, t), float(b))


def relation_scores_backward(U, V, w, gS):
    t = U.dtype
    return _impl.relation_scores_backward(_c(U, t), _c(V, t), _c(w, t), _c(gS, t))
