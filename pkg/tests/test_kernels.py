import os
import subprocess
import sys

import numpy as np
import pytest

from isoprop import kernels
from isoprop.kernels import load_backend

try:
    compiled = load_backend("cython")
except ImportError:  # extension not built
    compiled = None

fallback = load_backend("python")
needs_ext = pytest.mark.skipif(compiled is None, reason="compiled extension not built")


def inputs(rng, dtype, q=7, n=5, h=6):
    S = rng.normal(size=(n, n)).astype(dtype)
    mask = (rng.random((n, n)) < 0.5).astype(np.uint8)
    np.fill_diagonal(mask, 1)
    return dict(Q=rng.normal(size=(n, h)).astype(dtype), S=S, mask=mask,
                U=rng.normal(size=(q, h)).astype(dtype), V=rng.normal(size=(n, h)).astype(dtype),
                w=rng.normal(size=h).astype(dtype), gS=rng.normal(size=(q, n)).astype(dtype),
                gC=rng.normal(size=(n, n)).astype(dtype))


def outputs(k, x):
    C, norms = k.cosine_matrix(x["Q"], 1e-12)
    A = k.masked_softmax(x["S"], x["mask"], 10.0)
    return [C, norms, k.cosine_matrix_backward(x["Q"], norms, C, x["gC"], 1e-12), A,
            k.masked_softmax_backward(A, x["gC"], 10.0), k.relation_scores(x["U"], x["V"], x["w"], 0.5),
            *k.relation_scores_backward(x["U"], x["V"], x["w"], x["gS"])]


@needs_ext
@pytest.mark.parametrize("dtype,tol", [(np.float64, 1e-12), (np.float32, 2e-5)])
@pytest.mark.parametrize("shape", [(1, 1, 1), (7, 5, 6), (40, 12, 33)])
def test_backends_agree(dtype, tol, shape, rng):
    x = inputs(rng, dtype, *shape)
    for a, b in zip(outputs(compiled, x), outputs(fallback, x)):
        a, b = np.asarray(a), np.asarray(b)
        assert a.shape == b.shape
        if a.ndim:
            assert a.dtype == b.dtype == dtype
        scale = max(1.0, float(np.max(np.abs(b))))
        assert np.max(np.abs(a - b)) <= tol * scale


def test_cosine_matrix_symmetric_exact(rng):
    Q = rng.normal(size=(9, 4))
    C, _ = kernels.cosine_matrix(Q, 1e-12)
    assert np.array_equal(C, C.T)


def test_masked_softmax_zero_outside_mask(rng):
    x = inputs(rng, np.float64)
    A = kernels.masked_softmax(x["S"], x["mask"], 10.0)
    assert np.all(A[x["mask"] == 0] == 0)
    np.testing.assert_allclose(A.sum(axis=1), 1.0, atol=1e-12)


def test_selected_backend_is_known():
    assert kernels.BACKEND in kernels.BACKENDS


def test_unknown_backend():
    with pytest.raises(ValueError):
        load_backend("fortran")


def test_pure_python_switch():
    env = {**os.environ, "ISOPROP_PURE_PYTHON": "1"}
    out = subprocess.run([sys.executable, "-c", "import isoprop; print(isoprop.BACKEND)"],
                         env=env, capture_output=True, text=True, check=True)
    assert out.stdout.strip() == "python"
