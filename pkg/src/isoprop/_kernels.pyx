# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled hot kernels. Signatures and semantics mirror ``_kernels_py``."""
import numpy as np
cimport cython
from cython cimport floating
from libc.math cimport sqrt, exp, fmax


def cosine_matrix(floating[:, ::1] Q, double delta):
    cdef Py_ssize_t n = Q.shape[0], d = Q.shape[1]
    cdef Py_ssize_t i, j, k
    cdef double acc
    dtype = np.float64 if floating is double else np.float32
    C_arr = np.empty((n, n), dtype=dtype)
    norms_arr = np.empty(n, dtype=dtype)
    cdef floating[:, ::1] C = C_arr
    cdef floating[::1] norms = norms_arr
    for i in range(n):
        acc = 0.0
        for k in range(d):
            acc = acc + Q[i, k] * Q[i, k]
        norms[i] = <floating>sqrt(acc)
    for i in range(n):
        for j in range(i, n):
            acc = 0.0
            for k in range(d):
                acc = acc + Q[i, k] * Q[j, k]
            C[i, j] = <floating>(acc / (<double>norms[i] * norms[j] + delta))
            C[j, i] = C[i, j]
    return C_arr, norms_arr


def cosine_matrix_backward(floating[:, ::1] Q, floating[::1] norms, floating[:, ::1] C,
                           floating[:, ::1] gC, double delta):
    cdef Py_ssize_t n = Q.shape[0], d = Q.shape[1]
    cdef Py_ssize_t i, j, k
    cdef double D, sym, coef, inv
    dtype = np.float64 if floating is double else np.float32
    gQ_arr = np.zeros((n, d), dtype=dtype)
    cdef floating[:, ::1] gQ = gQ_arr
    for i in range(n):
        coef = 0.0
        for j in range(n):
            D = <double>norms[i] * norms[j] + delta
            sym = gC[i, j] / D + gC[j, i] / D
            coef = coef + (gC[i, j] * C[i, j] + gC[j, i] * C[j, i]) / D * norms[j]
            for k in range(d):
                gQ[i, k] += <floating>(sym * Q[j, k])
        if norms[i] > 0:
            inv = coef / norms[i]
            for k in range(d):
                gQ[i, k] -= <floating>(inv * Q[i, k])
    return gQ_arr


def masked_softmax(floating[:, ::1] S, unsigned char[:, ::1] mask, double gamma):
    cdef Py_ssize_t n = S.shape[0], m = S.shape[1]
    cdef Py_ssize_t i, j
    cdef double top, total, z
    cdef bint seen
    dtype = np.float64 if floating is double else np.float32
    A_arr = np.zeros((n, m), dtype=dtype)
    cdef floating[:, ::1] A = A_arr
    for i in range(n):
        seen = False
        top = 0.0
        for j in range(m):
            if mask[i, j]:
                z = gamma * S[i, j]
                if not seen or z > top:
                    top = z
                    seen = True
        if not seen:
            continue
        total = 0.0
        for j in range(m):
            if mask[i, j]:
                z = exp(gamma * S[i, j] - top)
                A[i, j] = <floating>z
                total = total + z
        for j in range(m):
            if mask[i, j]:
                A[i, j] = <floating>(A[i, j] / total)
    return A_arr


def masked_softmax_backward(floating[:, ::1] A, floating[:, ::1] gA, double gamma):
    cdef Py_ssize_t n = A.shape[0], m = A.shape[1]
    cdef Py_ssize_t i, j
    cdef double inner
    dtype = np.float64 if floating is double else np.float32
    gS_arr = np.empty((n, m), dtype=dtype)
    cdef floating[:, ::1] gS = gS_arr
    for i in range(n):
        inner = 0.0
        for j in range(m):
            inner = inner + A[i, j] * gA[i, j]
        for j in range(m):
            gS[i, j] = <floating>(gamma * A[i, j] * (gA[i, j] - inner))
    return gS_arr


def relation_scores(floating[:, ::1] U, floating[:, ::1] V, floating[::1] w, double b):
    # Inner loop runs over classes against V transposed so it vectorizes.
    cdef Py_ssize_t q = U.shape[0], n = V.shape[0], h = U.shape[1]
    cdef Py_ssize_t i, j, k
    cdef floating u, wk, z
    dtype = np.float64 if floating is double else np.float32
    S_arr = np.empty((q, n), dtype=dtype)
    cdef floating[:, ::1] S = S_arr
    cdef floating[:, ::1] VT = np.ascontiguousarray(np.asarray(V).T)
    cdef floating* row
    cdef floating* vt
    for i in range(q):
        row = &S[i, 0]
        for j in range(n):
            row[j] = 0
        for k in range(h):
            u = U[i, k]
            wk = w[k]
            vt = &VT[k, 0]
            for j in range(n):
                z = u + vt[j]
                z = z if z > 0 else 0
                row[j] += wk * z
        for j in range(n):
            row[j] += <floating>b
    return S_arr


def relation_scores_backward(floating[:, ::1] U, floating[:, ::1] V, floating[::1] w,
                             floating[:, ::1] gS):
    cdef Py_ssize_t q = U.shape[0], n = V.shape[0], h = U.shape[1]
    cdef Py_ssize_t i, j, k
    cdef floating u, wk, z, g, acc_u, acc_w
    cdef double gb = 0.0
    dtype = np.float64 if floating is double else np.float32
    gU_arr = np.zeros((q, h), dtype=dtype)
    gVT_arr = np.zeros((h, n), dtype=dtype)
    gw_arr = np.zeros(h, dtype=dtype)
    cdef floating[:, ::1] gU = gU_arr
    cdef floating[:, ::1] gVT = gVT_arr
    cdef floating[::1] gw = gw_arr
    cdef floating[:, ::1] VT = np.ascontiguousarray(np.asarray(V).T)
    cdef floating* vt
    cdef floating* gvt
    cdef floating* gs
    for i in range(q):
        gs = &gS[i, 0]
        for j in range(n):
            gb += gs[j]
        for k in range(h):
            u = U[i, k]
            wk = w[k]
            vt = &VT[k, 0]
            gvt = &gVT[k, 0]
            acc_u = 0
            acc_w = 0
            for j in range(n):
                z = u + vt[j]
                g = gs[j] if z > 0 else 0
                z = z if z > 0 else 0
                acc_w += gs[j] * z
                acc_u += g
                gvt[j] += g * wk
            gw[k] += acc_w
            gU[i, k] = acc_u * wk
    return gU_arr, np.ascontiguousarray(gVT_arr.T), gw_arr, gb
