"""Pure numpy implementations of the hot kernels.

Reference semantics for the compiled ``_kernels`` module; both must agree to
rounding. Every function takes and returns C-contiguous arrays of a single
floating dtype.
"""
import numpy as np


def cosine_matrix(Q, delta):
    """All-pairs cosine similarity between the rows of ``Q``.

    Returns ``(C, norms)`` with ``C[i, j] = <q_i, q_j> / (|q_i| |q_j| + delta)``.
    ``C`` is exactly symmetric.
    """
    norms = np.sqrt(np.einsum("ij,ij->i", Q, Q))
    G = Q @ Q.T
    G = np.triu(G) + np.triu(G, 1).T
    C = G / (np.outer(norms, norms) + delta)
    return C, norms


def cosine_matrix_backward(Q, norms, C, gC, delta):
    D = np.outer(norms, norms) + delta
    GD = gC / D
    R = gC * C / D
    coef = R @ norms + R.T @ norms
    inv = np.divide(1.0, norms, out=np.zeros_like(norms), where=norms > 0)
    return (GD + GD.T) @ Q - Q * (coef * inv)[:, None]


def masked_softmax(S, mask, gamma):
    """Row-wise softmax of ``gamma * S`` restricted to ``mask != 0``.

    Entries outside the mask are exactly zero. A row with an empty mask is
    left all-zero.
    """
    keep = mask.astype(bool)
    Z = np.where(keep, gamma * S, -np.inf)
    top = Z.max(axis=1, keepdims=True)
    top = np.where(np.isfinite(top), top, 0.0)
    E = np.where(keep, np.exp(Z - top), 0.0)
    total = E.sum(axis=1, keepdims=True)
    return np.divide(E, total, out=np.zeros_like(E), where=total > 0).astype(S.dtype, copy=False)


def masked_softmax_backward(A, gA, gamma):
    inner = np.einsum("ij,ij->i", A, gA)
    return gamma * A * (gA - inner[:, None])


def relation_scores(U, V, w, b):
    """``S[i, j] = w . relu(U[i] + V[j]) + b`` for every query row i and class row j."""
    Z = U[:, None, :] + V[None, :, :]
    np.maximum(Z, 0.0, out=Z)
    return Z @ w + b


def relation_scores_backward(U, V, w, gS):
    """Gradients ``(gU, gV, gw, gb)`` of ``sum(gS * relation_scores(U, V, w, b))``."""
    Z = U[:, None, :] + V[None, :, :]
    active = Z > 0
    H = np.where(active, Z, 0.0)
    gw = np.einsum("ij,ijk->k", gS, H)
    gZ = np.where(active, gS[:, :, None] * w, 0.0)
    return gZ.sum(axis=1), gZ.sum(axis=0), gw.astype(U.dtype, copy=False), gS.sum()
