"""Dense reverse-mode differentiation over numpy arrays.

Operations executed inside an active :class:`Tape` are appended to it in
execution order, so replaying the tape backwards visits every node after all
of its consumers. Outside a tape the same functions just compute values.

    >>> W = Tensor(np.eye(2), requires_grad=True)
    >>> with Tape() as tape:
    ...     loss = total(relu(linear(Tensor([1.0, -2.0]), W)))
    >>> tape.backward(loss)
    >>> W.grad.tolist()
    [[1.0, -2.0], [0.0, 0.0]]
"""
from __future__ import annotations

import numpy as np

from isoprop import kernels
from isoprop.errors import ContractError, DegenerateInputError, DimensionError

COSINE_GUARD = 1e-12

_tapes: list["Tape"] = []


class Tensor:
    """An array value with an optional gradient slot."""

    __slots__ = ("data", "grad", "requires_grad", "op", "node_id", "_parents", "_backward")

    def __init__(self, data, requires_grad=False, dtype=None, op="leaf"):
        self.data = np.asarray(data, dtype=dtype)
        if self.data.dtype.kind != "f":
            self.data = self.data.astype(np.float64)
        self.grad = None
        self.requires_grad = requires_grad
        self.op = op
        self.node_id = None
        self._parents = ()
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def zero_grad(self):
        self.grad = None if self.grad is None else np.zeros_like(self.data)

    def item(self):
        return float(self.data)

    def numpy(self):
        return self.data

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, op={self.op!r}{flag})"

    def _accumulate(self, g):
        if g.shape != self.data.shape:
            g = _unbroadcast(g, self.data.shape)
        if self.grad is None:
            self.grad = np.array(g, dtype=self.data.dtype, copy=True)
        else:
            self.grad += g


class Tape:
    """Ordered record of executed primitive operations (the computation record)."""

    def __init__(self):
        self.nodes: list[Tensor] = []

    def __enter__(self):
        _tapes.append(self)
        return self

    def __exit__(self, *exc):
        _tapes.remove(self)
        return False

    def __len__(self):
        return len(self.nodes)

    def record(self, node):
        node.node_id = len(self.nodes)
        self.nodes.append(node)

    def backward(self, loss):
        backward(self, loss)

    def first_nonfinite(self):
        """The earliest recorded node holding a NaN or Inf, or None."""
        for node in self.nodes:
            if not np.all(np.isfinite(node.data)):
                return node
        return None


def current_tape():
    return _tapes[-1] if _tapes else None


def as_tensor(x, dtype=None):
    if isinstance(x, Tensor):
        return x
    return Tensor(x, dtype=dtype, op="const")


def _unbroadcast(g, shape):
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _node(data, parents, backward, op):
    out = Tensor(data, op=op)
    tape = current_tape()
    if tape is not None and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
        tape.record(out)
    return out


def backward(record: Tape, loss: Tensor):
    """Populate ``grad`` on every trainable tensor reachable from ``loss``.

    Gradients add onto whatever is already stored; callers zero them between
    episodes.
    """
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    loss.grad = np.ones_like(loss.data)
    for node in reversed(record.nodes):
        if node.grad is None or node._backward is None:
            continue
        grads = node._backward(node.grad)
        for parent, g in zip(node._parents, grads):
            if g is not None and parent.requires_grad:
                parent._accumulate(g)


# --------------------------------------------------------------------------
# primitives

def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    return _node(a.data + b.data, (a, b), lambda g: (g, g), "add")


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    return _node(a.data - b.data, (a, b), lambda g: (g, -g), "sub")


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    return _node(a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data), "mul")


def scale(a, c):
    c = float(c)
    return _node(a.data * a.data.dtype.type(c), (a,), lambda g: (g * c,), "scale")


def total(a):
    return _node(a.data.sum(), (a,), lambda g: (np.broadcast_to(g, a.shape),), "sum")


def mean(a):
    n = a.data.size
    return _node(a.data.sum() / n, (a,), lambda g: (np.broadcast_to(g / n, a.shape),), "mean")


def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul shapes {a.shape} and {b.shape} do not conform")

    def back(g):
        return g @ b.data.T, a.data.T @ g

    return _node(a.data @ b.data, (a, b), back, "matmul")


def linear(x, weight, bias=None):
    """``weight @ x (+ bias)`` for a vector x, or row-wise for a matrix of inputs."""
    x = as_tensor(x)
    W = weight.data
    if W.ndim != 2 or x.shape[-1] != W.shape[1]:
        raise DimensionError(f"linear: input {x.shape} against weight {weight.shape}")
    if bias is not None and bias.shape != (W.shape[0],):
        raise DimensionError(f"linear: bias {bias.shape} against weight {weight.shape}")
    out = x.data @ W.T
    if bias is not None:
        out = out + bias.data

    def back(g):
        if x.data.ndim == 1:
            gW = np.outer(g, x.data)
            gb = g
        else:
            gW = g.T @ x.data
            gb = g.sum(axis=0)
        return (g @ W, gW) + ((gb,) if bias is not None else ())

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _node(out, parents, back, "linear")


def relu(x):
    mask = x.data > 0
    return _node(np.where(mask, x.data, 0).astype(x.dtype, copy=False), (x,),
                 lambda g: (g * mask,), "relu")


def concat(tensors, axis=-1):
    tensors = [as_tensor(t) for t in tensors]
    cuts = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def back(g):
        return tuple(np.split(g, cuts, axis=axis))

    return _node(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), back, "concat")


def cosine(u, v, strict=False):
    """Cosine similarity of two vectors, ``<u,v> / (|u||v| + delta)``.

    In strict mode delta is 0 and a zero-norm input raises
    :class:`DegenerateInputError` instead of being guarded.
    """
    u, v = as_tensor(u), as_tensor(v)
    if u.shape != v.shape or u.data.ndim != 1:
        raise DimensionError(f"cosine needs equal-length vectors, got {u.shape} and {v.shape}")
    nu = float(np.sqrt(np.dot(u.data, u.data)))
    nv = float(np.sqrt(np.dot(v.data, v.data)))
    delta = 0.0 if strict else COSINE_GUARD
    if strict and (nu == 0.0 or nv == 0.0):
        raise DegenerateInputError("cosine of a zero-norm vector")
    dot = float(np.dot(u.data, v.data))
    denom = nu * nv + delta
    c = dot / denom

    def back(g):
        gu = v.data / denom - (c * nv / (nu * denom)) * u.data if nu > 0 else v.data / denom
        gv = u.data / denom - (c * nu / (nv * denom)) * v.data if nv > 0 else u.data / denom
        return g * gu, g * gv

    return _node(np.asarray(c, dtype=u.dtype), (u, v), back, "cosine")


def cosine_matrix(Q, strict=False):
    """All-pairs cosine similarity between the rows of ``Q``."""
    delta = 0.0 if strict else COSINE_GUARD
    C, norms = kernels.cosine_matrix(Q.data, delta)
    if strict and np.any(norms == 0):
        raise DegenerateInputError("cosine of a zero-norm row")
    return _node(C, (Q,), lambda g: (kernels.cosine_matrix_backward(Q.data, norms, C, g, delta),),
                 "cosine_matrix")


def softmax_temp(scores, gamma=1.0):
    """Softmax of ``gamma * scores`` along the last axis, max-shifted."""
    s = scores.data
    if s.size == 0 or s.shape[-1] == 0:
        raise DimensionError("softmax over an empty axis")
    if gamma <= 0:
        raise ValueError("temperature must be positive")
    z = gamma * s
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    p = (e / e.sum(axis=-1, keepdims=True)).astype(s.dtype, copy=False)

    def back(g):
        return (gamma * p * (g - (g * p).sum(axis=-1, keepdims=True)),)

    return _node(p, (scores,), back, "softmax")


def masked_softmax(scores, mask, gamma=1.0):
    """Row-wise temperature softmax restricted to ``mask``; zero outside it."""
    if np.any(~np.asarray(mask, dtype=bool).any(axis=1)):
        raise ContractError("masked_softmax row with no admissible entries")
    A = kernels.masked_softmax(scores.data, mask, gamma)
    return _node(A, (scores,), lambda g: (kernels.masked_softmax_backward(A, g, gamma),),
                 "masked_softmax")


def kl_divergence(p, q):
    """``sum p * log(p / q)`` over all entries, with ``0 log 0 = 0``.

    For matrices whose rows are distributions this is the sum of the per-row
    divergences.
    """
    p, q = as_tensor(p), as_tensor(q)
    if p.shape != q.shape:
        raise DimensionError(f"kl_divergence shapes {p.shape} and {q.shape}")
    pd, qd = p.data, q.data
    pos = pd > 0
    safe_p = np.where(pos, pd, 1.0)
    log_ratio = np.where(pos, np.log(safe_p) - np.log(np.where(pos, qd, 1.0)), 0.0)
    value = np.sum(pd * log_ratio)

    def back(g):
        gp = np.where(pos, log_ratio + 1.0, 0.0)
        gq = -pd / qd
        return g * gp, g * gq

    return _node(np.asarray(value, dtype=pd.dtype), (p, q), back, "kl")


def cross_entropy(logits, labels, reduction="mean"):
    """Negative log-likelihood of ``labels`` under the row-softmax of ``logits``."""
    s = logits.data
    labels = np.asarray(labels, dtype=np.intp)
    rows = np.arange(s.shape[0])
    shifted = s - s.max(axis=1, keepdims=True)
    logz = np.log(np.exp(shifted).sum(axis=1))
    nll = logz - shifted[rows, labels]
    div = s.shape[0] if reduction == "mean" else 1

    def back(g):
        p = np.exp(shifted - logz[:, None])
        p[rows, labels] -= 1.0
        return (g * p / div,)

    return _node(np.asarray(nll.sum() / div, dtype=s.dtype), (logits,), back, "cross_entropy")


def relation_scores(U, V, w, b):
    """``S[i, j] = w . relu(U[i] + V[j]) + b`` over query rows i and class rows j."""
    S = kernels.relation_scores(U.data, V.data, w.data, float(b.data))

    def back(g):
        gU, gV, gw, gb = kernels.relation_scores_backward(U.data, V.data, w.data, g)
        return gU, gV, gw, np.asarray(gb, dtype=b.dtype).reshape(b.shape)

    return _node(S, (U, V, w, b), back, "relation_scores")


# --------------------------------------------------------------------------
# finite-difference oracle

def grad_check(loss_fn, params, h=1e-5, analytic_hook=None):
    """Compare reverse-mode gradients with central differences.

    ``loss_fn()`` must build the loss from the current values of ``params``
    (a name -> Tensor mapping) and return a scalar Tensor. Returns a mapping
    name -> max relative error, with ``max(|a|, |n|, 1e-8)`` as denominator.
    ``analytic_hook(name, grad)`` may replace an analytic gradient (used to
    check that the harness catches a wrong gradient).
    """
    params = dict(params)
    for name, p in params.items():
        if p.dtype != np.float64:
            raise ContractError(f"grad_check needs float64 parameters; {name} is {p.dtype}")
    if not 1e-6 <= h <= 1e-4:
        raise ContractError(f"finite-difference step {h} outside [1e-6, 1e-4]")
    for p in params.values():
        p.grad = None
    with Tape() as tape:
        loss = loss_fn()
    if not np.isfinite(loss.data):
        raise DegenerateInputError("non-finite loss at the check point")
    tape.backward(loss)

    def value():
        out = float(loss_fn().data)
        if not np.isfinite(out):
            raise DegenerateInputError("non-finite loss under perturbation")
        return out

    report = {}
    for name, p in params.items():
        analytic = np.zeros_like(p.data) if p.grad is None else p.grad.copy()
        if analytic_hook is not None:
            analytic = analytic_hook(name, analytic)
        flat = p.data.reshape(-1)
        worst = 0.0
        for i in range(flat.size):
            keep = flat[i]
            flat[i] = keep + h
            up = value()
            flat[i] = keep - h
            down = value()
            flat[i] = keep
            numeric = (up - down) / (2 * h)
            a = float(analytic.reshape(-1)[i])
            err = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
            worst = max(worst, err)
        report[name] = worst
    return report
