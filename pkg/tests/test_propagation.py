import math

import numpy as np
import pytest

from isoprop import diffcore as dc
from isoprop.diffcore import Tensor, grad_check
from isoprop.errors import ConfigError
from isoprop.propagation import (
    AttentionHead,
    attention_weights,
    build_graph,
    fuse,
    graph_from_edges,
    propagate_step,
    run_propagation,
)
from isoprop.prototypes import PrototypeState

COS40 = math.cos(math.radians(40))


def head(M, gamma=10.0):
    return AttentionHead(Tensor(np.asarray(M, dtype=np.float64), requires_grad=True), gamma)


def brute_graph(P, H, eps):
    Q = P @ H.T
    n = len(P)
    mask = np.zeros((n, n), bool)
    for i in range(n):
        for j in range(n):
            c = Q[i] @ Q[j] / (np.linalg.norm(Q[i]) * np.linalg.norm(Q[j]) + 1e-12)
            mask[i, j] = i == j or c >= eps
    return mask


def brute_step(P, H, mask, gamma):
    """Independent scalar evaluation of one attention-propagation step."""
    n = len(P)
    Q = [H @ p for p in P]

    def cos(a, b):
        return sum(x * y for x, y in zip(a, b)) / (math.sqrt(sum(x * x for x in a)) * math.sqrt(sum(y * y for y in b)) + 1e-12)

    out = []
    for y in range(n):
        nb = [z for z in range(n) if mask[y, z]]
        e = [math.exp(gamma * cos(Q[y], Q[z])) for z in nb]
        s = sum(e)
        out.append(sum((ez / s) * P[z] for ez, z in zip(e, nb)))
    return np.array(out)


def test_square_transform_required():
    with pytest.raises(ConfigError):
        head(np.ones((2, 3)))


def test_complete_graph_at_minus_one(rng):
    P = rng.normal(size=(5, 3))
    assert build_graph(P, head(np.eye(3)), -1.0).mask.all()


def test_orthogonal_prototypes_self_edges_only():
    g = build_graph(np.eye(2), head(np.eye(2)), COS40)
    assert g.edges() == {(0, 0), (1, 1)}
    assert g.source == "generated"


def test_graph_brute_force(rng):
    for _ in range(50):
        P, H = rng.normal(size=(4, 3)), rng.normal(size=(3, 3))
        eps = rng.uniform(-1, 1)
        g = build_graph(P, head(H), eps)
        assert np.array_equal(g.mask, brute_graph(P, H, eps))
        assert np.array_equal(g.mask, g.mask.T)


def test_threshold_above_one():
    with pytest.raises(ConfigError):
        build_graph(np.eye(2), head(np.eye(2)), 1.01)


def test_external_edges_symmetrised():
    g = graph_from_edges(np.array([3, 5, 7]), [(3, 7), (5, 9)])
    assert g.edges() == {(3, 3), (5, 5), (7, 7), (3, 7), (7, 3)}
    assert g.neighbors(7).tolist() == [3, 7]
    assert g.source == "external"


def test_attention_closed_forms():
    h = head(np.eye(2))
    P = Tensor(np.array([[1.0, 0.0], [1.0, 1.0], [1.0, -1.0]]))
    np.testing.assert_allclose(attention_weights(h, P, 0, [0]).data, [1.0])
    np.testing.assert_allclose(attention_weights(h, P, 0, [1, 2]).data, [0.5, 0.5])
    P2 = Tensor(np.array([[1.0, 0.0], [1.0, 0.0], [0.5, math.sqrt(3) / 2]]))  # cos 1 and 0.5
    np.testing.assert_allclose(attention_weights(h, P2, 0, [1, 2]).data, [0.99331, 0.00669], atol=5e-6)


def state(Pv, Ps=None):
    Pv = np.asarray(Pv, dtype=np.float64)
    Ps = Pv.copy() if Ps is None else np.asarray(Ps, dtype=np.float64)
    return PrototypeState(np.arange(len(Pv)), Tensor(Pv), Tensor(Ps))


def test_isolated_class_fixed_point(rng):
    P = rng.normal(size=(3, 3))
    g = graph_from_edges(np.arange(3), [(1, 2)])
    new, _, _ = propagate_step(state(P, P), g, g, head(np.eye(3)), head(np.eye(3)))
    np.testing.assert_allclose(new.visual.data[0], P[0], atol=1e-12)
    assert new.step == 1


def test_identical_prototypes_unchanged():
    P = np.tile([0.3, -1.0, 2.0], (4, 1))
    g = build_graph(P, head(np.eye(3)), COS40)
    new, pv, ps = propagate_step(state(P), g, g, head(np.eye(3)), head(np.eye(3)))
    np.testing.assert_allclose(new.visual.data, P, atol=1e-12)
    np.testing.assert_allclose(new.semantic.data, P, atol=1e-12)
    np.testing.assert_allclose(pv.data, 0.25, atol=1e-12)
    np.testing.assert_allclose(ps.data, 0.25, atol=1e-12)


def test_step_matches_scalar_oracle(rng):
    P, Hm = rng.normal(size=(3, 4)), rng.normal(size=(4, 4))
    g = build_graph(P, head(Hm), -1.0)
    new, pv, _ = propagate_step(state(P, P), g, g, head(Hm), head(Hm))
    expect = brute_step(P, Hm, g.mask, 10.0)
    np.testing.assert_allclose(new.visual.data, expect, atol=1e-12)
    Q = expect @ Hm.T
    Qn = Q / np.linalg.norm(Q, axis=1, keepdims=True)
    C = Qn @ Qn.T
    dist = np.exp(C) / np.exp(C).sum(axis=1, keepdims=True)  # temperature 1, all classes
    np.testing.assert_allclose(pv.data, dist, atol=1e-10)


def test_step_is_simultaneous(rng):
    P, Hm = rng.normal(size=(4, 3)), np.eye(3)
    g = build_graph(P, head(Hm), -1.0)
    new, _, _ = propagate_step(state(P), g, g, head(Hm), head(Hm))
    np.testing.assert_allclose(new.visual.data, brute_step(P, Hm, g.mask, 10.0), atol=1e-12)


def test_run_lengths(rng):
    P = rng.normal(size=(3, 3))
    g = build_graph(P, head(np.eye(3)), -1.0)
    heads = (head(np.eye(3)), head(np.eye(3)))
    t0 = run_propagation(state(P), (g, g), heads, 0)
    assert t0.steps == 0 and len(t0.states) == 1 and not t0.dist_v
    t2 = run_propagation(state(P), (g, g), heads, 2)
    assert len(t2.states) == 3 and len(t2.dist_v) == len(t2.dist_s) == 2
    with pytest.raises(ConfigError):
        run_propagation(state(P), (g, g), heads, -1)


def test_run_identical_prototypes_constant():
    P = np.tile([1.0, 2.0], (3, 1))
    g = build_graph(P, head(np.eye(2)), 0.5)
    tr = run_propagation(state(P), (g, g), (head(np.eye(2)), head(np.eye(2))), 4)
    for s in tr.states:
        np.testing.assert_allclose(s.visual.data, P, atol=1e-12)


def test_frozen_space_keeps_initial(rng):
    P, S = rng.normal(size=(3, 3)), rng.normal(size=(3, 3))
    g = build_graph(P, head(np.eye(3)), -1.0)
    tr = run_propagation(state(P, S), (g, g), (head(np.eye(3)), head(np.eye(3))), 2, (True, False))
    for s in tr.semantic:
        np.testing.assert_array_equal(s.data, S)
    assert tr.dist_s[0] is tr.dist_s[1]
    assert not np.allclose(tr.visual[2].data, P)


def test_norm_non_increasing(rng):
    for _ in range(50):
        P = rng.normal(size=(5, 4))
        Hm = rng.normal(size=(4, 4))
        g = build_graph(P, head(Hm), rng.uniform(-1, 1))
        tr = run_propagation(state(P), (g, g), (head(Hm), head(Hm)), 3)
        norms = [np.abs(s.data).max() for s in tr.visual]
        assert all(b <= a + 1e-5 for a, b in zip(norms, norms[1:]))


def test_permutation_equivariance(rng):
    P, S, Hv, Hs = (rng.normal(size=s) for s in ((5, 3), (5, 3), (3, 3), (3, 3)))
    classes = np.array([10, 11, 12, 13, 14])
    perm = rng.permutation(5)

    def run(order):
        st = PrototypeState(classes[order], Tensor(P[order]), Tensor(S[order]))
        gv = build_graph(P[order], head(Hv), 0.2, classes[order])
        gs = build_graph(S[order], head(Hs), 0.2, classes[order])
        tr = run_propagation(st, (gv, gs), (head(Hv), head(Hs)), 2)
        return gv, tr, fuse(tr).data

    gv0, tr0, f0 = run(np.arange(5))
    gv1, tr1, f1 = run(perm)
    assert gv0.edges() == gv1.edges()
    np.testing.assert_allclose(f1, f0[perm], atol=1e-12)
    np.testing.assert_allclose(tr1.dist_v[1].data, tr0.dist_v[1].data[np.ix_(perm, perm)], atol=1e-12)


def test_fuse():
    tr = run_propagation(state([[1.0, 2.0]], [[3.0, 4.0]]), (None, None), (None, None), 0)
    assert fuse(tr).data.tolist() == [[1.0, 2.0, 3.0, 4.0]]
    assert fuse(tr, (True, False)).data.tolist() == [[1.0, 2.0]]
    assert fuse(tr, (False, True)).data.tolist() == [[3.0, 4.0]]
    with pytest.raises(ConfigError):
        fuse(tr, (False, False))


@pytest.mark.parametrize("d", [4, 8, 16])
def test_fuse_width(d, rng):
    P = rng.normal(size=(3, d))
    tr = run_propagation(state(P), (None, None), (None, None), 0)
    assert fuse(tr).shape == (3, 2 * d)


def test_tied_heads_identical_start_same_distributions(rng):
    P, Hm = rng.normal(size=(4, 3)), rng.normal(size=(3, 3))
    h = head(Hm)
    g = build_graph(P, h, 0.0)
    tr = run_propagation(state(P, P), (g, g), (h, h), 3)
    for pv, ps in zip(tr.dist_v, tr.dist_s):
        np.testing.assert_allclose(pv.data, ps.data, atol=1e-9)
        assert np.all(pv.data > 0)


def test_propagation_gradient(rng):
    P0, S0 = (Tensor(rng.normal(size=(4, 3)), requires_grad=True) for _ in range(2))
    hv, hs = head(rng.normal(size=(3, 3))), head(rng.normal(size=(3, 3)))
    g = build_graph(P0.data, hv, 0.0)
    c = Tensor(rng.normal(size=(4, 6)))

    def loss():
        tr = run_propagation(PrototypeState(np.arange(4), P0, S0), (g, g), (hv, hs), 2)
        kl = dc.kl_divergence(tr.dist_v[1], tr.dist_s[1])
        return dc.add(dc.total(dc.mul(c, fuse(tr))), kl)

    rep = grad_check(loss, {"P": P0, "S": S0, "hv": hv.transform, "hs": hs.transform})
    assert max(rep.values()) <= 1e-4
