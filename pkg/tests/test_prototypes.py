import math

import numpy as np
import pytest

from isoprop import diffcore as dc
from isoprop.diffcore import Tensor, grad_check
from isoprop.errors import ConfigError, ContractError
from isoprop.propagation import AttentionHead
from isoprop.prototypes import (
    PrototypeNet,
    PrototypeState,
    class_means,
    init_semantic,
    init_visual_seen,
    init_visual_unseen,
    neighbor_weights,
    top_neighbors,
)


def param(x):
    return Tensor(np.asarray(x, dtype=np.float64), requires_grad=True)


def make_net(rng, d=4, d_v=6, d_a=5, E=2, k=2):
    experts = [(param(rng.normal(size=(d, d_a))), param(rng.normal(size=d))) for _ in range(E)]
    return PrototypeNet(param(rng.normal(size=(d, d_v))), experts, k)


def test_single_identity_expert_passes_attributes():
    net = PrototypeNet(param(np.eye(3)), [(param(np.eye(3)), param(np.zeros(3)))])
    attrs = np.array([[0.1, 0.0, 2.0], [1.0, 3.0, 0.5]])
    np.testing.assert_array_equal(init_semantic(net, attrs).data, attrs)


def test_zero_attributes_give_zero_prototype(rng):
    net = make_net(rng)
    for w, b in net.experts:
        b.data[:] = 0
    assert np.all(init_semantic(net, np.zeros((2, 5))).data == 0)


def test_expert_average_oracle(rng):
    net = make_net(rng, E=3)
    attrs = rng.normal(size=(4, 5))
    expect = np.mean([np.maximum(attrs @ w.data.T + b.data, 0) for w, b in net.experts], axis=0)
    np.testing.assert_allclose(init_semantic(net, attrs).data, expect, atol=1e-12)


def test_expert_gradient(rng):
    net = make_net(rng)
    attrs = rng.normal(size=(3, 5))
    c = Tensor(rng.normal(size=(3, 4)))
    params = {f"e{i}.{k}": t for i, (w, b) in enumerate(net.experts) for k, t in (("w", w), ("b", b))}
    report = grad_check(lambda: dc.total(dc.mul(c, init_semantic(net, attrs))), params)
    assert max(report.values()) <= 1e-4


def test_visual_seen_singleton_and_duplicates(rng):
    net = make_net(rng)
    x = rng.normal(size=(1, 6))
    one = init_visual_seen(net, [x]).data
    np.testing.assert_allclose(one[0], net.W.data @ x[0], atol=1e-12)
    np.testing.assert_allclose(init_visual_seen(net, [np.vstack([x, x])]).data, one, atol=1e-12)


def test_visual_seen_hand_mean():
    W = np.zeros((2, 4))
    W[0, 0] = W[1, 1] = 1.0
    net = PrototypeNet(param(W), [])
    groups = [np.array([[1.0, 0, 0, 0], [0, 1.0, 0, 0]])]
    np.testing.assert_allclose(init_visual_seen(net, groups).data, [[0.5, 0.5]])


def test_visual_seen_empty_group(rng):
    with pytest.raises(ContractError):
        init_visual_seen(make_net(rng), [np.zeros((0, 6))])


def test_visual_seen_gradient_only_into_W(rng):
    net = make_net(rng)
    groups = [rng.normal(size=(2, 6)), rng.normal(size=(3, 6))]
    c = Tensor(rng.normal(size=(2, 4)))
    assert grad_check(lambda: dc.total(dc.mul(c, init_visual_seen(net, groups))), {"W": net.W})["W"] <= 1e-6


def test_visual_seen_equivariance_and_linearity(rng):
    net = make_net(rng)
    groups = [rng.normal(size=(2, 6)) for _ in range(4)]
    P = init_visual_seen(net, groups).data
    perm = rng.permutation(4)
    np.testing.assert_allclose(init_visual_seen(net, [groups[i] for i in perm]).data, P[perm], atol=1e-12)
    scaled = list(groups)
    scaled[1] = 3.5 * groups[1]
    np.testing.assert_allclose(init_visual_seen(net, scaled).data[1], 3.5 * P[1], atol=1e-12)


def test_class_means_order():
    f = np.array([[1.0], [3.0], [10.0]])
    np.testing.assert_array_equal(class_means(f, np.array([4, 4, 2]), [4, 2]), [[2.0], [10.0]])


# ---- unseen initialisation
def test_neighbor_weights_closed_form():
    idx, w = neighbor_weights([[0.9, 0.5, 0.1]], 2, 10.0)
    assert idx.tolist() == [[0, 1]]
    np.testing.assert_allclose(w[0], [0.98201, 0.01799], atol=5e-6)
    np.testing.assert_allclose(w[0, 0], 1 / (1 + math.exp(-4)), atol=1e-12)


def test_top_neighbors_ties_lower_id():
    assert top_neighbors([[0.3, 0.7, 0.7, 0.7]], 2).tolist() == [[1, 2]]
    with pytest.raises(ConfigError):
        top_neighbors([[0.1, 0.2]], 3)


def setup_unseen(rng, k):
    net = make_net(rng, k=k)
    head = AttentionHead(param(rng.normal(size=(4, 4))), 10.0)
    seen_attrs = np.abs(rng.normal(size=(3, 5)))
    seen_means = rng.normal(size=(3, 6))
    seen_sem = init_semantic(net, seen_attrs)
    return net, head, seen_attrs, seen_means, seen_sem


def test_unseen_k1_nearest(rng):
    net, head, seen_attrs, seen_means, seen_sem = setup_unseen(rng, 1)
    unseen_attrs = np.abs(rng.normal(size=(2, 5)))
    out = init_visual_unseen(net, unseen_attrs, seen_means, seen_sem, head).data
    sims = head.cross_similarity(init_semantic(net, unseen_attrs).data, seen_sem.data)
    for u in range(2):
        np.testing.assert_allclose(out[u], net.W.data @ seen_means[np.argmax(sims[u])], atol=1e-12)


def test_unseen_copy_of_seen_attrs_is_top_neighbor(rng):
    net, head, seen_attrs, seen_means, seen_sem = setup_unseen(rng, 2)
    sims = head.cross_similarity(init_semantic(net, seen_attrs[1:2]).data, seen_sem.data)
    assert abs(sims[0, 1] - 1) < 1e-9
    assert sims[0, 1] >= sims[0].max() - 1e-12
    assert 1 in top_neighbors(sims, 2)[0]


def test_unseen_brute_force_and_convex(rng):
    net, head, seen_attrs, seen_means, seen_sem = setup_unseen(rng, 2)
    unseen_attrs = np.abs(rng.normal(size=(3, 5)))
    out = init_visual_unseen(net, unseen_attrs, seen_means, seen_sem, head).data
    H = head.transform.data
    us = init_semantic(net, unseen_attrs).data
    for u in range(3):
        a = H @ us[u]
        sims = [a @ (H @ s) / (np.linalg.norm(a) * np.linalg.norm(H @ s) + 1e-12) for s in seen_sem.data]
        top = sorted(range(3), key=lambda z: (-sims[z], z))[:2]
        e = np.exp(10 * np.array([sims[z] for z in top]))
        weights = e / e.sum()
        expect = net.W.data @ (weights[0] * seen_means[top[0]] + weights[1] * seen_means[top[1]])
        np.testing.assert_allclose(out[u], expect, atol=1e-10)
        assert np.all(weights >= 0) and abs(weights.sum() - 1) < 1e-12


def test_unseen_too_many_neighbors(rng):
    net, head, seen_attrs, seen_means, seen_sem = setup_unseen(rng, 4)
    with pytest.raises(ConfigError):
        init_visual_unseen(net, seen_attrs, seen_means, seen_sem, head)


def test_state_shape_contract():
    with pytest.raises(ContractError):
        PrototypeState(np.arange(2), Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 4))))
    with pytest.raises(ContractError):
        PrototypeState(np.arange(3), Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 3))))
