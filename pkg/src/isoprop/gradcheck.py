"""Finite-difference check of the full episode objective on a fixed micro-episode."""
from __future__ import annotations

import numpy as np

from isoprop.datasets import SyntheticSpec, generate_synthetic, sample_episode
from isoprop.diffcore import grad_check
from isoprop.model import GROUPS
from isoprop.training import Hyperparams, apply_variant, episode_graphs, episode_objective, new_params
from isoprop.prototypes import class_means, init_semantic, project_means

TOLERANCE = 1e-4


def micro_setup(seed=0, ways=5, shots=1, query=2, d=8, steps=2, consistency_weight=1.0):
    """64-bit parameters, a small synthetic dataset and one fixed episode."""
    spec = SyntheticSpec(n_seen=ways + 1, n_unseen=1, d_a=6, d_v=12, samples_per_class=6,
                         noise_sigma=0.3, n_superclusters=2, seed=seed)
    ds = generate_synthetic(spec)
    hp = Hyperparams(ways=ways, shots=shots, query_per_class=query, d=d, d_h=d, steps=steps,
                     consistency_weight=consistency_weight, dtype="float64", seed=seed,
                     edge_threshold=0.0)
    wiring = apply_variant("full", hp)
    params = new_params(hp, ds, wiring)
    episode = sample_episode(ds, ways, shots, query, np.random.default_rng(seed))
    return ds, hp, params, episode


def frozen_graph_loss(params, hp, episode, dataset, wiring=None):
    """Loss closure with the category graphs fixed at the current parameter values."""
    wiring = wiring or apply_variant("full", hp)
    classes = np.asarray(episode.classes)
    net = params.prototype_net(hp.init_neighbors)
    sup = episode.support
    Pv0 = project_means(net, class_means(dataset.features[sup], dataset.labels[sup], classes))
    Ps0 = init_semantic(net, dataset.attributes[classes].astype(params.dtype))
    graphs = episode_graphs(params, hp, wiring, classes, Pv0, Ps0, dataset.edges)

    def loss():
        return episode_objective(params, hp, episode, dataset, wiring, graphs)[0]

    return loss


def run_gradcheck(seed=0, h=1e-5, analytic_hook=None):
    """Max relative gradient error per parameter group on the micro-episode."""
    ds, hp, params, episode = micro_setup(seed)
    per_param = grad_check(frozen_graph_loss(params, hp, episode, ds), params.items(), h,
                           analytic_hook)
    groups = {g: 0.0 for g in GROUPS}
    for name, err in per_param.items():
        g = params.group_of(name)
        groups[g] = max(groups[g], err)
    return groups
