"""Initial class prototypes in the visual and semantic spaces."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from isoprop import diffcore as dc
from isoprop.diffcore import Tensor
from isoprop.errors import ConfigError, ContractError


@dataclass
class PrototypeNet:
    W: Tensor
    experts: list
    init_neighbors: int = 5

    @property
    def d(self):
        return self.W.shape[0]


@dataclass
class PrototypeState:
    classes: np.ndarray
    visual: Tensor
    semantic: Tensor
    step: int = 0

    def __post_init__(self):
        if self.visual.shape != self.semantic.shape:
            raise ContractError(f"visual {self.visual.shape} and semantic {self.semantic.shape} "
                                "prototypes differ in shape")
        if self.visual.shape[0] != len(self.classes):
            raise ContractError("prototype rows do not match the class list")


def init_semantic(net: PrototypeNet, attrs) -> Tensor:
    """Average of the expert branches ``relu(weight_e @ s + bias_e)``, row-wise."""
    attrs = dc.as_tensor(attrs, dtype=net.W.dtype)
    branches = [dc.relu(dc.linear(attrs, w, b)) for w, b in net.experts]
    out = branches[0]
    for br in branches[1:]:
        out = dc.add(out, br)
    return dc.scale(out, 1.0 / len(branches)) if len(branches) > 1 else out


def class_means(features, labels, classes):
    """Per-class feature means in the order of ``classes``."""
    rows = []
    for c in classes:
        sel = features[labels == c]
        if sel.shape[0] == 0:
            raise ContractError(f"class {int(c)} has no samples to average")
        rows.append(sel.mean(axis=0, dtype=np.float64))
    return np.asarray(rows)


def init_visual_seen(net: PrototypeNet, groups) -> Tensor:
    """``W @ mean(group)`` for each class's feature group; features are constants."""
    rows = []
    for i, g in enumerate(groups):
        g = np.asarray(g)
        if g.ndim != 2 or g.shape[0] == 0:
            raise ContractError(f"class group {i} is empty")
        rows.append(g.mean(axis=0, dtype=np.float64))
    return project_means(net, np.asarray(rows))


def project_means(net: PrototypeNet, means) -> Tensor:
    return dc.linear(Tensor(np.asarray(means, dtype=net.W.dtype)), net.W)


def top_neighbors(similarities, k):
    """Indices of the k largest entries per row; ties go to the lower index."""
    sims = np.atleast_2d(similarities)
    if k > sims.shape[1]:
        raise ConfigError(f"asked for {k} neighbours among {sims.shape[1]} seen classes")
    return np.argsort(-sims, axis=1, kind="stable")[:, :k]


def neighbor_weights(similarities, k, gamma):
    """Top-k neighbour indices and their temperature-softmax weights, per row."""
    sims = np.atleast_2d(np.asarray(similarities, dtype=np.float64))
    idx = top_neighbors(sims, k)
    picked = np.take_along_axis(sims, idx, axis=1)
    weights = dc.softmax_temp(Tensor(picked), gamma).data
    return idx, weights


def init_visual_unseen(net: PrototypeNet, unseen_attrs, seen_means, seen_semantic, head) -> Tensor:
    """Visual prototypes for unseen classes from their semantic neighbours.

    Each unseen class takes its ``net.init_neighbors`` most similar seen
    classes under the semantic head's cosine, weights them by the head's
    temperature softmax over that set, and projects the weighted mean of
    their raw class-mean features through ``W``.
    """
    unseen_sem = init_semantic(net, unseen_attrs).data
    seen_sem = seen_semantic.data if isinstance(seen_semantic, Tensor) else np.asarray(seen_semantic)
    k = net.init_neighbors
    if k > seen_sem.shape[0]:
        raise ConfigError(f"init_neighbors={k} exceeds the {seen_sem.shape[0]} seen classes")
    sims = head.cross_similarity(unseen_sem, seen_sem)
    idx, weights = neighbor_weights(sims, k, head.gamma)
    seen_means = np.asarray(seen_means, dtype=np.float64)
    mixed = np.einsum("uk,ukd->ud", weights, seen_means[idx])
    return project_means(net, mixed)
