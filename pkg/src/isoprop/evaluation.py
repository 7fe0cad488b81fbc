"""Zero-shot and generalized zero-shot evaluation, hit@k, and prototype export."""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from isoprop.classifier import restrict_argmax, score_matrix
from isoprop.diffcore import Tensor
from isoprop.errors import ConfigError, ContractError
from isoprop.propagation import fuse, run_propagation
from isoprop.prototypes import (
    PrototypeState,
    class_means,
    init_semantic,
    init_visual_unseen,
    project_means,
)
from isoprop.training import apply_variant, episode_graphs

PROTOCOLS = ("gzsl", "zsl")


@dataclass
class EvalReport:
    protocol: str
    acc_unseen: float
    acc_seen: float | None = None
    harmonic: float | None = None
    acc_unseen_micro: float = 0.0
    per_class: dict = field(default_factory=dict)
    hit_at_k: dict | None = None

    def to_dict(self):
        out = {"protocol": self.protocol, "acc_unseen": self.acc_unseen,
               "acc_unseen_micro": self.acc_unseen_micro,
               "per_class": {str(k): v for k, v in sorted(self.per_class.items())}}
        if self.protocol == "gzsl":
            out["acc_seen"] = self.acc_seen
            out["harmonic"] = self.harmonic
        if self.hit_at_k is not None:
            out["hit_at_k"] = {str(k): v for k, v in self.hit_at_k.items()}
        return out


def per_class_accuracy(predictions, labels, target_classes):
    """Mean over ``target_classes`` of the within-class hit rate."""
    predictions, labels = np.asarray(predictions), np.asarray(labels)
    rates = []
    for c in target_classes:
        sel = labels == c
        if not sel.any():
            raise ContractError(f"class {c} has no test samples")
        rates.append(np.mean(predictions[sel] == c))
    return float(np.mean(rates))


def per_class_rates(predictions, labels, target_classes):
    return {int(c): float(np.mean(predictions[labels == c] == c)) for c in target_classes}


def harmonic(acc_seen, acc_unseen):
    if not (0 <= acc_seen <= 1 and 0 <= acc_unseen <= 1):
        raise ContractError("accuracies must lie in [0, 1]")
    s = acc_seen + acc_unseen
    return 0.0 if s == 0 else 2.0 * acc_seen * acc_unseen / s


# --------------------------------------------------------------------------
# test-time prototypes

def test_time_trace(params, hp, dataset, variant="full", class_set=None):
    """Propagation trace over ``class_set`` (default: every class) at test time.

    Seen classes take the mean of all their training features; unseen classes
    are initialised from their semantic neighbours among all seen classes.
    """
    wiring = apply_variant(variant, hp)
    dtype = params.dtype
    seen = np.asarray(dataset.split.seen)
    unseen = set(dataset.split.unseen)
    classes = np.sort(np.asarray(list(class_set) if class_set is not None
                                 else range(dataset.n_classes)))
    net = params.prototype_net(hp.init_neighbors)
    train = dataset.split.train
    seen_means = class_means(dataset.features[train], dataset.labels[train], seen)

    Ps0 = init_semantic(net, dataset.attributes[classes].astype(dtype))
    rows = np.empty((len(classes), hp.d), dtype=dtype)
    is_unseen = np.array([int(c) in unseen for c in classes])
    seen_pos = {int(c): i for i, c in enumerate(seen)}
    if (~is_unseen).any():
        idx = [seen_pos[int(c)] for c in classes[~is_unseen]]
        rows[~is_unseen] = project_means(net, seen_means[idx]).data
    if is_unseen.any():
        seen_sem = init_semantic(net, dataset.attributes[seen].astype(dtype))
        head = params.head(wiring.heads[1], hp.gamma)
        rows[is_unseen] = init_visual_unseen(
            net, dataset.attributes[classes[is_unseen]].astype(dtype), seen_means, seen_sem, head).data
    Pv0 = Tensor(rows)
    graphs = episode_graphs(params, hp, wiring, classes, Pv0, Ps0, dataset.edges)
    heads = (params.head(wiring.heads[0], hp.gamma), params.head(wiring.heads[1], hp.gamma))
    trace = run_propagation(PrototypeState(classes, Pv0, Ps0), graphs, heads, wiring.tau,
                            wiring.propagate)
    return trace, fuse(trace, wiring.use)


def _scores(params, dataset, protos, samples):
    X = dataset.features[samples].astype(params.dtype)
    return score_matrix(params.classifier(), X, protos).data


def evaluate(params, hp, dataset, protocol="gzsl", variant="full", zsl_context="all", ks=None):
    """Run one protocol on the test split.

    ``gzsl`` scores every test sample against all classes. ``zsl`` scores the
    unseen test samples against unseen classes only; with ``zsl_context="all"``
    the prototypes are still propagated over all classes (only the search
    space shrinks), with ``"unseen"`` the class graph holds unseen classes only.
    """
    if protocol not in PROTOCOLS:
        raise ConfigError(f"protocol must be one of {PROTOCOLS}")
    unseen = np.asarray(dataset.split.unseen)
    labels = dataset.labels
    tu = dataset.split.test_unseen
    if protocol == "gzsl":
        trace, protos = test_time_trace(params, hp, dataset, variant)
        classes = trace.classes
        ts = dataset.split.test_seen
        pred_s = restrict_argmax(_scores(params, dataset, protos, ts), classes, classes)
        pred_u = restrict_argmax(_scores(params, dataset, protos, tu), classes, classes)
        S = per_class_accuracy(pred_s, labels[ts], dataset.split.seen)
        U = per_class_accuracy(pred_u, labels[tu], unseen)
        per_class = per_class_rates(pred_s, labels[ts], dataset.split.seen)
        per_class.update(per_class_rates(pred_u, labels[tu], unseen))
        report = EvalReport("gzsl", U, S, harmonic(S, U), float(np.mean(pred_u == labels[tu])), per_class)
    else:
        if zsl_context not in ("all", "unseen"):
            raise ConfigError("zsl_context must be 'all' or 'unseen'")
        class_set = None if zsl_context == "all" else unseen
        trace, protos = test_time_trace(params, hp, dataset, variant, class_set)
        pred_u = restrict_argmax(_scores(params, dataset, protos, tu), trace.classes, unseen)
        U = per_class_accuracy(pred_u, labels[tu], unseen)
        report = EvalReport("zsl", U, acc_unseen_micro=float(np.mean(pred_u == labels[tu])),
                            per_class=per_class_rates(pred_u, labels[tu], unseen))
    if ks:
        report.hit_at_k = hit_at_k(params, hp, dataset, ks, variant, zsl_context)
    return report


def topk_hits(scores, classes, true_labels, search_space, ks):
    """Fraction of rows whose true class ranks within the top k of ``search_space``.

    Ranking is by score, ties to the lower class id (the same rule as argmax).
    """
    classes = np.asarray(classes)
    cols = np.flatnonzero(np.isin(classes, np.asarray(list(search_space))))
    cols = cols[np.argsort(classes[cols], kind="stable")]
    sub_classes = classes[cols]
    ks = list(ks)
    if any(k < 1 or k > len(cols) for k in ks):
        raise ConfigError(f"k must lie in [1, {len(cols)}], got {ks}")
    if ks != sorted(ks):
        raise ConfigError("ks must be sorted ascending")
    order = np.argsort(-np.atleast_2d(scores)[:, cols], axis=1, kind="stable")
    ranked = sub_classes[order]
    rank = np.argmax(ranked == np.asarray(true_labels)[:, None], axis=1)
    return {int(k): float(np.mean(rank < k)) for k in ks}


def hit_at_k(params, hp, dataset, ks, variant="full", zsl_context="all"):
    """Top-k rates over unseen test samples, unseen classes as search space (micro-averaged)."""
    unseen = np.asarray(dataset.split.unseen)
    class_set = None if zsl_context == "all" else unseen
    trace, protos = test_time_trace(params, hp, dataset, variant, class_set)
    tu = dataset.split.test_unseen
    return topk_hits(_scores(params, dataset, protos, tu), trace.classes, dataset.labels[tu], unseen, ks)


# --------------------------------------------------------------------------
# export

def export_prototypes(trace, path, class_names=None):
    """Write every prototype of every step in both spaces as CSV rows."""
    path = Path(path)
    d = trace.visual[0].shape[1]
    classes = trace.classes
    names = class_names or [str(c) for c in range(int(max(classes)) + 1)]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["class_id", "class_name", "space", "step"] + [f"p{i}" for i in range(d)])
        for t in range(trace.steps + 1):
            for space, states in (("visual", trace.visual), ("semantic", trace.semantic)):
                values = states[t].data
                for row, c in enumerate(classes):
                    w.writerow([int(c), names[int(c)], space, t] + [format(float(v), ".9g") for v in values[row]])
    return path
