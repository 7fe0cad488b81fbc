"""Relation-layer classifier over fused class prototypes."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from isoprop import diffcore as dc
from isoprop.diffcore import Tensor
from isoprop.errors import ContractError, DimensionError


@dataclass
class RelationClassifier:
    """``f(x, P) = w . relu(W1 x + W2 P + b1) + b``."""

    W1: Tensor
    W2: Tensor
    b1: Tensor
    w: Tensor
    b: Tensor

    @property
    def hidden(self):
        return self.W1.shape[0]


def score(clf: RelationClassifier, x, proto) -> Tensor:
    """Relation score of one query feature against one fused prototype."""
    x = dc.as_tensor(x, dtype=clf.W1.dtype)
    proto = dc.as_tensor(proto, dtype=clf.W1.dtype)
    if x.data.ndim != 1 or proto.data.ndim != 1:
        raise DimensionError("score takes a single feature vector and a single prototype")
    hidden = dc.relu(dc.add(dc.linear(x, clf.W1, clf.b1), dc.linear(proto, clf.W2)))
    return dc.add(dc.total(dc.mul(clf.w, hidden)), clf.b)


def score_matrix(clf: RelationClassifier, X, protos) -> Tensor:
    """Scores for every (query row, prototype row) pair, shape ``(n_query, n_classes)``."""
    X = dc.as_tensor(np.atleast_2d(X.data if isinstance(X, Tensor) else X).astype(clf.W1.dtype, copy=False))
    if X.shape[1] != clf.W1.shape[1] or protos.shape[1] != clf.W2.shape[1]:
        raise DimensionError(f"queries {X.shape} / prototypes {protos.shape} do not fit "
                             f"W1 {clf.W1.shape} / W2 {clf.W2.shape}")
    U = dc.linear(X, clf.W1, clf.b1)
    V = dc.linear(protos, clf.W2)
    return dc.relation_scores(U, V, clf.w, clf.b)


def predict_distribution(clf: RelationClassifier, x, protos) -> Tensor:
    """Class probabilities for a single query: softmax of its scores."""
    S = score_matrix(clf, np.atleast_2d(np.asarray(x)), protos)
    return dc.softmax_temp(Tensor(S.data[0]), 1.0)


def restrict_argmax(scores, classes, search_space):
    """Argmax per row over the columns whose class is in ``search_space``.

    Columns follow ``classes``; ties go to the lower class id.
    """
    classes = np.asarray(classes)
    allowed = np.isin(classes, np.asarray(list(search_space)))
    if not allowed.any():
        raise ContractError("empty search space")
    cols = np.flatnonzero(allowed)
    sub_classes = classes[cols]
    order = np.argsort(sub_classes, kind="stable")
    sub = np.atleast_2d(scores)[:, cols[order]]
    return sub_classes[order][np.argmax(sub, axis=1)]


def classify(clf: RelationClassifier, x, protos, classes, search_space) -> int:
    """Most probable class for one query among ``search_space``."""
    S = score_matrix(clf, np.atleast_2d(np.asarray(x)), protos).data
    return int(restrict_argmax(S, classes, search_space)[0])
