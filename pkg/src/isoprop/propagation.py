"""Category graphs and attention propagation of prototypes in each space."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from isoprop import diffcore as dc
from isoprop import kernels
from isoprop.diffcore import Tensor
from isoprop.errors import ConfigError, ContractError
from isoprop.prototypes import PrototypeState


@dataclass
class AttentionHead:
    """Learnable square map ``transform`` followed by cosine similarity and a
    temperature-``gamma`` softmax."""

    transform: Tensor
    gamma: float = 10.0

    def __post_init__(self):
        if self.transform.data.ndim != 2 or self.transform.shape[0] != self.transform.shape[1]:
            raise ConfigError(f"attention transform must be square, got {self.transform.shape}")
        if self.gamma <= 0:
            raise ConfigError("temperature gamma must be positive")

    def similarities(self, protos: Tensor) -> Tensor:
        return dc.cosine_matrix(dc.linear(protos, self.transform))

    def cross_similarity(self, a, b):
        """Plain-array cosine between transformed rows of ``a`` and of ``b``."""
        H = self.transform.data.astype(np.float64)
        qa, qb = np.asarray(a, np.float64) @ H.T, np.asarray(b, np.float64) @ H.T
        na, nb = np.linalg.norm(qa, axis=1), np.linalg.norm(qb, axis=1)
        return (qa @ qb.T) / (np.outer(na, nb) + dc.COSINE_GUARD)


@dataclass
class CategoryGraph:
    classes: np.ndarray
    mask: np.ndarray
    source: str = "generated"

    def neighbors(self, y):
        """Neighbour class ids of class ``y`` in class order."""
        row = int(np.flatnonzero(self.classes == y)[0])
        return self.classes[self.mask[row]]

    def edges(self):
        rows, cols = np.nonzero(self.mask)
        return {(int(self.classes[i]), int(self.classes[j])) for i, j in zip(rows, cols)}

    def permuted(self, order):
        return CategoryGraph(self.classes[order], self.mask[np.ix_(order, order)], self.source)


@dataclass
class PropagationTrace:
    classes: np.ndarray
    visual: list
    semantic: list
    dist_v: list = field(default_factory=list)
    dist_s: list = field(default_factory=list)

    @property
    def steps(self):
        return len(self.visual) - 1

    @property
    def states(self):
        return [PrototypeState(self.classes, v, s, t)
                for t, (v, s) in enumerate(zip(self.visual, self.semantic))]


def build_graph(protos, head: AttentionHead, epsilon, classes=None) -> CategoryGraph:
    """Edges between classes whose transformed step-0 prototypes have cosine >= epsilon.

    Computed on values only; the graph is a constant for the episode. Every
    class keeps its self-edge.
    """
    if epsilon > 1:
        raise ConfigError(f"edge threshold {epsilon} > 1 would leave classes without neighbours")
    P = protos.data if isinstance(protos, Tensor) else np.asarray(protos)
    Q = np.ascontiguousarray(P @ head.transform.data.T)
    C, _ = kernels.cosine_matrix(Q, dc.COSINE_GUARD)
    mask = C >= epsilon
    np.fill_diagonal(mask, True)
    if classes is None:
        classes = np.arange(P.shape[0])
    return CategoryGraph(np.asarray(classes), mask, "generated")


def graph_from_edges(classes, pairs) -> CategoryGraph:
    """Graph over ``classes`` from an external edge list, symmetrised, with self-edges.

    Pairs naming a class outside ``classes`` are dropped.
    """
    classes = np.asarray(classes)
    pos = {int(c): i for i, c in enumerate(classes)}
    mask = np.eye(len(classes), dtype=bool)
    for a, b in np.asarray(pairs).reshape(-1, 2):
        i, j = pos.get(int(a)), pos.get(int(b))
        if i is not None and j is not None:
            mask[i, j] = mask[j, i] = True
    return CategoryGraph(classes, mask, "external")


def attention_weights(head: AttentionHead, protos: Tensor, y: int, neighbors) -> Tensor:
    """Softmax (temperature gamma) of row ``y``'s similarities over ``neighbors`` (row indices)."""
    neighbors = np.asarray(neighbors, dtype=np.intp)
    if neighbors.size == 0:
        raise ContractError("attention over an empty neighbour set")
    q = dc.linear(protos, head.transform).data
    sims = [dc.cosine(Tensor(q[y]), Tensor(q[z])).data for z in neighbors]
    return dc.softmax_temp(Tensor(np.asarray(sims, dtype=q.dtype)), head.gamma)


def _advance(P, C, graph, head):
    A = dc.masked_softmax(C, graph.mask, head.gamma)
    P_next = dc.matmul(A, P)
    return P_next, head.similarities(P_next)


def propagate_step(state: PrototypeState, graph_v, graph_s, head_v, head_s):
    """One simultaneous update in both spaces.

    Returns the step t+1 state and the consistency distributions (row-softmax
    at temperature 1 of the all-pairs similarities) of the new prototypes.
    """
    Pv, Cv = _advance(state.visual, head_v.similarities(state.visual), graph_v, head_v)
    Ps, Cs = _advance(state.semantic, head_s.similarities(state.semantic), graph_s, head_s)
    new = PrototypeState(state.classes, Pv, Ps, state.step + 1)
    return new, dc.softmax_temp(Cv, 1.0), dc.softmax_temp(Cs, 1.0)


def run_propagation(initial: PrototypeState, graphs, heads, tau, propagate=(True, True)):
    """Run ``tau`` propagation steps in each space.

    ``graphs`` and ``heads`` are (visual, semantic) pairs. A space with
    ``propagate`` False stays at its initial prototypes; its distributions
    are then those of the initial prototypes at every step.
    """
    if tau < 0:
        raise ConfigError("tau must be >= 0")
    trace = PropagationTrace(initial.classes, [initial.visual], [initial.semantic])
    if tau == 0:
        return trace
    spaces = ((trace.visual, trace.dist_v, graphs[0], heads[0], propagate[0]),
              (trace.semantic, trace.dist_s, graphs[1], heads[1], propagate[1]))
    for states, dists, graph, head, active in spaces:
        P = states[0]
        C = head.similarities(P)
        frozen = None
        for _ in range(tau):
            if active:
                P, C = _advance(P, C, graph, head)
                dists.append(dc.softmax_temp(C, 1.0))
            else:
                if frozen is None:
                    frozen = dc.softmax_temp(C, 1.0)
                dists.append(frozen)
            states.append(P)
    return trace


def fuse(trace: PropagationTrace, use=(True, True)) -> Tensor:
    """Final prototypes: visual half then semantic half, or just one of them."""
    parts = [p for p, keep in zip((trace.visual[-1], trace.semantic[-1]), use) if keep]
    if not parts:
        raise ConfigError("fuse needs at least one space")
    return parts[0] if len(parts) == 1 else dc.concat(parts, axis=1)
