"""Episodic training: loss, optimizer, schedule and the fit loop."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from isoprop import diffcore as dc
from isoprop.classifier import score_matrix
from isoprop.datasets import Dataset, Episode, episodes_per_epoch, sample_episode
from isoprop.diffcore import Tape, Tensor
from isoprop.errors import ConfigError, NumericError
from isoprop.model import ModelParams, _read, _suffix, _write, init_params
from isoprop.propagation import build_graph, fuse, graph_from_edges, run_propagation
from isoprop.prototypes import PrototypeState, class_means, init_semantic, project_means

VARIANTS = (
    "full",
    "visual-proto-only",
    "semantic-proto-only",
    "no-propagation",
    "visual-prop-only",
    "semantic-prop-only",
    "shared-attention-visual",
    "shared-attention-semantic",
    "no-consistency",
)


@dataclass
class Hyperparams:
    gamma: float = 10.0
    edge_threshold: float = math.cos(math.radians(40))
    steps: int = 2
    consistency_weight: float = 1.0
    ways: int = 30
    shots: int = 1
    query_per_class: int = 5
    init_neighbors: int = 5
    lr: float = 2.0e-5
    lr_decay_factor: float = 0.1
    lr_decay_every: int = 240
    epochs: int = 360
    weight_decay: float = 1.0e-4
    experts: int = 2
    d: int = 32
    d_h: int = 0  # 0 means "same as d"
    seed: int = 0
    ce_reduction: str = "mean"
    consistency_reduction: str = "mean"
    decay_biases: bool = True
    dtype: str = "float32"

    def __post_init__(self):
        self.validate()

    @property
    def hidden(self):
        return self.d_h or self.d

    def validate(self):
        problems = []
        if not self.gamma > 0:
            problems.append("gamma must be > 0")
        if self.steps < 0:
            problems.append("steps must be >= 0")
        if self.consistency_weight < 0:
            problems.append("consistency_weight must be >= 0")
        if not -1 <= self.edge_threshold <= 1:
            problems.append("edge_threshold must lie in [-1, 1]")
        if self.ways < 2 or self.shots < 1 or self.query_per_class < 1:
            problems.append("need ways >= 2, shots >= 1, query_per_class >= 1")
        if self.init_neighbors < 1 or self.experts < 1 or self.d < 1 or self.d_h < 0:
            problems.append("init_neighbors, experts and d must be positive")
        if self.lr <= 0 or self.lr_decay_every < 1 or self.epochs < 0 or self.weight_decay < 0:
            problems.append("lr > 0, lr_decay_every >= 1, epochs >= 0, weight_decay >= 0")
        if self.ce_reduction not in ("mean", "sum") or self.consistency_reduction not in ("mean", "sum"):
            problems.append("reductions must be 'mean' or 'sum'")
        if self.dtype not in ("float32", "float64"):
            problems.append("dtype must be float32 or float64")
        if problems:
            raise ConfigError("; ".join(problems))
        return self

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown hyperparameters {sorted(unknown)}")
        return cls(**d)


@dataclass(frozen=True)
class Wiring:
    """How a variant assembles the model."""

    tau: int
    consistency_weight: float
    use: tuple = (True, True)
    propagate: tuple = (True, True)
    heads: tuple = ("v", "s")

    @property
    def width_factor(self):
        return sum(self.use)


def apply_variant(variant: str, hp: Hyperparams) -> Wiring:
    base = Wiring(hp.steps, hp.consistency_weight)
    table = {
        "full": base,
        "visual-proto-only": replace(base, use=(True, False)),
        "semantic-proto-only": replace(base, use=(False, True)),
        "no-propagation": replace(base, tau=0),
        "visual-prop-only": replace(base, propagate=(True, False)),
        "semantic-prop-only": replace(base, propagate=(False, True)),
        "shared-attention-visual": replace(base, heads=("v", "v")),
        "shared-attention-semantic": replace(base, heads=("s", "s")),
        "no-consistency": replace(base, consistency_weight=0.0),
    }
    if variant not in table:
        raise ConfigError(f"unknown variant {variant!r}; choose from {', '.join(VARIANTS)}")
    return table[variant]


@dataclass
class EpisodeResult:
    ce_loss: float
    consistency_loss: float
    total: float
    query_accuracy: float
    decay: float = 0.0
    trace: object = None
    graphs: tuple = ()


# --------------------------------------------------------------------------
# episode objective

def episode_graphs(params, hp, wiring, classes, Pv0, Ps0, edges=None):
    if edges is not None:
        g = graph_from_edges(classes, edges)
        return g, g
    head_v = params.head(wiring.heads[0], hp.gamma)
    head_s = params.head(wiring.heads[1], hp.gamma)
    return (build_graph(Pv0, head_v, hp.edge_threshold, classes),
            build_graph(Ps0, head_s, hp.edge_threshold, classes))


def episode_objective(params: ModelParams, hp: Hyperparams, episode: Episode, dataset: Dataset,
                      wiring: Wiring | None = None, graphs=None):
    """Forward pass of one episode.

    Returns ``(total, ce, consistency, scores, targets, trace, graphs)`` with
    the first three as Tensors. Prototypes come from the support set only.
    """
    wiring = wiring or apply_variant("full", hp)
    dtype = params.dtype
    classes = np.asarray(episode.classes)
    net = params.prototype_net(hp.init_neighbors)
    sup = episode.support
    means = class_means(dataset.features[sup], dataset.labels[sup], classes)
    Pv0 = project_means(net, means)
    Ps0 = init_semantic(net, dataset.attributes[classes].astype(dtype))
    if graphs is None:
        graphs = episode_graphs(params, hp, wiring, classes, Pv0, Ps0, dataset.edges)
    heads = (params.head(wiring.heads[0], hp.gamma), params.head(wiring.heads[1], hp.gamma))
    trace = run_propagation(PrototypeState(classes, Pv0, Ps0), graphs, heads, wiring.tau,
                            wiring.propagate)
    protos = fuse(trace, wiring.use)

    q = episode.query
    scores = score_matrix(params.classifier(), dataset.features[q].astype(dtype), protos)
    targets = np.searchsorted(classes, dataset.labels[q])
    ce = dc.cross_entropy(scores, targets, hp.ce_reduction)
    total = ce
    consistency = Tensor(np.zeros((), dtype=dtype))
    if wiring.consistency_weight > 0 and trace.dist_v:
        terms = [dc.kl_divergence(pv, ps) for pv, ps in zip(trace.dist_v, trace.dist_s)]
        consistency = terms[0]
        for t in terms[1:]:
            consistency = dc.add(consistency, t)
        weight = wiring.consistency_weight
        if hp.consistency_reduction == "mean":
            weight /= len(classes)
        total = dc.add(ce, dc.scale(consistency, weight))
    return total, ce, consistency, scores, targets, trace, graphs


def decay_term(params, hp):
    names = [n for n in params if hp.decay_biases or not _is_bias(n)]
    return 0.5 * hp.weight_decay * sum(float(np.sum(params[n].data.astype(np.float64) ** 2)) for n in names)


def _is_bias(name):
    return name in ("b1", "b") or name.endswith(".bias")


def episode_loss(params, hp, episode, dataset, wiring=None, graphs=None, backward=True) -> EpisodeResult:
    """Evaluate one episode and, by default, populate parameter gradients."""
    wiring = wiring or apply_variant("full", hp)
    with Tape() as tape:
        total, ce, cons, scores, targets, trace, graphs = episode_objective(
            params, hp, episode, dataset, wiring, graphs)
    if not np.isfinite(total.data):
        bad = tape.first_nonfinite()
        where = f"node {bad.node_id} ({bad.op})" if bad is not None else "an input"
        raise NumericError(f"non-finite episode loss; first non-finite value at {where}")
    if backward:
        tape.backward(total)
    acc = float(np.mean(np.argmax(scores.data, axis=1) == targets))
    decay = decay_term(params, hp)
    return EpisodeResult(float(ce.data), float(cons.data), float(total.data) + decay, acc, decay,
                         trace, graphs)


# --------------------------------------------------------------------------
# optimizer

@dataclass
class OptimizerState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def save(self, path):
        path = Path(path)
        entries = {}
        for name in self.m:
            for kind, store in (("m", self.m), ("v", self.v)):
                fname = f"opt.{kind}.{name}{_suffix(store[name].dtype)}"
                _write(path / fname, store[name])
                entries[f"{kind}.{name}"] = {"file": fname, "shape": list(store[name].shape),
                                             "dtype": store[name].dtype.name}
        return {"beta1": self.beta1, "beta2": self.beta2, "eps": self.eps, "step": self.step,
                "moments": entries}

    @classmethod
    def load(cls, path, info):
        opt = cls(info["beta1"], info["beta2"], info["eps"], info["step"])
        for key, e in info["moments"].items():
            kind, name = key.split(".", 1)
            getattr(opt, kind)[name] = _read(Path(path) / e["file"], e["dtype"], tuple(e["shape"]))
        return opt


def adam_step(opt: OptimizerState, params: ModelParams, lr, weight_decay, decay_biases=True):
    """Bias-corrected Adam update with L2 decay folded into the gradient; zeroes grads."""
    opt.step += 1
    c1 = 1.0 - opt.beta1 ** opt.step
    c2 = 1.0 - opt.beta2 ** opt.step
    for name, p in params.items():
        g = np.zeros_like(p.data) if p.grad is None else p.grad
        if weight_decay and (decay_biases or not _is_bias(name)):
            g = g + weight_decay * p.data
        if name not in opt.m:
            opt.m[name] = np.zeros_like(p.data)
            opt.v[name] = np.zeros_like(p.data)
        m, v = opt.m[name], opt.v[name]
        m *= opt.beta1
        m += (1.0 - opt.beta1) * g
        v *= opt.beta2
        v += (1.0 - opt.beta2) * g * g
        p.data -= (lr / c1) * m / (np.sqrt(v / c2) + opt.eps)
        p.grad = np.zeros_like(p.data)


def lr_at(epoch: int, hp: Hyperparams) -> float:
    return hp.lr * hp.lr_decay_factor ** (epoch // hp.lr_decay_every)


# --------------------------------------------------------------------------
# fit loop

@dataclass
class FitResult:
    params: ModelParams
    log: list
    optimizer: OptimizerState
    rng_state: dict
    epochs_done: int
    variant: str = "full"


def new_params(hp: Hyperparams, dataset: Dataset, wiring: Wiring, rng=None):
    rng = rng or _streams(hp.seed)[0]
    return init_params(dataset.d_feat, dataset.d_attr, hp.d, hp.hidden, hp.experts,
                       hp.d * wiring.width_factor, rng, np.dtype(hp.dtype))


def _streams(seed):
    init_seq, episode_seq = np.random.SeedSequence(seed).spawn(2)
    return np.random.default_rng(init_seq), np.random.default_rng(episode_seq)


def fit(dataset: Dataset, hp: Hyperparams, variant: str = "full", callbacks=(), resume=None) -> FitResult:
    """Train for ``hp.epochs`` epochs of episodic updates.

    ``resume`` is a previous :class:`FitResult` (or one rebuilt from a
    checkpoint); training continues from its epoch, optimizer and RNG state.
    Each callback is called as ``cb(record, params_snapshot)`` after every epoch.
    """
    wiring = apply_variant(variant, hp)
    if hp.ways > len(dataset.split.seen):
        raise ConfigError(f"ways={hp.ways} exceeds the {len(dataset.split.seen)} seen classes")
    init_rng, rng = _streams(hp.seed)
    if resume is None:
        params = new_params(hp, dataset, wiring, init_rng)
        opt, log, start = OptimizerState(), [], 0
    else:
        params, opt, log, start = resume.params, resume.optimizer, list(resume.log), resume.epochs_done
        rng.bit_generator.state = resume.rng_state
    n_ep = episodes_per_epoch(len(dataset.split.train), hp.ways, hp.shots)
    done = start * n_ep
    for epoch in range(start, hp.epochs):
        lr = lr_at(epoch, hp)
        sums = np.zeros(4)
        for _ in range(n_ep):
            ep = sample_episode(dataset, hp.ways, hp.shots, hp.query_per_class, rng)
            res = episode_loss(params, hp, ep, dataset, wiring)
            adam_step(opt, params, lr, hp.weight_decay, hp.decay_biases)
            sums += (res.ce_loss, res.consistency_loss, res.total, res.query_accuracy)
            done += 1
        ce, cons, tot, acc = sums / n_ep
        record = {"epoch": epoch + 1, "episode": done, "ce": float(ce), "consistency": float(cons),
                  "total": float(tot), "query_acc": float(acc), "lr": float(lr)}
        log.append(record)
        for cb in callbacks:
            cb(dict(record), params.copy())
    return FitResult(params, log, opt, rng.bit_generator.state, max(start, hp.epochs), variant)
