"""Feature/attribute datasets, the synthetic benchmark generator, and episode sampling.

On-disk layout (little-endian, no headers)::

    meta.json        {"n_samples", "n_classes", "d_feat", "d_attr", "class_names", ...}
    features.f32     float32, n_samples x d_feat, row-major
    labels.u32       uint32, n_samples
    attributes.f32   float32, n_classes x d_attr, row-major
    split.json       {"seen", "unseen", "train", "test_seen", "test_unseen"}
    edges.csv        optional "class_id_a,class_id_b" lines
"""
from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from functools import cached_property
from pathlib import Path

import numpy as np

from isoprop.errors import (
    ConfigError,
    DataError,
    LabelRangeError,
    MissingFileError,
    PayloadSizeError,
    SamplingError,
    SplitOverlapError,
)

F32 = np.dtype("<f4")
U32 = np.dtype("<u4")


@dataclass(frozen=True, eq=False)
class SplitSpec:
    seen: tuple
    unseen: tuple
    train: np.ndarray
    test_seen: np.ndarray
    test_unseen: np.ndarray

    def validate(self, labels, n_classes):
        seen, unseen = set(self.seen), set(self.unseen)
        if seen & unseen:
            raise SplitOverlapError(f"classes in both seen and unseen: {sorted(seen & unseen)}")
        for c in seen | unseen:
            if not 0 <= c < n_classes:
                raise LabelRangeError(f"split names class {c} outside [0, {n_classes})")
        groups = {"train": self.train, "test_seen": self.test_seen, "test_unseen": self.test_unseen}
        n = len(labels)
        for name, idx in groups.items():
            if idx.size and (idx.min() < 0 or idx.max() >= n):
                raise LabelRangeError(f"{name} holds a sample index outside [0, {n})")
            if np.unique(idx).size != idx.size:
                raise SplitOverlapError(f"{name} lists a sample twice")
        names = list(groups)
        for i, a in enumerate(names):
            for b in names[i + 1:]:
                common = np.intersect1d(groups[a], groups[b])
                if common.size:
                    raise SplitOverlapError(f"samples in both {a} and {b}: {common[:5].tolist()}")
        for name, idx, allowed in (("train", self.train, seen), ("test_seen", self.test_seen, seen),
                                   ("test_unseen", self.test_unseen, unseen)):
            bad = set(np.unique(labels[idx]).tolist()) - allowed
            if bad:
                raise SplitOverlapError(f"{name} contains samples of classes {sorted(bad)}")
        present = set(np.unique(labels[self.train]).tolist())
        missing = seen - present
        if missing:
            raise DataError(f"seen classes without training samples: {sorted(missing)}")


@dataclass(frozen=True, eq=False)
class Dataset:
    features: np.ndarray
    labels: np.ndarray
    attributes: np.ndarray
    split: SplitSpec
    class_names: tuple
    edges: np.ndarray | None = None
    meta: dict = field(default_factory=dict)

    @property
    def n_samples(self):
        return self.features.shape[0]

    @property
    def n_classes(self):
        return self.attributes.shape[0]

    @property
    def d_feat(self):
        return self.features.shape[1]

    @property
    def d_attr(self):
        return self.attributes.shape[1]

    @cached_property
    def train_pools(self):
        """Training sample indices per seen class."""
        train = self.split.train
        by_label = self.labels[train]
        return {c: train[by_label == c] for c in self.split.seen}

    def validate(self):
        if self.labels.shape != (self.n_samples,):
            raise DataError("labels and features disagree on the sample count")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.n_classes):
            raise LabelRangeError(f"label outside [0, {self.n_classes})")
        if len(self.class_names) != self.n_classes:
            raise DataError("class_names length differs from the attribute row count")
        if not np.all(np.isfinite(self.attributes)):
            raise DataError("non-finite attribute values")
        zero = np.flatnonzero(~self.attributes.any(axis=1))
        if zero.size:
            raise DataError(f"all-zero attribute rows for classes {zero.tolist()}")
        if not np.all(np.isfinite(self.features)):
            raise DataError("non-finite feature values")
        self.split.validate(self.labels, self.n_classes)
        if self.edges is not None and self.edges.size:
            if self.edges.min() < 0 or self.edges.max() >= self.n_classes:
                raise LabelRangeError("edge list names a class outside the dataset")
        return self


@dataclass(frozen=True)
class Episode:
    classes: np.ndarray
    support: np.ndarray
    query: np.ndarray


@dataclass
class SyntheticSpec:
    n_seen: int = 20
    n_unseen: int = 5
    d_a: int = 16
    d_v: int = 64
    samples_per_class: int = 30
    noise_sigma: float = 0.1
    n_superclusters: int = 5
    topology: str = "mixed"
    seed: int = 0
    class_spread: float = 0.6
    train_fraction: float = 0.8


# --------------------------------------------------------------------------
# disk I/O

def _read_raw(path, dtype, expected, what):
    if not path.exists():
        raise MissingFileError(f"missing {path.name} in {path.parent}")
    raw = path.read_bytes()
    if len(raw) != expected * dtype.itemsize:
        raise PayloadSizeError(
            f"{path.name}: {len(raw)} bytes, meta implies {expected * dtype.itemsize} ({what})")
    return np.frombuffer(raw, dtype=dtype).copy()


def _read_json(path):
    if not path.exists():
        raise MissingFileError(f"missing {path.name} in {path.parent}")
    try:
        return json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise DataError(f"{path.name}: {exc}") from exc


def read_edges(path):
    pairs = []
    with open(path, newline="") as fh:
        for row in csv.reader(fh):
            if not row or row[0].lstrip().startswith("#"):
                continue
            try:
                a, b = int(row[0]), int(row[1])
            except (ValueError, IndexError):
                if not pairs:
                    continue  # header line
                raise DataError(f"{path}: malformed edge line {row!r}") from None
            pairs.append((a, b))
    return np.asarray(pairs, dtype=np.int64).reshape(-1, 2)


def load_dataset(path) -> Dataset:
    path = Path(path)
    if not path.is_dir():
        raise MissingFileError(f"dataset directory {path} does not exist")
    meta = _read_json(path / "meta.json")
    try:
        n, C = int(meta["n_samples"]), int(meta["n_classes"])
        dv, da = int(meta["d_feat"]), int(meta["d_attr"])
        names = tuple(meta["class_names"])
    except KeyError as exc:
        raise DataError(f"meta.json lacks {exc}") from exc
    features = _read_raw(path / "features.f32", F32, n * dv, f"{n}x{dv}").reshape(n, dv)
    labels = _read_raw(path / "labels.u32", U32, n, f"{n} labels").astype(np.int64)
    attributes = _read_raw(path / "attributes.f32", F32, C * da, f"{C}x{da}").reshape(C, da)
    if labels.size and labels.max() >= C:
        raise LabelRangeError(f"label {int(labels.max())} outside [0, {C})")
    sj = _read_json(path / "split.json")
    try:
        split = SplitSpec(
            seen=tuple(sorted(int(c) for c in sj["seen"])),
            unseen=tuple(sorted(int(c) for c in sj["unseen"])),
            train=np.asarray(sj["train"], dtype=np.int64),
            test_seen=np.asarray(sj["test_seen"], dtype=np.int64),
            test_unseen=np.asarray(sj["test_unseen"], dtype=np.int64),
        )
    except KeyError as exc:
        raise DataError(f"split.json lacks {exc}") from exc
    edges = read_edges(path / "edges.csv") if (path / "edges.csv").exists() else None
    extra = {k: v for k, v in meta.items()
             if k not in ("n_samples", "n_classes", "d_feat", "d_attr", "class_names")}
    ds = Dataset(features.astype(np.float32), labels, attributes.astype(np.float32), split,
                 names, edges, extra)
    return ds.validate()


def save_dataset(ds: Dataset, path):
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    meta = {"n_samples": ds.n_samples, "n_classes": ds.n_classes, "d_feat": ds.d_feat,
            "d_attr": ds.d_attr, "class_names": list(ds.class_names), **ds.meta}
    (path / "meta.json").write_text(json.dumps(meta, indent=1, sort_keys=True))
    (path / "features.f32").write_bytes(np.ascontiguousarray(ds.features, dtype=F32).tobytes())
    (path / "labels.u32").write_bytes(np.ascontiguousarray(ds.labels, dtype=U32).tobytes())
    (path / "attributes.f32").write_bytes(np.ascontiguousarray(ds.attributes, dtype=F32).tobytes())
    split = {"seen": list(ds.split.seen), "unseen": list(ds.split.unseen),
             "train": ds.split.train.tolist(), "test_seen": ds.split.test_seen.tolist(),
             "test_unseen": ds.split.test_unseen.tolist()}
    (path / "split.json").write_text(json.dumps(split))
    if ds.edges is not None:
        with open(path / "edges.csv", "w", newline="") as fh:
            csv.writer(fh, lineterminator="\n").writerows(ds.edges.tolist())
    return path


# --------------------------------------------------------------------------
# synthetic benchmark

def _assign_clusters(spec, rng):
    """Return (cluster id per class, sorted unseen class ids)."""
    C, S = spec.n_seen + spec.n_unseen, spec.n_superclusters
    if spec.topology == "segregated":
        n_unseen_clusters = min(S - 1, max(1, round(S * spec.n_unseen / C)))
        unseen_clusters = np.arange(S - n_unseen_clusters, S)
        seen_clusters = np.arange(S - n_unseen_clusters)
        order = rng.permutation(C)
        unseen = np.sort(order[:spec.n_unseen])
        cluster = np.empty(C, dtype=np.int64)
        seen = np.sort(order[spec.n_unseen:])
        cluster[seen] = seen_clusters[np.arange(seen.size) % seen_clusters.size]
        cluster[unseen] = unseen_clusters[np.arange(unseen.size) % unseen_clusters.size]
        return cluster, unseen
    cluster = rng.permutation(C) % S
    # one unseen class per supercluster in turn, so unseen classes have seen siblings
    members = [rng.permutation(np.flatnonzero(cluster == s)).tolist() for s in range(S)]
    unseen = []
    while len(unseen) < spec.n_unseen:
        # prefer clusters that keep a seen sibling after the pick
        floor = 1 if any(len(m) > 1 for m in members) else 0
        for s in rng.permutation(S):
            if len(unseen) < spec.n_unseen and len(members[s]) > floor:
                unseen.append(members[s].pop())
    unseen = np.sort(np.asarray(unseen, dtype=np.int64))
    is_unseen = np.zeros(C, dtype=bool)
    is_unseen[unseen] = True
    if not any(is_unseen[cluster == s].any() and (~is_unseen[cluster == s]).any() for s in range(S)):
        raise ConfigError("mixed topology impossible: no supercluster can hold both seen and unseen")
    return cluster, unseen


def generate_synthetic(spec: SyntheticSpec) -> Dataset:
    """Build a zero-shot benchmark with a known linear attribute-to-feature map.

    Class attributes are unit vectors scattered around supercluster centres;
    the class feature mean is ``A @ s_y`` for a seeded Gaussian map ``A`` and
    samples add isotropic noise of scale ``noise_sigma``.
    """
    if spec.topology not in ("mixed", "segregated"):
        raise ConfigError(f"topology must be mixed or segregated, got {spec.topology!r}")
    if spec.n_seen < 2 or spec.n_unseen < 1 or spec.n_superclusters < 2:
        raise ConfigError("need n_seen >= 2, n_unseen >= 1 and n_superclusters >= 2")
    if spec.samples_per_class < 2 or not 0 < spec.train_fraction < 1:
        raise ConfigError("need samples_per_class >= 2 and 0 < train_fraction < 1")
    if spec.noise_sigma < 0:
        raise ConfigError("noise_sigma must be non-negative")
    rng = np.random.default_rng(spec.seed)
    C = spec.n_seen + spec.n_unseen
    cluster, unseen = _assign_clusters(spec, rng)
    seen = np.setdiff1d(np.arange(C), unseen)

    centres = rng.normal(size=(spec.n_superclusters, spec.d_a))
    centres /= np.linalg.norm(centres, axis=1, keepdims=True)
    attrs = centres[cluster] + spec.class_spread * rng.normal(size=(C, spec.d_a)) / math.sqrt(spec.d_a)
    attrs /= np.linalg.norm(attrs, axis=1, keepdims=True)
    A = rng.normal(size=(spec.d_v, spec.d_a)) / math.sqrt(spec.d_a)
    means = attrs @ A.T

    m = spec.samples_per_class
    labels = np.repeat(np.arange(C), m)
    features = means[labels] + spec.noise_sigma * rng.normal(size=(C * m, spec.d_v))

    n_train = max(1, min(m - 1, int(round(spec.train_fraction * m))))
    train, test_seen, test_unseen = [], [], []
    unseen_set = set(unseen.tolist())
    for c in range(C):
        idx = np.arange(c * m, (c + 1) * m)
        if c in unseen_set:
            test_unseen.append(idx)
        else:
            idx = rng.permutation(idx)
            train.append(np.sort(idx[:n_train]))
            test_seen.append(np.sort(idx[n_train:]))
    split = SplitSpec(tuple(seen.tolist()), tuple(unseen.tolist()), np.concatenate(train),
                      np.concatenate(test_seen), np.concatenate(test_unseen))
    meta = {"synthetic": asdict(spec), "superclusters": cluster.tolist()}
    names = tuple(f"class_{c:03d}" for c in range(C))
    ds = Dataset(features.astype(np.float32), labels.astype(np.int64), attrs.astype(np.float32),
                 split, names, None, meta)
    return ds.validate()


# --------------------------------------------------------------------------
# episodes

def sample_episode(ds: Dataset, N: int, K: int, Q: int, rng) -> Episode:
    """Draw an N-way episode with K support and Q query samples per class."""
    seen = np.asarray(ds.split.seen)
    if N > seen.size:
        raise SamplingError(f"{N}-way episode but only {seen.size} seen classes")
    if K < 1 or Q < 1:
        raise SamplingError("need K >= 1 and Q >= 1")
    classes = np.sort(rng.choice(seen, size=N, replace=False))
    support, query = [], []
    for c in classes:
        pool = ds.train_pools[int(c)]
        if pool.size < K + Q:
            raise SamplingError(f"class {int(c)} ({ds.class_names[c]}) has {pool.size} training "
                                f"samples, needs {K + Q}")
        pick = rng.choice(pool, size=K + Q, replace=False)
        support.append(pick[:K])
        query.append(pick[K:])
    return Episode(classes, np.concatenate(support), np.concatenate(query))


def episodes_per_epoch(n_train: int, N: int, K: int) -> int:
    return max(1, n_train // (N * K))
