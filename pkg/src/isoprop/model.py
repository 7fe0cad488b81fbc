"""Trainable parameter container and checkpoint files.

A checkpoint directory holds ``manifest.json`` (shapes, dtypes, run metadata)
and one raw little-endian payload per parameter, ``<name>.f32`` (or ``.f64``
for 64-bit parameters). Optimizer moments, when present, are stored the same
way under ``opt.m.<name>`` / ``opt.v.<name>``.
"""
from __future__ import annotations

import json
import math
from pathlib import Path

import numpy as np

from isoprop.classifier import RelationClassifier
from isoprop.diffcore import Tensor
from isoprop.errors import ManifestError, MissingFileError, PayloadSizeError
from isoprop.propagation import AttentionHead
from isoprop.prototypes import PrototypeNet

GROUPS = ("W", "experts", "h_v", "h_s", "W1", "W2", "b1", "w", "b")


class ModelParams:
    """Ordered name -> Tensor mapping for every trainable array."""

    def __init__(self, tensors):
        self.tensors = dict(tensors)

    def __getitem__(self, name):
        return self.tensors[name]

    def __iter__(self):
        return iter(self.tensors)

    def __len__(self):
        return len(self.tensors)

    def items(self):
        return self.tensors.items()

    def names(self):
        return list(self.tensors)

    @property
    def dtype(self):
        return self.tensors["W"].dtype

    @property
    def n_experts(self):
        return sum(1 for n in self.tensors if n.startswith("experts.") and n.endswith(".weight"))

    def experts(self):
        return [(self.tensors[f"experts.{e}.weight"], self.tensors[f"experts.{e}.bias"])
                for e in range(self.n_experts)]

    def prototype_net(self, init_neighbors=5):
        return PrototypeNet(self["W"], self.experts(), init_neighbors)

    def head(self, space, gamma):
        return AttentionHead(self["h_v" if space == "v" else "h_s"], gamma)

    def classifier(self):
        return RelationClassifier(self["W1"], self["W2"], self["b1"], self["w"], self["b"])

    def zero_grad(self):
        for t in self.tensors.values():
            t.grad = None

    def copy(self, dtype=None):
        return ModelParams({n: Tensor(np.array(t.data, dtype=dtype or t.dtype), requires_grad=True)
                            for n, t in self.tensors.items()})

    def group_of(self, name):
        return "experts" if name.startswith("experts.") else name

    def count(self):
        return sum(t.data.size for t in self.tensors.values())


def init_params(d_v, d_a, d, d_h, n_experts, fused_width, rng, dtype=np.float32):
    """Weights ~ U(-1/sqrt(fan_in), 1/sqrt(fan_in)); biases zero."""

    def weight(rows, cols):
        bound = 1.0 / math.sqrt(cols)
        return Tensor(rng.uniform(-bound, bound, size=(rows, cols)).astype(dtype), requires_grad=True)

    def zeros(*shape):
        return Tensor(np.zeros(shape, dtype=dtype), requires_grad=True)

    t = {"W": weight(d, d_v)}
    for e in range(n_experts):
        t[f"experts.{e}.weight"] = weight(d, d_a)
        t[f"experts.{e}.bias"] = zeros(d)
    t["h_v"] = weight(d, d)
    t["h_s"] = weight(d, d)
    t["W1"] = weight(d_h, d_v)
    t["W2"] = weight(d_h, fused_width)
    t["b1"] = zeros(d_h)
    bound = 1.0 / math.sqrt(d_h)
    t["w"] = Tensor(rng.uniform(-bound, bound, size=d_h).astype(dtype), requires_grad=True)
    t["b"] = zeros()
    return ModelParams(t)


def _suffix(dtype):
    return ".f64" if np.dtype(dtype) == np.float64 else ".f32"


def _write(path, arr):
    le = arr.dtype.newbyteorder("<")
    path.write_bytes(np.ascontiguousarray(arr, dtype=le).tobytes())


def _read(path, dtype, shape):
    if not path.exists():
        raise MissingFileError(f"checkpoint payload {path.name} missing")
    raw = path.read_bytes()
    dt = np.dtype(dtype).newbyteorder("<")
    expected = int(np.prod(shape)) * dt.itemsize
    if len(raw) != expected:
        raise PayloadSizeError(f"{path.name}: {len(raw)} bytes, manifest implies {expected}")
    return np.frombuffer(raw, dtype=dt).reshape(shape).astype(np.dtype(dtype))


def save_checkpoint(path, params: ModelParams, extra=None, optimizer=None):
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    entries = {}
    for name, t in params.items():
        fname = name + _suffix(t.dtype)
        _write(path / fname, t.data)
        entries[name] = {"shape": list(t.shape), "dtype": t.dtype.name, "file": fname}
    manifest = {"format": 1, "params": entries, **(extra or {})}
    if optimizer is not None:
        manifest["optimizer"] = optimizer.save(path)
    (path / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True))
    return path


def load_manifest(path):
    mpath = Path(path) / "manifest.json"
    if not mpath.exists():
        raise MissingFileError(f"no manifest.json in {path}")
    try:
        return json.loads(mpath.read_text())
    except json.JSONDecodeError as exc:
        raise ManifestError(f"manifest.json: {exc}") from exc


def load_checkpoint(path):
    """Return ``(params, manifest)``."""
    path = Path(path)
    manifest = load_manifest(path)
    try:
        entries = manifest["params"]
        tensors = {name: Tensor(_read(path / e["file"], e["dtype"], tuple(e["shape"])), requires_grad=True)
                   for name, e in entries.items()}
    except KeyError as exc:
        raise ManifestError(f"manifest entry lacks {exc}") from exc
    missing = {"W", "h_v", "h_s", "W1", "W2", "b1", "w", "b"} - set(tensors)
    if missing:
        raise ManifestError(f"checkpoint lacks parameters {sorted(missing)}")
    return ModelParams(tensors), manifest
