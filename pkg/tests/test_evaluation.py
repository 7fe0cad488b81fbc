import csv
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from isoprop.errors import ConfigError, ContractError
from isoprop.evaluation import (
    evaluate,
    export_prototypes,
    harmonic,
    per_class_accuracy,
    test_time_trace as build_test_trace,
    topk_hits,
)
from isoprop.training import apply_variant, fit, new_params


def hand_count(pred, labels, classes):
    rates = []
    for c in classes:
        n = hit = 0
        for p, y in zip(pred, labels):
            if y == c:
                n += 1
                hit += p == y
        rates.append(hit / n)
    return sum(rates) / len(rates)


def test_per_class_closed_forms():
    assert per_class_accuracy([1, 2, 2], [1, 2, 2], [1, 2]) == 1.0
    assert per_class_accuracy([0, 0, 0, 5], [0, 0, 0, 1], [0, 1]) == 0.5
    pred = [0, 0, 0, 9, 1, 9]
    labels = [0, 0, 0, 0, 1, 1]
    assert per_class_accuracy(pred, labels, [0, 1]) == 0.625


def test_per_class_empty_class():
    with pytest.raises(ContractError):
        per_class_accuracy([0], [0], [0, 1])


def test_per_class_randomized_oracle(rng):
    for _ in range(50):
        k = rng.integers(1, 5)
        labels = rng.integers(0, k, size=20)
        labels[:k] = np.arange(k)
        pred = rng.integers(0, k + 1, size=20)
        assert per_class_accuracy(pred, labels, range(k)) == hand_count(pred, labels, range(k))


def test_per_class_duplication_invariant(rng):
    labels = np.repeat([0, 1, 2], [3, 5, 2])
    pred = rng.integers(0, 3, size=10)
    a = per_class_accuracy(pred, labels, [0, 1, 2])
    assert per_class_accuracy(np.tile(pred, 4), np.tile(labels, 4), [0, 1, 2]) == pytest.approx(a, abs=1e-15)


def test_harmonic_table_values():
    assert abs(harmonic(0.792, 0.675) - 0.729) <= 0.0005
    assert abs(harmonic(0.738, 0.602) - 0.663) <= 0.0005
    assert harmonic(0, 0) == 0.0
    with pytest.raises(ContractError):
        harmonic(1.2, 0.5)


@given(st.floats(0, 1), st.floats(0, 1), st.floats(0, 1))
def test_harmonic_properties(a, b, c):
    assert harmonic(a, b) == pytest.approx(harmonic(b, a))
    assert harmonic(a, a) == pytest.approx(a)
    if a > 0 and b > 0:
        assert harmonic(a, b) <= max(a, b) + 1e-12
        assert harmonic(a, b) >= min(a, b) - 1e-12
    if c >= a:
        assert harmonic(c, b) >= harmonic(a, b) - 1e-12


def test_topk_closed_forms():
    scores = np.array([[0.1, 0.9, 0.5], [0.8, 0.2, 0.2]])
    hits = topk_hits(scores, [4, 5, 6], [6, 5], [4, 5, 6], [1, 2, 3])
    assert hits == {1: 0.0, 2: 1.0, 3: 1.0}  # row 2: tie 5/6 resolves to 5
    with pytest.raises(ConfigError):
        topk_hits(scores, [4, 5, 6], [6, 5], [4, 5, 6], [4])
    with pytest.raises(ConfigError):
        topk_hits(scores, [4, 5, 6], [6, 5], [4, 5, 6], [2, 1])


@pytest.fixture(scope="module")
def trained(tiny_ds):
    from isoprop.training import Hyperparams
    hp = Hyperparams(ways=4, d=8, lr=1e-3, epochs=3, seed=1)
    return hp, fit(tiny_ds, hp).params


def test_report_fields(tiny_ds, trained):
    hp, params = trained
    g = evaluate(params, hp, tiny_ds, "gzsl")
    z = evaluate(params, hp, tiny_ds, "zsl", ks=[1, 2, 3])
    assert g.harmonic == harmonic(g.acc_seen, g.acc_unseen)
    assert "acc_seen" not in z.to_dict() and z.acc_seen is None
    assert set(g.per_class) == set(range(tiny_ds.n_classes))
    assert set(z.per_class) == set(tiny_ds.split.unseen)
    assert all(0 <= v <= 1 for v in g.per_class.values())
    assert z.acc_unseen >= g.acc_unseen
    assert z.hit_at_k[1] == pytest.approx(z.acc_unseen_micro, abs=1e-9)
    rates = [z.hit_at_k[k] for k in (1, 2, 3)]
    assert rates == sorted(rates) and rates[-1] == 1.0
    with pytest.raises(ConfigError):
        evaluate(params, hp, tiny_ds, "fsl")


def test_zsl_unseen_context(tiny_ds, trained):
    hp, params = trained
    z = evaluate(params, hp, tiny_ds, "zsl", zsl_context="unseen", ks=[1])
    assert z.hit_at_k[1] == pytest.approx(z.acc_unseen_micro, abs=1e-9)


def test_evaluate_deterministic(tiny_ds, trained):
    hp, params = trained
    assert evaluate(params, hp, tiny_ds, "gzsl").to_dict() == evaluate(params, hp, tiny_ds, "gzsl").to_dict()


def test_variants_evaluate(tiny_ds):
    from isoprop.training import Hyperparams
    hp = Hyperparams(ways=4, d=8, epochs=0)
    from isoprop.training import VARIANTS
    for v in VARIANTS:
        p = new_params(hp, tiny_ds, apply_variant(v, hp))
        rep = evaluate(p, hp, tiny_ds, "gzsl", v)
        assert 0 <= rep.harmonic <= 1


def test_test_time_seen_prototypes_use_all_training_samples(tiny_ds, trained):
    hp, params = trained
    trace, _ = build_test_trace(params, hp, tiny_ds)
    c = tiny_ds.split.seen[0]
    rows = tiny_ds.split.train[tiny_ds.labels[tiny_ds.split.train] == c]
    expect = params["W"].data @ tiny_ds.features[rows].astype(np.float64).mean(axis=0)
    np.testing.assert_allclose(trace.visual[0].data[list(trace.classes).index(c)], expect, rtol=1e-5, atol=1e-6)


def test_export(tiny_ds, trained, tmp_path):
    hp, params = trained
    trace, _ = build_test_trace(params, hp, tiny_ds)
    path = export_prototypes(trace, tmp_path / "p.csv", list(tiny_ds.class_names))
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    d = hp.d
    assert rows[0] == ["class_id", "class_name", "space", "step"] + [f"p{i}" for i in range(d)]
    body = rows[1:]
    assert len(body) == tiny_ds.n_classes * 2 * (hp.steps + 1)
    for r in body:
        cid, space, step = int(r[0]), r[2], int(r[3])
        states = trace.visual if space == "visual" else trace.semantic
        vals = np.array([float(v) for v in r[4:]])
        np.testing.assert_allclose(vals, states[step].data[list(trace.classes).index(cid)], atol=1e-6)


def test_export_count_ten_classes(tmp_path, rng):
    from isoprop.diffcore import Tensor
    from isoprop.propagation import PropagationTrace
    steps = [Tensor(rng.normal(size=(10, 3))) for _ in range(3)]
    tr = PropagationTrace(np.arange(10), steps, steps)
    export_prototypes(tr, tmp_path / "x.csv")
    assert len((tmp_path / "x.csv").read_text().splitlines()) == 61
