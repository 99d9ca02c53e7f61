from __future__ import annotations

import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from hypertype import autodiff as ad
from hypertype.autodiff import Parameter, use
from hypertype.data import GRANULARITIES, LabelInventory
from hypertype.metrics import accuracy, bce_loss, evaluate, level_scores, multitask_loss
from scoring_oracle import brute_scores


def naive_bce(z, y):
    s = 1.0 / (1.0 + np.exp(-z))
    return np.mean(-(y * np.log(s) + (1 - y) * np.log(1 - s)))


def inventory(coarse=("a",), fine=("b",), ultra=("c",)):
    labels = list(coarse) + list(fine) + list(ultra)
    gran = {l: "coarse" for l in coarse} | {l: "fine" for l in fine} | {l: "ultra" for l in ultra}
    return LabelInventory(labels, gran)


# -------------------------------------------------------------------- loss


def test_bce_at_zero_logit_is_ln2():
    assert float(bce_loss(np.array([0.0]), np.array([1.0]))) == pytest.approx(math.log(2), rel=1e-15)


def test_bce_saturates_without_overflow():
    assert float(bce_loss(np.array([30.0]), np.array([1.0]))) == pytest.approx(0.0, abs=1e-12)
    big = float(bce_loss(np.array([-800.0, 800.0]), np.array([1.0, 0.0])))
    assert big == pytest.approx(800.0)


def test_bce_matches_naive_formula():
    rng = np.random.default_rng(3)
    for _ in range(50):
        z = rng.uniform(-8, 8, size=7)
        y = rng.integers(0, 2, size=7).astype(float)
        assert float(bce_loss(z, y)) == pytest.approx(naive_bce(z, y), abs=1e-12)


def test_bce_gradient_is_sigmoid_minus_gold():
    z = Parameter("z", np.array([0.3, -1.2, 2.0]))
    y = np.array([1.0, 0.0, 1.0])
    with ad.Tape():
        g = ad.backward(bce_loss(use(z), y))["z"]
    np.testing.assert_allclose(g, (1 / (1 + np.exp(-z.value)) - y) / 3, rtol=1e-12)


def test_bce_shape_mismatch():
    with pytest.raises(ValueError):
        bce_loss(np.zeros(3), np.zeros(2))


def test_multitask_only_coarse_gold():
    inv = inventory()
    z = np.array([0.4, -0.3, 1.1])
    y = np.array([1.0, 0.0, 0.0])
    assert float(multitask_loss(z, y, inv)) == pytest.approx(naive_bce(z[:1], y[:1]), abs=1e-12)


def test_multitask_all_three_partitions_sum():
    inv = inventory(("a", "b"), ("c",), ("d", "e"))
    z = np.array([0.4, -0.3, 1.1, -2.0, 0.5])
    y = np.array([1.0, 0.0, 1.0, 0.0, 1.0])
    expect = naive_bce(z[:2], y[:2]) + naive_bce(z[2:3], y[2:3]) + naive_bce(z[3:], y[3:])
    assert float(multitask_loss(z, y, inv)) == pytest.approx(expect, abs=1e-12)


def test_multitask_single_partition_equals_bce():
    inv = LabelInventory.from_labels(["x", "y", "z", "w"])
    rng = np.random.default_rng(0)
    z = rng.normal(size=(5, 4))
    y = (rng.random((5, 4)) < 0.5).astype(float)
    y[:, 0] = 1.0
    expect = float(np.mean(bce_loss(z, y)))
    assert float(multitask_loss(z, y, inv)) == pytest.approx(expect, abs=1e-12)


def test_multitask_batch_averages_examples():
    inv = inventory()
    z = np.array([[0.4, -0.3, 1.1], [0.0, 2.0, -1.0]])
    y = np.array([[1.0, 0.0, 0.0], [0.0, 1.0, 1.0]])
    per = [naive_bce(z[0, :1], y[0, :1]), naive_bce(z[1, 1:2], y[1, 1:2]) + naive_bce(z[1, 2:], y[1, 2:])]
    assert float(multitask_loss(z, y, inv)) == pytest.approx(np.mean(per), abs=1e-12)


# ----------------------------------------------------------------- scoring


def test_toy_corpus_macro_is_three_quarters():
    preds, golds = [{0}, {0, 1}], [{0, 1}, {1}]
    s = level_scores(preds, golds)
    assert (s.macro.precision, s.macro.recall, s.macro.f1) == (0.75, 0.75, 0.75)
    brute = brute_scores(preds, golds, 2)["macro"]
    assert all(v == 0.75 for v in brute)


def test_perfect_predictions_score_one():
    inv = inventory(("a", "b"), ("c",), ("d",))
    golds = [{0, 2}, {1}, {3, 0}]
    scores = evaluate(golds, golds, inv)
    for name in ("total", "coarse", "fine", "ultra"):
        lvl = scores.level(name)
        assert (lvl.macro.f1, lvl.micro.f1, lvl.macro.precision, lvl.micro.recall) == (1.0, 1.0, 1.0, 1.0)
    assert scores.accuracy == 1.0


def test_empty_predictions_give_zero():
    s = level_scores([set(), set()], [{0}, {1, 2}])
    assert s.macro.recall == 0.0 and s.macro.f1 == 0.0
    assert s.micro.recall == 0.0 and s.micro.f1 == 0.0


def test_examples_without_relevant_gold_are_excluded():
    inv = inventory(("a",), ("b",), ("c",))
    scores = evaluate([{0, 1}, {0}], [{0}, {2}], inv)
    assert scores.fine.examples == 0
    assert scores.coarse.examples == 1
    assert scores.coarse.macro.f1 == 1.0
    assert scores.ultra.macro.recall == 0.0


def test_accuracy_is_exact_set_match():
    assert accuracy([{0}, {1, 2}, set()], [{0}, {1}, set()]) == pytest.approx(2 / 3)
    assert accuracy([], []) == 0.0


def test_misaligned_inputs_rejected():
    with pytest.raises(ValueError):
        level_scores([{0}], [{0}, {1}])


def test_report_formats():
    inv = inventory()
    scores = evaluate([{0}], [{0, 1}], inv)
    assert "accuracy" in scores.to_text()
    import json

    d = json.loads(scores.to_json())
    assert set(d) == {"total", "coarse", "fine", "ultra", "accuracy"}


label_sets = st.lists(st.frozensets(st.integers(0, 5), max_size=4), min_size=1, max_size=12)


@settings(max_examples=200, deadline=None)
@given(st.data())
def test_matches_brute_force_and_bounds(data):
    golds = data.draw(label_sets)
    preds = data.draw(st.lists(st.frozensets(st.integers(0, 5), max_size=4), min_size=len(golds), max_size=len(golds)))
    cols = data.draw(st.frozensets(st.integers(0, 5)))
    for keep in (None, cols):
        got = level_scores(preds, golds, keep)
        want = brute_scores(preds, golds, 6, None if keep is None else sorted(keep))
        for kind in ("macro", "micro"):
            prf = getattr(got, kind)
            values = (prf.precision, prf.recall, prf.f1)
            for v, w in zip(values, want[kind]):
                assert v == pytest.approx(float(w), abs=1e-12)
                assert 0.0 <= v <= 1.0
            if prf.precision == 0.0 or prf.recall == 0.0:
                assert prf.f1 == 0.0


@settings(max_examples=100, deadline=None)
@given(st.data())
def test_permutation_invariance(data):
    golds = data.draw(label_sets)
    preds = data.draw(st.lists(st.frozensets(st.integers(0, 5), max_size=4), min_size=len(golds), max_size=len(golds)))
    order = data.draw(st.permutations(range(len(golds))))
    inv = LabelInventory([f"l{i}" for i in range(6)], {f"l{i}": GRANULARITIES[i % 3] for i in range(6)})
    a = evaluate(preds, golds, inv).as_dict()
    b = evaluate([preds[i] for i in order], [golds[i] for i in order], inv).as_dict()
    for level in ("total", "coarse", "fine", "ultra"):
        for kind in ("macro", "micro"):
            for key, v in a[level][kind].items():
                assert b[level][kind][key] == pytest.approx(v, abs=1e-12)


@pytest.mark.parametrize("level", GRANULARITIES)
def test_single_granularity_total_equals_level(level):
    inv = LabelInventory.from_labels([f"l{i}" for i in range(4)], default=level)
    rng = np.random.default_rng(5)
    preds = [set(np.flatnonzero(rng.random(4) < 0.4).tolist()) for _ in range(20)]
    golds = [set(np.flatnonzero(rng.random(4) < 0.4).tolist()) for _ in range(20)]
    scores = evaluate(preds, golds, inv)
    assert scores.total == scores.level(level)


def test_exhaustive_small_corpora_match_brute_force():
    subsets = [frozenset(s) for r in range(3) for s in itertools.combinations(range(2), r)]
    for p1, g1, p2, g2 in itertools.product(subsets, repeat=4):
        got = level_scores([p1, p2], [g1, g2])
        want = brute_scores([p1, p2], [g1, g2], 2)
        assert got.macro.f1 == pytest.approx(float(want["macro"][2]), abs=1e-15)
        assert got.micro.f1 == pytest.approx(float(want["micro"][2]), abs=1e-15)
