from __future__ import annotations

import numpy as np
import pytest

from hypertype import geometry as geo
from hypertype import layers as L
from hypertype.config import ComponentSpaceConfig
from hypertype.data import TypedExample
from hypertype.model import expected_crossings, final_norm
from helpers import tiny_model


def crossings(counter):
    return counter["to_euclidean"] + counter["to_hyperbolic"]


def test_classify_length_is_label_count():
    clf, task, _ = tiny_model()
    for ex in task.test:
        assert clf.classify(ex).shape == (len(task.inventory),)


def test_same_seed_gives_bit_identical_logits():
    a, task, _ = tiny_model(seed=3)
    b, _, _ = tiny_model(seed=3, task=task)
    np.testing.assert_array_equal(a.logits(task.test), b.logits(task.test))


def test_all_hyperbolic_intermediates_are_ball_points():
    clf, task, _ = tiny_model(ComponentSpaceConfig.uniform("hyperbolic"))
    out = clf.forward(clf.batch(task.test))
    for value in (out.mention, out.chars, out.context, out.final):
        assert geo.is_ball_point(value)


def test_all_euclidean_makes_no_kernel_calls():
    clf, task, _ = tiny_model(ComponentSpaceConfig.uniform("euclidean"))
    with geo.count_kernel_calls() as counter:
        clf.forward(clf.batch(task.test))
    assert sum(counter.values()) == 0


@pytest.mark.parametrize("spaces", list(ComponentSpaceConfig.all_combinations()), ids=lambda s: s.label())
def test_crossing_counts_match_config(spaces):
    clf, task, _ = tiny_model(spaces)
    with geo.count_kernel_calls() as counter:
        clf.forward(clf.batch(task.test[:3]))
    assert crossings(counter) == expected_crossings(spaces)


def test_hyperbolic_mlr_only_converts_once():
    spaces = ComponentSpaceConfig.uniform("euclidean").with_override("mlr=hyperbolic")
    clf, task, _ = tiny_model(spaces)
    with geo.count_kernel_calls() as counter:
        clf.forward(clf.batch(task.test[:2]))
    assert counter["to_hyperbolic"] == 1
    assert counter["to_euclidean"] == 0


def test_logit_vanishes_when_final_equals_offset():
    clf, task, _ = tiny_model(ComponentSpaceConfig.uniform("hyperbolic"))
    ex = task.test[0]
    final = np.asarray(clf.forward(clf.batch([ex])).final)[0]
    clf.params["mlr.p"].value[2] = final
    assert clf.classify(ex)[2] == pytest.approx(0.0, abs=1e-12)


def test_single_token_mention_and_single_char():
    clf, task, _ = tiny_model(ComponentSpaceConfig.uniform("hyperbolic"))
    word = task.train[0].mention_tokens[-1]
    ex = TypedExample([word], [word], 0, 1, frozenset(), (), "q")
    m, c = clf.encode_mention(ex)
    batch = clf.batch([ex])
    state = np.asarray(clf._mention_states(batch, None))[0, 0]
    expect = geo.mobius_add(state, clf.params["mention.attn.positions"].value[0])
    np.testing.assert_allclose(m, expect, atol=1e-12)
    h = np.asarray(clf._char_states(batch))[0, 0]
    np.testing.assert_allclose(c, h, atol=1e-12)


def test_single_token_context():
    clf, task, _ = tiny_model(ComponentSpaceConfig.uniform("hyperbolic"))
    word = task.train[0].mention_tokens[-1]
    ex = TypedExample([word], [word], 0, 1, frozenset(), (), None)
    batch = clf.batch([ex])
    states = np.asarray(clf._context_states(batch, None))[0]
    row = batch.context_pos[0, 0]
    expect = geo.mobius_add(states[0], clf.params["context.attn.positions"].value[row])
    np.testing.assert_allclose(clf.encode_context(ex), expect, atol=1e-12)


def test_context_beta_zero_gives_uniform_midpoint():
    clf, task, _ = tiny_model(ComponentSpaceConfig.uniform("hyperbolic"))
    clf.params["context.attn.beta"].value = np.array(0.0)
    ex = task.test[0]
    batch = clf.batch([ex])
    states = np.asarray(clf._context_states(batch, None))[0]
    n = int(batch.context_mask[0].sum())
    rows = clf.params["context.attn.positions"].value[batch.context_pos[0, :n]]
    r = geo.mobius_add(states[:n], rows)
    np.testing.assert_allclose(clf.encode_context(ex), geo.mobius_midpoint(r, np.ones(n)), atol=1e-12)


def test_oov_uses_trainable_vector():
    clf, task, _ = tiny_model()
    ex = TypedExample(["never-seen"], ["never-seen"], 0, 1, frozenset(), (), None)
    before = clf.classify(ex)
    clf.params["word.oov"].value = geo.exp0(np.full(4, 0.3))
    assert not np.allclose(before, clf.classify(ex))


def test_final_norm_examples():
    assert final_norm(np.zeros((1, 3)), L.HYP)[0] == 0.0
    assert final_norm(np.array([[0.5, 0.0, 0.0]]), L.HYP)[0] == pytest.approx(2 * np.arctanh(0.5), rel=1e-14)
    assert final_norm(np.array([[3.0, 4.0, 0.0]]), L.EU)[0] == 5.0


def test_text_vector_norm_matches_batch():
    clf, task, _ = tiny_model()
    norms = clf.text_vector_norms(task.test)
    assert clf.text_vector_norm(task.test[1]) == pytest.approx(norms[1], abs=1e-12)


def test_parameter_shape_mismatch_rejected():
    clf, task, settings = tiny_model()
    from hypertype.model import Classifier

    params = dict(clf.params)
    params["mlr.a"] = type(params["mlr.a"])("mlr.a", np.zeros((2, 2)))
    with pytest.raises(ValueError):
        Classifier(clf.config, clf.spaces, params, clf.word_vectors, clf.words, clf.chars)
