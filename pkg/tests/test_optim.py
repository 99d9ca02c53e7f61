from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from hypertype import autodiff as ad
from hypertype import geometry as geo
from hypertype.autodiff import EUCLIDEAN, POINCARE, NumericError, Parameter
from hypertype.optim import Adam, RiemannianAdam, clip_grad_norm, geodesic_regression_toy


class FlatAdam(RiemannianAdam):
    """Riemannian Adam with every geometric hook replaced by its Euclidean stand-in."""

    def metric_scale(self, x):
        return np.ones(x.shape[:-1] + (1,))

    def retract(self, x, u):
        return x + u

    def transport(self, x, new, m):
        return m

    def project(self, x):
        return x


def test_geodesic_regression_converges():
    x, history = geodesic_regression_toy(start=0.01, target=0.3, steps=200, lr=0.01)
    assert history[-1] < 1e-3
    assert geo.is_ball_point(x.value)


def test_geodesic_regression_is_nearly_monotone():
    _, history = geodesic_regression_toy(steps=50)
    ups = sum(b > a for a, b in zip(history, history[1:]))
    assert ups <= 2


def test_ball_invariant_survives_random_fuzz():
    rng = np.random.default_rng(7)
    x = Parameter("x", geo.project_to_ball(rng.uniform(-0.5, 0.5, size=(3, 2))), POINCARE)
    opt = RiemannianAdam({"x": x}, lr=0.5, max_grad_norm=None)
    for _ in range(10_000):
        g = rng.normal(size=x.value.shape) * 10.0 ** rng.uniform(-3, 3)
        opt.step({"x": g})
        assert np.all(np.sum(x.value**2, axis=-1) < 1.0)
    assert geo.is_ball_point(x.value)


def test_zero_gradient_leaves_parameters_and_counts_step():
    x = Parameter("x", np.array([[0.2, -0.1]]), POINCARE)
    w = Parameter("w", np.array([1.0, 2.0]))
    before = (x.value.copy(), w.value.copy())
    opt = RiemannianAdam({"x": x, "w": w})
    opt.step({"x": np.zeros((1, 2)), "w": np.zeros(2)})
    np.testing.assert_array_equal(x.value, before[0])
    np.testing.assert_array_equal(w.value, before[1])
    assert opt.state.step == 1


def test_riemannian_scale_at_origin_is_quarter():
    opt = RiemannianAdam({"x": Parameter("x", np.zeros((1, 3)), POINCARE)})
    np.testing.assert_allclose(1.0 / opt.metric_scale(np.zeros((1, 3))), 0.25)


def test_first_moment_holds_quarter_gradient_at_origin():
    x = Parameter("x", np.zeros((1, 2)), POINCARE)
    opt = RiemannianAdam({"x": x}, betas=(0.0, 0.999), max_grad_norm=None)
    g = np.array([[0.4, -0.8]])
    opt.step({"x": g})
    lam_old, lam_new = 2.0, float(geo.conformal_factor(x.value)[0, 0])
    np.testing.assert_allclose(opt.state.m["x"], g / 4 * lam_old / lam_new, rtol=1e-12)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_hooks_reduce_to_plain_adam(seed):
    rng = np.random.default_rng(seed)
    start = rng.uniform(-0.4, 0.4, size=(2, 3))
    a = Parameter("a", start.copy(), POINCARE)
    b = Parameter("b", start.copy(), POINCARE)
    flat = FlatAdam({"a": a}, lr=0.01, weight_decay=0.1)
    plain = Adam({"a": b}, lr=0.01, weight_decay=0.1)
    for _ in range(20):
        g = rng.normal(size=start.shape)
        flat.step({"a": g})
        plain.step({"a": g})
    np.testing.assert_array_equal(a.value, b.value)


def test_euclidean_parameters_get_plain_adam():
    w1 = Parameter("w", np.array([0.5, -1.0]), EUCLIDEAN)
    w2 = Parameter("w", np.array([0.5, -1.0]), EUCLIDEAN)
    ra, pa = RiemannianAdam({"w": w1}, lr=0.1), Adam({"w": w2}, lr=0.1)
    for g in ([1.0, 2.0], [-0.5, 0.1], [0.3, 0.3]):
        ra.step({"w": np.array(g)})
        pa.step({"w": np.array(g)})
    np.testing.assert_array_equal(w1.value, w2.value)


def test_adam_first_step_moves_by_learning_rate():
    w = Parameter("w", np.array([1.0, -1.0]))
    Adam({"w": w}, lr=0.1).step({"w": np.array([3.0, -0.02])})
    np.testing.assert_allclose(w.value, [0.9, -0.9], rtol=1e-6)


def test_clip_grad_norm_scales_jointly():
    grads = {"a": np.array([3.0]), "b": np.array([4.0])}
    clipped, total = clip_grad_norm(grads, 1.0)
    assert total == 5.0
    np.testing.assert_allclose(clipped["a"], [0.6])
    np.testing.assert_allclose(clipped["b"], [0.8])
    same, _ = clip_grad_norm(grads, 10.0)
    np.testing.assert_array_equal(same["a"], grads["a"])


def test_clipping_happens_before_riemannian_scaling():
    x = Parameter("x", np.zeros((1, 2)), POINCARE)
    opt = RiemannianAdam({"x": x}, betas=(0.0, 0.999), max_grad_norm=1.0)
    opt.step({"x": np.array([[30.0, 40.0]])})
    assert opt.last_grad_norm == 50.0
    np.testing.assert_allclose(
        opt.state.m["x"] * geo.conformal_factor(x.value) / 2.0, [[0.6 / 4, 0.8 / 4]], rtol=1e-12
    )


@pytest.mark.parametrize("bad", [np.nan, np.inf, -np.inf])
def test_non_finite_gradient_aborts_step(bad):
    x = Parameter("x", np.array([[0.1, 0.2]]), POINCARE)
    opt = RiemannianAdam({"x": x})
    with pytest.raises(NumericError, match="'x'"):
        opt.step({"x": np.array([[bad, 0.0]])})
    np.testing.assert_array_equal(x.value, [[0.1, 0.2]])
    assert opt.state.step == 0


def test_gradient_shape_mismatch_rejected():
    x = Parameter("x", np.zeros((1, 2)), POINCARE)
    with pytest.raises(ValueError):
        RiemannianAdam({"x": x}).step({"x": np.zeros(3)})


def test_invalid_hyperparameters_rejected():
    x = Parameter("x", np.zeros(2))
    with pytest.raises(ValueError):
        Adam({"x": x}, lr=0.0)
    with pytest.raises(ValueError):
        Adam({"x": x}, betas=(1.0, 0.9))


def test_state_dict_round_trip():
    x = Parameter("x", np.array([[0.1, 0.2]]), POINCARE)
    opt = RiemannianAdam({"x": x})
    opt.step({"x": np.array([[1.0, -1.0]])})
    clone = RiemannianAdam({"x": Parameter("x", x.value.copy(), POINCARE)})
    clone.load_state(opt.state_dict(), opt.state.m, opt.state.v)
    assert clone.state.step == 1
    np.testing.assert_array_equal(clone.state.v["x"], opt.state.v["x"])


def test_training_a_ball_parameter_on_a_loss():
    x = Parameter("x", np.array([[0.05, 0.0]]), POINCARE)
    goal = np.array([[0.0, 0.4]])
    opt = RiemannianAdam({"x": x}, lr=0.05)
    for _ in range(300):
        with ad.Tape():
            g = ad.backward(geo.distance(ad.use(x), goal) ** 2)
        opt.step(g)
    assert float(geo.distance(x.value, goal)[0]) < 1e-2
