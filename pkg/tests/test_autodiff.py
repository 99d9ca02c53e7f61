from __future__ import annotations

import zlib

import numpy as np
import pytest

from hypertype import autodiff as ad
from hypertype import geometry as geo
from hypertype import layers as L
from hypertype.autodiff import POINCARE, Parameter, use
from conftest import ball_points


def grads_of(f, *params):
    with ad.Tape():
        loss = f()
        return ad.backward(loss)


def numeric_grad(f, p: Parameter, h=1e-6):
    """Plain central differences in float64, independent of finite_diff_check."""
    out = np.zeros_like(p.value)
    base = p.value.copy()
    for idx in np.ndindex(base.shape):
        for sign in (1, -1):
            p.value = base.copy()
            p.value[idx] += sign * h
            out[idx] += sign * float(f())
        out[idx] /= 2 * h
    p.value = base
    return out


def test_sum_gradient_is_ones():
    x = Parameter("x", np.array([1.0, -2.0, 3.0]))
    g = grads_of(lambda: ad.sum(use(x)))
    np.testing.assert_array_equal(g["x"], [1.0, 1.0, 1.0])


def test_unused_parameter_has_no_gradient():
    x = Parameter("x", np.array([0.5]))
    p = Parameter("p", np.array([0.3]))
    with ad.Tape() as tape:
        tape.watch(p)
        g = ad.backward(ad.sum(use(x) * 2.0))
    assert np.all(g.get("p", np.zeros(1)) == 0)


def test_squared_distance_against_central_differences(rng):
    y0 = np.array([0.1, -0.4, 0.2])
    x = Parameter("x", ball_points(rng, 1, 3, 0.8, 0.2)[0], POINCARE)
    f = lambda: geo.distance(use(x), y0) ** 2
    g = grads_of(f)["x"]
    num = numeric_grad(f, x)
    rel = np.max(np.abs(g - num) / np.maximum(1e-12, np.abs(g) + np.abs(num)))
    assert rel < 1e-6


def test_finite_diff_check_quadratic():
    A = np.array([[2.0, 0.3], [0.3, 1.0]])
    x = Parameter("x", np.array([0.7, -1.2]))
    f = lambda: ad.sum(use(x) * (use(x) @ A))
    assert ad.finite_diff_check(f, [x], step=1e-6) < 1e-9


def test_finite_diff_check_distance_at_half_norm():
    x = Parameter("x", np.array([0.3, 0.4]), POINCARE)
    y = np.array([-0.2, 0.1])
    assert ad.finite_diff_check(lambda: geo.distance(use(x), y), [x]) < 1e-6


def test_finite_diff_check_mlr_logit(rng):
    p = Parameter("p", ball_points(rng, 3, 4, 0.8), POINCARE)
    a = Parameter("a", rng.normal(size=(3, 4)))
    x = ball_points(rng, 2, 4, 0.8)
    mlr = L.MLR(p, a, L.HYP)
    assert ad.finite_diff_check(lambda: ad.sum(L.mlr_logits(mlr, x) * np.arange(1, 4)), [p, a]) < 1e-6


def test_finite_diff_check_flags_wrong_gradient():
    x = Parameter("x", np.array([0.5, 0.2]))
    f = lambda: ad.sum(ad.tanh(use(x)))
    grads = grads_of(f)
    grads["x"] = grads["x"] * 1.01
    assert ad.finite_diff_check(f, [x], grads=grads) > 1e-3


GEOMETRY_OPS = {
    "mobius_add": (2, lambda a, b: geo.mobius_add(a, b)),
    "scalar_mul": (1, lambda a: geo.mobius_scalar_mul(1.7, a)),
    "matvec": (1, lambda a: geo.mobius_matvec(np.array([[0.5, -1.0, 0.2], [1.1, 0.3, -0.4]]), a)),
    "pointwise": (1, lambda a: geo.mobius_pointwise(ad.tanh, a)),
    "exp0": (1, lambda a: geo.exp0(a)),
    "log0": (1, lambda a: geo.log0(a)),
    "exp_x": (2, lambda a, b: geo.exp_x(a, b)),
    "log_x": (2, lambda a, b: geo.log_x(a, b)),
    "distance": (2, lambda a, b: geo.distance(a, b)),
    "conformal": (1, lambda a: geo.conformal_factor(a)),
    "transport": (2, lambda a, b: geo.parallel_transport_from_origin(a, b)),
    "diag_mul": (2, lambda a, b: geo.mobius_diag_mul(a, b)),
    "midpoint": (1, lambda a: geo.mobius_midpoint(ad.stack([a, a * 0.5, -a * 0.3], axis=-2), np.array([[0.2, 0.5, 0.3], [0.6, 0.1, 0.3]]))),
}


@pytest.mark.parametrize("name", sorted(GEOMETRY_OPS))
def test_geometry_op_gradients(name):
    arity, op = GEOMETRY_OPS[name]
    rng = np.random.default_rng(zlib.crc32(name.encode()))
    for _ in range(10):
        params = [Parameter(f"x{i}", ball_points(rng, 2, 3, 0.9, 0.05), POINCARE) for i in range(arity)]
        w = rng.normal(size=np.shape(op(*[p.value for p in params])))
        f = lambda: ad.sum(op(*[use(p) for p in params]) * w)
        assert ad.finite_diff_check(f, params) < 1e-6, name


def test_safe_tanh_gradient_zero_when_clipped():
    x = Parameter("x", np.array([20.0, -30.0, 0.5]))
    g = grads_of(lambda: ad.sum(geo.safe_tanh(use(x))))["x"]
    assert g[0] == 0.0 and g[1] == 0.0
    assert g[2] == pytest.approx(1 - np.tanh(0.5) ** 2)


def test_safe_atanh_gradient_finite_everywhere():
    x = Parameter("x", np.array([1.0, -1.0, 1.5, 0.3]))
    g = grads_of(lambda: ad.sum(geo.safe_atanh(use(x))))["x"]
    assert np.all(np.isfinite(g))
    assert g[2] == 0.0


def test_backward_replay_is_bit_identical(rng):
    x = Parameter("x", ball_points(rng, 4, 5), POINCARE)
    M = rng.normal(size=(3, 5))
    with ad.Tape():
        loss = ad.sum(geo.mobius_matvec(M, use(x)) ** 2)
        g1 = ad.backward(loss)
        g2 = ad.backward(loss)
    np.testing.assert_array_equal(g1["x"], g2["x"])


def test_broadcast_gradients_are_summed():
    b = Parameter("b", np.array([1.0, 2.0]))
    x = np.ones((3, 2))
    g = grads_of(lambda: ad.sum(x * use(b)))["b"]
    np.testing.assert_array_equal(g, [3.0, 3.0])


def test_non_finite_loss_is_reported():
    x = Parameter("x", np.array([0.0]))
    with ad.Tape(), np.errstate(divide="ignore"):
        loss = ad.sum(ad.log(use(x)))
        with pytest.raises(ad.NumericError):
            ad.backward(loss)


def test_tracked_values_refuse_numpy_ufuncs():
    x = Parameter("x", np.array([0.5]))
    with ad.Tape():
        t = use(x)
        with pytest.raises(TypeError):
            np.add(np.ones(1), t)


def test_use_outside_tape_returns_plain_array():
    x = Parameter("x", np.array([0.5]))
    assert isinstance(use(x), np.ndarray)


def test_custom_node_unbroadcasts():
    a = Parameter("a", np.array([[1.0, 2.0]]))
    def f():
        av = use(a)
        out = np.broadcast_to(a.value, (3, 2)) * 2.0
        return ad.sum(ad.custom("double", out, (av,), lambda g: (2.0 * g,)))
    np.testing.assert_array_equal(grads_of(f)["a"], [[6.0, 6.0]])
