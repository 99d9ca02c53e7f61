"""Poincare-ball operations (curvature fixed at -1).

Points are arrays of shape ``(..., n)``; every function broadcasts over the
leading axes and accepts either numpy arrays or tape-tracked values, so the
same code serves inference and differentiation. Arithmetic is float64
(wider float types pass through unchanged).

Numerics follow the usual hyperbolic-network recipe: results of Mobius
operations are projected into the ball of radius ``1 - 1e-5``, norms are
floored at ``1e-15`` before dividing by them, tanh arguments are clipped to
``[-15, 15]`` and artanh arguments to ``[-1 + 1e-15, 1 - 1e-15]``.
"""

from __future__ import annotations

import threading
from collections import Counter
from contextlib import contextmanager
from dataclasses import dataclass
from functools import wraps

import numpy as np

from . import autodiff as ad

BallPoint = np.ndarray
TangentVector = np.ndarray


class InvalidValueError(ValueError):
    pass


@dataclass(frozen=True)
class StabilityConfig:
    eps_boundary: float = 1e-5
    eps_zero: float = 1e-15
    tanh_clip: float = 15.0
    atanh_clip: float = 1.0 - 1e-15

    def __post_init__(self):
        if not 0 < self.eps_zero < self.eps_boundary < 1:
            raise ValueError("need 0 < eps_zero < eps_boundary < 1")
        if self.tanh_clip <= 0:
            raise ValueError("tanh_clip must be positive")
        if not 0 < self.atanh_clip < 1:
            raise ValueError("atanh_clip must lie in (0, 1)")

    @property
    def max_norm(self) -> float:
        return 1.0 - self.eps_boundary


STABILITY = StabilityConfig()
EPS_BOUNDARY = STABILITY.eps_boundary
EPS_ZERO = STABILITY.eps_zero
MAX_NORM = STABILITY.max_norm


# Optional per-thread call counting; used to check which code paths touch the
# hyperbolic kernel.
_counting = threading.local()


@contextmanager
def count_kernel_calls():
    """Count kernel entry points invoked in this thread inside the block."""
    previous = getattr(_counting, "counter", None)
    counter = Counter()
    _counting.counter = counter
    try:
        yield counter
    finally:
        _counting.counter = previous


def counted(fn):
    name = fn.__name__

    @wraps(fn)
    def wrapper(*args, **kwargs):
        counter = getattr(_counting, "counter", None)
        if counter is not None:
            counter[name] += 1
        return fn(*args, **kwargs)

    return wrapper


# ------------------------------------------------------------------- helpers


def _dot(x, y):
    xv, yv = ad.value_of(x), ad.value_of(y)
    return ad.custom("dot", np.sum(xv * yv, axis=-1, keepdims=True), (x, y), lambda g: (g * yv, g * xv))


def _sqnorm(x):
    xv = ad.value_of(x)
    return ad.custom("sqnorm", np.sum(xv * xv, axis=-1, keepdims=True), (x,), lambda g: (2.0 * g * xv,))


def _norm(x):
    xv = ad.value_of(x)
    sq = np.sum(xv * xv, axis=-1, keepdims=True)
    floor = EPS_ZERO * EPS_ZERO
    n = np.sqrt(np.maximum(sq, floor))
    return ad.custom("norm", n, (x,), lambda g: (np.where(sq >= floor, g / n, 0.0) * xv,))


def _sqrt0(t):
    """sqrt with derivative 0 (instead of infinity) below ``EPS_ZERO**2``."""
    tv = ad.value_of(t)
    r = np.sqrt(np.maximum(tv, 0.0))
    live = tv > EPS_ZERO * EPS_ZERO
    return ad.custom("sqrt0", r, (t,), lambda g: (np.where(live, g / (2.0 * np.where(live, r, 1.0)), 0.0),))


def _as_float(x):
    x = np.asarray(x)
    return x if np.issubdtype(x.dtype, np.floating) else x.astype(np.float64)


def _check_dims(x, y):
    if np.shape(ad.value_of(x))[-1:] != np.shape(ad.value_of(y))[-1:]:
        raise ValueError(
            f"dimension mismatch: {np.shape(ad.value_of(x))} vs {np.shape(ad.value_of(y))}"
        )


@counted
def safe_tanh(t):
    return ad.tanh(ad.clip(t, -STABILITY.tanh_clip, STABILITY.tanh_clip))


@counted
def safe_atanh(t):
    return ad.arctanh(ad.clip(t, -STABILITY.atanh_clip, STABILITY.atanh_clip))


def norm(x):
    """Euclidean norm over the last axis (keepdims), floored at ``EPS_ZERO``."""
    return _norm(x)


# ------------------------------------------------------------- basic kernel


@counted
def project_to_ball(v):
    raw = ad.value_of(v)
    if not np.all(np.isfinite(raw)):
        raise InvalidValueError("cannot project a non-finite vector")
    outside = np.sum(raw * raw, axis=-1, keepdims=True) > MAX_NORM * MAX_NORM
    if not np.any(outside):
        return v
    n = _norm(v)
    outside = ad.value_of(n) > MAX_NORM
    return ad.where(outside, v / n * MAX_NORM, v)


@counted
def conformal_factor(x):
    """lambda_x = 2 / (1 - |x|^2), shape ``(..., 1)``."""
    return 2.0 / ad.clip(1.0 - _sqnorm(x), EPS_ZERO, None)


@counted
def lorentz_factor(x):
    """gamma(x) = 1 / sqrt(1 - |x|^2), shape ``(..., 1)``."""
    return 1.0 / ad.sqrt(ad.clip(1.0 - _sqnorm(x), EPS_ZERO, None))


@counted
def mobius_add(x, y):
    _check_dims(x, y)
    xv, yv = ad.value_of(x), ad.value_of(y)
    xy = np.sum(xv * yv, axis=-1, keepdims=True)
    x2 = np.sum(xv * xv, axis=-1, keepdims=True)
    y2 = np.sum(yv * yv, axis=-1, keepdims=True)
    a = 1.0 + 2.0 * xy + y2
    b = 1.0 - x2
    den = 1.0 + 2.0 * xy + x2 * y2
    d = np.maximum(den, EPS_ZERO)
    out = (a * xv + b * yv) / d

    def vjp(g):
        gn = g / d
        ga = np.sum(gn * xv, axis=-1, keepdims=True)
        gb = np.sum(gn * yv, axis=-1, keepdims=True)
        gd = np.where(den >= EPS_ZERO, -np.sum(g * out, axis=-1, keepdims=True) / d, 0.0)
        gx = a * gn + 2.0 * ga * yv - 2.0 * gb * xv + gd * (2.0 * yv + 2.0 * y2 * xv)
        gy = b * gn + 2.0 * ga * (xv + yv) + gd * (2.0 * xv + 2.0 * x2 * yv)
        return gx, gy

    return project_to_ball(ad.custom("mobius_add", out, (x, y), vjp))


@counted
def mobius_scalar_mul(r, x):
    xn = _norm(x)
    return project_to_ball(safe_tanh(r * safe_atanh(xn)) * (x / xn))


@counted
def mobius_matvec_scaled(m, d, x):
    """(M diag(d)) applied to ``x``; ``d`` may vary along the batch axes."""
    return _matvec_from_image((d * x) @ ad.transpose(m), x)


@counted
def mobius_diag_mul(z, x):
    """diag(z) applied to ``x`` through the origin tangent space."""
    return exp0(z * log0(x))


def _matvec_from_image(mx, x):
    # Closed form of M (x) x given mx = M x. With both norms floored, a zero
    # image or a zero input yields exactly the origin, and the derivative
    # there is the first-order limit (M itself at x = 0).
    xn = _norm(x)
    mxn = _norm(mx)
    return project_to_ball(safe_tanh(mxn / xn * safe_atanh(xn)) * (mx / mxn))


@counted
def mobius_matvec(m, x):
    """Mobius matrix-vector product for ``m`` of shape (out, in)."""
    m_shape = np.shape(ad.value_of(m))
    if m_shape[-1] != np.shape(ad.value_of(x))[-1]:
        raise ValueError(f"matrix {m_shape} does not act on vectors of shape {np.shape(ad.value_of(x))}")
    return _matvec_from_image(x @ ad.transpose(m), x)


@counted
def exp0(v):
    vn = _norm(v)
    return project_to_ball(safe_tanh(vn) * (v / vn))


@counted
def log0(y):
    yn = _norm(y)
    return safe_atanh(yn) * (y / yn)


@counted
def mobius_pointwise(phi, x):
    return project_to_ball(exp0(phi(log0(x))))


@counted
def distance(x, y):
    """Geodesic distance.

    Evaluated as ``2 asinh(sqrt(delta))`` with
    ``delta = |x-y|^2 / ((1-|x|^2)(1-|y|^2))``, which equals
    ``acosh(1 + 2 delta)`` but keeps precision for nearby points.
    """
    _check_dims(x, y)
    diff = x - y
    den = ad.clip(1.0 - _sqnorm(x), EPS_ZERO, None) * ad.clip(1.0 - _sqnorm(y), EPS_ZERO, None)
    delta = _sqnorm(diff) / den
    d = 2.0 * ad.arcsinh(_sqrt0(delta))
    return d[..., 0]


@counted
def exp_x(x, v):
    vn = _norm(v)
    lam = conformal_factor(x)
    return mobius_add(x, safe_tanh(lam * vn / 2.0) * (v / vn))


@counted
def log_x(x, y):
    sub = mobius_add(-x, y)
    sn = _norm(sub)
    lam = conformal_factor(x)
    return (2.0 / lam) * safe_atanh(sn) * (sub / sn)


@counted
def parallel_transport_from_origin(x, v):
    """P_{0->x}(v) = (lambda_0 / lambda_x) v = (1 - |x|^2) v."""
    return (1.0 - _sqnorm(x)) * v


@counted
def mobius_midpoint(points, weights):
    """Weighted Mobius gyromidpoint of ``points`` (..., L, n) with weights (..., L).

    Weights need not be normalised; scaling all of them by a constant leaves
    the result unchanged.
    """
    w = weights
    if not isinstance(points, ad.Tracked):
        points = _as_float(points)
    if not isinstance(w, ad.Tracked):
        w = _as_float(w)
        if np.shape(w) != np.shape(ad.value_of(points))[:-1]:
            raise ValueError("weights must match the point axis")
        if np.any(w < 0):
            raise ValueError("midpoint weights must be nonnegative")
        if np.any(np.sum(w, axis=-1) <= 0):
            raise ValueError("midpoint needs at least one positive weight")
    gamma2 = 1.0 / ad.clip(1.0 - _sqnorm(points), EPS_ZERO, None)
    w = ad.expand_dims(w, -1)
    num = ad.sum(w * gamma2 * points, axis=-2)
    den = ad.sum(w * (gamma2 - 0.5), axis=-2)
    return mobius_scalar_mul(0.5, num / ad.clip(den, EPS_ZERO, None))


def is_ball_point(x, eps_boundary: float = EPS_BOUNDARY) -> bool:
    x = np.asarray(ad.value_of(x))
    if not np.all(np.isfinite(x)):
        return False
    # tolerance for the rescaling in project_to_ball
    return bool(np.all(np.linalg.norm(x, axis=-1) <= 1.0 - eps_boundary + 1e-12))
