"""Adam and Riemannian Adam on the Poincare ball.

Riemannian update for a ball parameter ``x`` with ambient gradient ``g``:

    rgrad = g / lambda_x^2
    m     = b1 m + (1 - b1) rgrad
    v     = b2 v + (1 - b2) lambda_x^2 rgrad^2       (componentwise metric)
    x'    = exp_x(-lr * m_hat / (sqrt(v_hat) + eps))
    m     = m * lambda_x / lambda_x'                 (moment transport)
    x'    = project(x')

Euclidean parameters get the plain Adam update. Before anything else the
global gradient norm is clipped to ``max_grad_norm``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from . import geometry as geo
from .autodiff import POINCARE, NumericError, Parameter


@dataclass
class OptimizerState:
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def clip_grad_norm(grads: Mapping[str, np.ndarray], max_norm: float | None) -> tuple[dict, float]:
    """Scale all gradients jointly so their global L2 norm is at most ``max_norm``."""
    total = float(np.sqrt(sum(float(np.sum(g * g)) for g in grads.values())))
    if max_norm is None or total <= max_norm or total == 0.0:
        return dict(grads), total
    scale = max_norm / total
    return {k: g * scale for k, g in grads.items()}, total


class Adam:
    """Adam treating every parameter as Euclidean."""

    def __init__(
        self,
        params: Mapping[str, Parameter],
        lr: float = 0.0005,
        betas: tuple[float, float] = (0.9, 0.999),
        eps: float = 1e-8,
        weight_decay: float = 0.0,
        max_grad_norm: float | None = 5.0,
    ):
        if lr <= 0:
            raise ValueError("learning rate must be positive")
        if not (0 <= betas[0] < 1 and 0 <= betas[1] < 1):
            raise ValueError("betas must lie in [0, 1)")
        self.params = dict(params)
        self.lr = lr
        self.betas = tuple(betas)
        self.eps = eps
        self.weight_decay = weight_decay
        self.max_grad_norm = max_grad_norm
        self.state = OptimizerState()
        for name, p in self.params.items():
            self.state.m[name] = np.zeros_like(p.value)
            self.state.v[name] = np.zeros_like(p.value)
        self.last_grad_norm = 0.0

    def _check(self, grads):
        unknown = sorted(set(grads) - set(self.params))
        if unknown:
            raise KeyError(f"gradients for unknown parameters {unknown}")
        for name in self.params:
            if name not in grads:
                continue
            g = grads[name]
            if np.shape(g) != self.params[name].value.shape:
                raise ValueError(f"gradient for {name!r} has shape {np.shape(g)}, expected {self.params[name].value.shape}")
            if not np.all(np.isfinite(g)):
                bad = int(np.sum(~np.isfinite(g)))
                raise NumericError(f"non-finite gradient for parameter {name!r} ({bad} entries); step aborted")

    def step(self, grads: Mapping[str, np.ndarray]):
        """One update; parameters missing from ``grads`` get a zero gradient."""
        self._check(grads)
        full = {k: grads[k] if k in grads else np.zeros_like(p.value) for k, p in self.params.items()}
        grads, self.last_grad_norm = clip_grad_norm(full, self.max_grad_norm)
        self.state.step += 1
        t = self.state.step
        b1, b2 = self.betas
        c1, c2 = 1.0 - b1**t, 1.0 - b2**t
        for name, p in self.params.items():
            g = grads[name]
            if self.weight_decay:
                g = g + self.weight_decay * p.value
            if p.manifold == POINCARE and self.riemannian:
                p.value = self._ball_update(name, p.value, g, b1, b2, c1, c2)
            else:
                m = self.state.m[name] = b1 * self.state.m[name] + (1 - b1) * g
                v = self.state.v[name] = b2 * self.state.v[name] + (1 - b2) * g * g
                p.value = p.value - self.lr * ((m / c1) / (np.sqrt(v / c2) + self.eps))

    riemannian = False

    def _ball_update(self, name, x, g, b1, b2, c1, c2):
        raise NotImplementedError

    def state_dict(self) -> dict:
        return {
            "step": self.state.step,
            "lr": self.lr,
            "betas": list(self.betas),
            "eps": self.eps,
            "weight_decay": self.weight_decay,
            "max_grad_norm": self.max_grad_norm,
        }

    def load_state(self, meta: Mapping, m: Mapping[str, np.ndarray], v: Mapping[str, np.ndarray]):
        self.state.step = int(meta["step"])
        for name, p in self.params.items():
            if m[name].shape != p.value.shape or v[name].shape != p.value.shape:
                raise ValueError(f"optimizer moments for {name!r} do not match the parameter shape")
            self.state.m[name] = np.array(m[name], dtype=np.float64)
            self.state.v[name] = np.array(v[name], dtype=np.float64)


class RiemannianAdam(Adam):
    """Adam with Riemannian updates for parameters tagged ``poincare``.

    The geometric pieces are separate methods so they can be swapped out:
    replacing them with Euclidean stand-ins (scale 1, additive retraction,
    identity transport and projection) yields exactly :class:`Adam`.
    """

    riemannian = True

    def metric_scale(self, x):
        """lambda_x^2, shape ``(..., 1)``."""
        return geo.conformal_factor(x) ** 2

    def retract(self, x, u):
        return geo.exp_x(x, u)

    def transport(self, x, new, m):
        return m * geo.conformal_factor(x) / geo.conformal_factor(new)

    def project(self, x):
        return geo.project_to_ball(x)

    def _ball_update(self, name, x, g, b1, b2, c1, c2):
        scale = self.metric_scale(x)
        rgrad = g / scale
        m = b1 * self.state.m[name] + (1 - b1) * rgrad
        v = self.state.v[name] = b2 * self.state.v[name] + (1 - b2) * scale * rgrad * rgrad
        direction = (m / c1) / (np.sqrt(v / c2) + self.eps)
        new = self.retract(x, -self.lr * direction)
        self.state.m[name] = self.transport(x, new, m)
        return self.project(new)


def make_optimizer(params: Mapping[str, Parameter], settings) -> RiemannianAdam:
    return RiemannianAdam(
        params,
        lr=settings.learning_rate,
        betas=(settings.adam_beta1, settings.adam_beta2),
        eps=settings.adam_eps,
        weight_decay=settings.weight_decay,
        max_grad_norm=settings.max_grad_norm,
    )


def geodesic_regression_toy(
    start: float = 0.01,
    target: float = 0.3,
    steps: int = 200,
    lr: float = 0.01,
    optimizer: type[Adam] | None = None,
) -> tuple[Parameter, list[float]]:
    """Minimise d(x, target)^2 for a 1-D ball parameter.

    Returns the parameter and the distance to the target after each step.
    """
    from . import autodiff as ad

    x = Parameter("x", np.array([start]), POINCARE)
    goal = np.array([target])
    opt = (optimizer or RiemannianAdam)({"x": x}, lr=lr)
    history = []
    for _ in range(steps):
        with ad.Tape():
            loss = geo.distance(ad.use(x), goal) ** 2
            grads = ad.backward(loss)
        opt.step(grads)
        history.append(float(geo.distance(x.value, goal)))
    return x, history
