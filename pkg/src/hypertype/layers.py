"""Hyperbolic layers, their Euclidean counterparts, and manifold bridges.

Each layer is a small dataclass holding :class:`~hypertype.autodiff.Parameter`
objects plus a ``space`` tag. The ``hyp_*`` / ``eu_*`` functions implement the
two geometries; the unprefixed dispatchers pick one from the tag.

Mobius addition is not associative, so every chain ``a (+) b (+) c`` is
evaluated left to right: ``(a (+) b) (+) c``.

Shapes: sequences are ``(batch, length, dim)`` with a boolean ``mask`` of
shape ``(batch, length)``; vectors are ``(batch, dim)``.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from . import geometry as geo
from .autodiff import Parameter, use


class SpaceTag(str, Enum):
    HYPERBOLIC = "hyperbolic"
    EUCLIDEAN = "euclidean"

    @classmethod
    def parse(cls, value) -> "SpaceTag":
        if isinstance(value, cls):
            return value
        try:
            return cls(str(value).lower())
        except ValueError:
            raise ValueError(f"space must be 'hyperbolic' or 'euclidean', got {value!r}") from None


HYP = SpaceTag.HYPERBOLIC
EU = SpaceTag.EUCLIDEAN


def _identity(x):
    return x


ACTIVATIONS: dict[str, Callable] = {"identity": _identity, "tanh": ad.tanh}


def _activation(name):
    if callable(name):
        return name
    try:
        return ACTIVATIONS[name or "identity"]
    except KeyError:
        raise ValueError(f"unknown activation {name!r}") from None


def _is_identity(name):
    return name is None or name == "identity" or name is _identity


# ------------------------------------------------------------------ layers


@dataclass
class FeedForward:
    """y = act(M x + b); hyperbolic: act^(x)(M (x) x (+) b)."""

    weight: Parameter
    bias: Parameter
    activation: str = "identity"
    space: SpaceTag = HYP


@dataclass
class RNNCell:
    """h' = act(W h + U c + b) in either geometry."""

    W: Parameter
    U: Parameter
    bias: Parameter
    activation: str = "identity"
    space: SpaceTag = HYP


@dataclass
class GRUCell:
    W_r: Parameter
    U_r: Parameter
    b_r: Parameter
    W_z: Parameter
    U_z: Parameter
    b_z: Parameter
    W: Parameter
    U: Parameter
    bias: Parameter
    space: SpaceTag = HYP


@dataclass
class Concat:
    """Generalised concatenation: M_1 x_1 (+) ... (+) M_j x_j (+) b."""

    weights: Sequence[Parameter]
    bias: Parameter
    space: SpaceTag = HYP


@dataclass
class DistanceAttention:
    W_q: Parameter
    b_q: Parameter
    W_k: Parameter
    b_k: Parameter
    beta: Parameter
    positions: Parameter
    space: SpaceTag = HYP


@dataclass
class MLR:
    """Per-class hyperplanes: offsets ``p`` (K, m) and normals ``a`` (K, m).

    In the hyperbolic case ``a`` holds the origin-tangent normals a'_k; the
    normal at p_k is their parallel transport.
    """

    p: Parameter
    a: Parameter
    space: SpaceTag = HYP


# ----------------------------------------------------------- bridge maps


@geo.counted
def to_euclidean(x):
    return geo.log0(x)


@geo.counted
def to_hyperbolic(v):
    return geo.exp0(v)


def convert(x, src: SpaceTag, dst: SpaceTag):
    if src == dst:
        return x
    return to_hyperbolic(x) if dst == HYP else to_euclidean(x)


# ------------------------------------------------------------- hyperbolic


def hyp_ffnn_forward(layer: FeedForward, x):
    y = geo.mobius_add(geo.mobius_matvec(use(layer.weight), x), use(layer.bias))
    if _is_identity(layer.activation):
        return y
    return geo.mobius_pointwise(_activation(layer.activation), y)


def hyp_rnn_step(cell: RNNCell, h, c):
    y = geo.mobius_add(geo.mobius_matvec(use(cell.W), h), geo.mobius_matvec(use(cell.U), c))
    y = geo.mobius_add(y, use(cell.bias))
    if _is_identity(cell.activation):
        return y
    return geo.mobius_pointwise(_activation(cell.activation), y)


def hyp_gru_input_terms(cell: GRUCell, x):
    """U^r (x) x, U^z (x) x and U (x) x; independent of the state, so they can be
    computed for a whole sequence at once."""
    return (
        geo.mobius_matvec(use(cell.U_r), x),
        geo.mobius_matvec(use(cell.U_z), x),
        geo.mobius_matvec(use(cell.U), x),
    )


def hyp_gru_gates(cell: GRUCell, h, terms):
    ux_r, ux_z, ux = terms
    r = ad.sigmoid(
        geo.log0(geo.mobius_add(geo.mobius_add(geo.mobius_matvec(use(cell.W_r), h), ux_r), use(cell.b_r)))
    )
    z = ad.sigmoid(
        geo.log0(geo.mobius_add(geo.mobius_add(geo.mobius_matvec(use(cell.W_z), h), ux_z), use(cell.b_z)))
    )
    pre = geo.mobius_add(geo.mobius_matvec_scaled(use(cell.W), r, h), ux)
    h_tilde = geo.mobius_pointwise(ad.tanh, geo.mobius_add(pre, use(cell.bias)))
    return r, z, h_tilde


def hyp_gru_update(h, h_tilde, z):
    """h (+) diag(z) (x) (-h (+) h~)."""
    return geo.mobius_add(h, geo.mobius_diag_mul(z, geo.mobius_add(-h, h_tilde)))


def hyp_gru_step(cell: GRUCell, h, x, terms=None):
    if terms is None:
        terms = hyp_gru_input_terms(cell, x)
    _, z, h_tilde = hyp_gru_gates(cell, h, terms)
    return hyp_gru_update(h, h_tilde, z)


def hyp_concat(layer: Concat, xs: Sequence):
    if len(xs) != len(layer.weights):
        raise ValueError(f"concat expects {len(layer.weights)} inputs, got {len(xs)}")
    out = None
    for weight, x in zip(layer.weights, xs):
        term = geo.mobius_matvec(use(weight), x)
        out = term if out is None else geo.mobius_add(out, term)
    return geo.mobius_add(out, use(layer.bias))


def _masked_softmax(scores, mask):
    if mask is None:
        mask = np.ones(np.shape(ad.value_of(scores)), dtype=bool)
    raw = np.where(mask, ad.value_of(scores), -np.inf)
    shift = np.max(raw, axis=-1, keepdims=True)
    shift = np.where(np.isfinite(shift), shift, 0.0)
    e = ad.exp(ad.where(mask, scores - shift, 0.0)) * mask
    return e / ad.sum(e, axis=-1, keepdims=True)


def _position_rows(att: DistanceAttention, positions, length):
    table = use(att.positions)
    n_rows = np.shape(ad.value_of(table))[0]
    if positions is None:
        if length > n_rows:
            raise ValueError(f"sequence of length {length} exceeds {n_rows} position embeddings")
        positions = np.arange(length)
    positions = np.asarray(positions)
    if positions.size and (positions.min() < 0 or positions.max() >= n_rows):
        raise ValueError("position index outside the position table")
    return ad.take(table, positions)


def hyp_attention_weights(att: DistanceAttention, states, positions=None, mask=None):
    """Position-enriched states r_i and their softmax(-beta d(q_i, k_i)) weights."""
    length = np.shape(ad.value_of(states))[-2]
    if length == 0:
        raise ValueError("attention over an empty sequence")
    r = geo.mobius_add(states, _position_rows(att, positions, length))
    q = geo.mobius_add(geo.mobius_matvec(use(att.W_q), r), use(att.b_q))
    k = geo.mobius_add(geo.mobius_matvec(use(att.W_k), r), use(att.b_k))
    scores = -use(att.beta) * geo.distance(q, k)
    return r, _masked_softmax(scores, mask)


def distance_attention(att: DistanceAttention, states, positions=None, mask=None):
    r, alpha = hyp_attention_weights(att, states, positions, mask)
    return geo.mobius_midpoint(r, alpha)


def hyp_mean(states, mask=None):
    """Uniform-weight Mobius midpoint over the unmasked states."""
    shape = np.shape(ad.value_of(states))[:-1]
    w = np.ones(shape) if mask is None else np.asarray(mask, dtype=np.float64)
    return geo.mobius_midpoint(states, w)


def hyp_mlr_logits(clf: MLR, x):
    p = use(clf.p)
    a = use(clf.a)
    x = ad.expand_dims(x, -2)  # (..., 1, m) against (K, m)
    diff = geo.mobius_add(-p, x)
    a_norm = geo.norm(a)[..., 0]
    inner = ad.sum(diff * a, axis=-1)
    den = (1.0 - ad.sum(diff * diff, axis=-1)) * a_norm
    return 2.0 * a_norm * ad.arcsinh(2.0 * inner / den)


# -------------------------------------------------------------- euclidean


def _affine(x, weight):
    return x @ ad.transpose(weight)


def eu_ffnn_forward(layer: FeedForward, x):
    return _activation(layer.activation)(_affine(x, use(layer.weight)) + use(layer.bias))


def eu_rnn_step(cell: RNNCell, h, c):
    return _activation(cell.activation)(_affine(h, use(cell.W)) + _affine(c, use(cell.U)) + use(cell.bias))


def eu_gru_input_terms(cell: GRUCell, x):
    return _affine(x, use(cell.U_r)), _affine(x, use(cell.U_z)), _affine(x, use(cell.U))


def eu_gru_step(cell: GRUCell, h, x, terms=None):
    ux_r, ux_z, ux = terms if terms is not None else eu_gru_input_terms(cell, x)
    r = ad.sigmoid(_affine(h, use(cell.W_r)) + ux_r + use(cell.b_r))
    z = ad.sigmoid(_affine(h, use(cell.W_z)) + ux_z + use(cell.b_z))
    h_tilde = ad.tanh(_affine(r * h, use(cell.W)) + ux + use(cell.bias))
    return h + z * (h_tilde - h)


def eu_concat(layer: Concat, xs: Sequence):
    if len(xs) != len(layer.weights):
        raise ValueError(f"concat expects {len(layer.weights)} inputs, got {len(xs)}")
    out = None
    for weight, x in zip(layer.weights, xs):
        term = _affine(x, use(weight))
        out = term if out is None else out + term
    return out + use(layer.bias)


def eu_attention_weights(att: DistanceAttention, states, positions=None, mask=None):
    length = np.shape(ad.value_of(states))[-2]
    if length == 0:
        raise ValueError("attention over an empty sequence")
    r = states + _position_rows(att, positions, length)
    q = _affine(r, use(att.W_q)) + use(att.b_q)
    k = _affine(r, use(att.W_k)) + use(att.b_k)
    diff = q - k
    dist = ad.sqrt(ad.clip(ad.sum(diff * diff, axis=-1), geo.EPS_ZERO * geo.EPS_ZERO, None))
    return r, _masked_softmax(-use(att.beta) * dist, mask)


def eu_attention(att: DistanceAttention, states, positions=None, mask=None):
    r, alpha = eu_attention_weights(att, states, positions, mask)
    return ad.sum(ad.expand_dims(alpha, -1) * r, axis=-2)


def eu_mean(states, mask=None):
    shape = np.shape(ad.value_of(states))[:-1]
    w = np.ones(shape) if mask is None else np.asarray(mask, dtype=np.float64)
    w = w / w.sum(axis=-1, keepdims=True)
    return ad.sum(states * w[..., None], axis=-2)


def eu_mlr_logits(clf: MLR, x):
    diff = ad.expand_dims(x, -2) - use(clf.p)
    return 4.0 * ad.sum(diff * use(clf.a), axis=-1)


# ------------------------------------------------------------- dispatchers


def ffnn_forward(layer: FeedForward, x):
    return hyp_ffnn_forward(layer, x) if layer.space == HYP else eu_ffnn_forward(layer, x)


def rnn_step(cell: RNNCell, h, c):
    return hyp_rnn_step(cell, h, c) if cell.space == HYP else eu_rnn_step(cell, h, c)


def gru_step(cell: GRUCell, h, x, terms=None):
    return hyp_gru_step(cell, h, x, terms) if cell.space == HYP else eu_gru_step(cell, h, x, terms)


def concat(layer: Concat, xs: Sequence):
    return hyp_concat(layer, xs) if layer.space == HYP else eu_concat(layer, xs)


def attention(att: DistanceAttention, states, positions=None, mask=None):
    if att.space == HYP:
        return distance_attention(att, states, positions, mask)
    return eu_attention(att, states, positions, mask)


def attention_weights(att: DistanceAttention, states, positions=None, mask=None):
    if att.space == HYP:
        return hyp_attention_weights(att, states, positions, mask)
    return eu_attention_weights(att, states, positions, mask)


def mean(states, space: SpaceTag, mask=None):
    return hyp_mean(states, mask) if space == HYP else eu_mean(states, mask)


def mlr_logits(clf: MLR, x):
    return hyp_mlr_logits(clf, x) if clf.space == HYP else eu_mlr_logits(clf, x)


def multilabel_predict(logits) -> set[int]:
    """Labels whose sigmoid probability exceeds 0.5, i.e. positive logits."""
    logits = np.asarray(ad.value_of(logits))
    if logits.ndim != 1:
        raise ValueError("multilabel_predict expects a single logit vector")
    return {int(k) for k in np.flatnonzero(logits > 0)}


# --------------------------------------------------------------- sequences


def _origin(batch_shape, dim):
    return np.zeros(tuple(batch_shape) + (dim,))


def _select(mask_t, new, old):
    if mask_t is None:
        return new
    return ad.where(mask_t[..., None], new, old)


def run_rnn(cell: RNNCell, inputs, mask=None):
    """States h_1..h_L of an RNN started at the origin; padded steps keep the state."""
    shape = np.shape(ad.value_of(inputs))
    dim = np.shape(cell.W.value)[0]
    h = _origin(shape[:-2], dim)
    states = []
    for t in range(shape[-2]):
        new = rnn_step(cell, h, inputs[..., t, :])
        h = _select(None if mask is None else mask[..., t], new, h)
        states.append(h)
    return ad.stack(states, axis=-2)


def run_gru(cell: GRUCell, inputs, mask=None, reverse=False):
    shape = np.shape(ad.value_of(inputs))
    dim = np.shape(cell.W.value)[0]
    length = shape[-2]
    if cell.space == HYP:
        terms = hyp_gru_input_terms(cell, inputs)
    else:
        terms = eu_gru_input_terms(cell, inputs)
    h = _origin(shape[:-2], dim)
    states = [None] * length
    order = range(length - 1, -1, -1) if reverse else range(length)
    for t in order:
        step_terms = tuple(term[..., t, :] for term in terms)
        new = gru_step(cell, h, None, step_terms)
        h = _select(None if mask is None else mask[..., t], new, h)
        states[t] = h
    return ad.stack(states, axis=-2)


def bidirectional_gru(forward: GRUCell, backward: GRUCell, merge: Concat, inputs, mask=None):
    """Per-token concat(forward state, backward state)."""
    if np.shape(ad.value_of(inputs))[-2] == 0:
        raise ValueError("bidirectional_gru over an empty sequence")
    fwd = run_gru(forward, inputs, mask)
    bwd = run_gru(backward, inputs, mask, reverse=True)
    return concat(merge, [fwd, bwd])


# ----------------------------------------------------------------- dropout


def dropout(x, rate: float, rng: np.random.Generator | None, space: SpaceTag, whole_vectors=False):
    """Inverted dropout; hyperbolic inputs are dropped in the origin tangent space.

    ``whole_vectors`` drops entire vectors (last axis) instead of coordinates.
    """
    if rng is None or rate <= 0.0:
        return x
    shape = np.shape(ad.value_of(x))
    mask_shape = shape[:-1] + (1,) if whole_vectors else shape
    keep = (rng.random(mask_shape) >= rate) / (1.0 - rate)
    if space == HYP:
        return geo.exp0(geo.log0(x) * keep)
    return x * keep
