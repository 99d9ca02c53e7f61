"""Finite-difference verification of every layer and of the full training loss."""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import autodiff as ad
from . import layers as L
from .autodiff import EUCLIDEAN, POINCARE, Parameter, use
from .config import PRESETS, ComponentSpaceConfig, ModelConfig
from .data import LabelInventory, Vocab, init_parameters, parse_record, random_embeddings, word_table
from .metrics import multitask_loss
from .model import Classifier

TOLERANCE = 1e-6
LAYERS = ("FFNN", "RNN", "GRU", "concat", "attention", "MLR")


@dataclass
class GradRow:
    layer: str
    error: float
    seconds: float

    @property
    def passed(self) -> bool:
        return bool(self.error < TOLERANCE)

    def line(self) -> str:
        return f"{self.layer:<24} max rel err {self.error:.3e}  {'PASS' if self.passed else 'FAIL'}"


def random_ball(rng, shape, max_norm=0.9):
    """Points with uniformly random direction and norm in (0, max_norm]."""
    v = rng.normal(size=shape)
    v /= np.linalg.norm(v, axis=-1, keepdims=True)
    return v * rng.uniform(0.05, max_norm, size=shape[:-1] + (1,))


class _Builder:
    def __init__(self, rng, space):
        self.rng = rng
        self.space = space
        self.params: dict[str, Parameter] = {}

    def matrix(self, name, rows, cols):
        limit = np.sqrt(6.0 / (rows + cols))
        self.params[name] = Parameter(name, self.rng.uniform(-limit, limit, size=(rows, cols)))
        return self.params[name]

    def point(self, name, shape):
        hyp = self.space == L.HYP
        value = random_ball(self.rng, shape) if hyp else self.rng.normal(size=shape)
        self.params[name] = Parameter(name, value, POINCARE if hyp else EUCLIDEAN)
        return self.params[name]

    def scalar(self, name, value):
        self.params[name] = Parameter(name, np.array(value))
        return self.params[name]


def _layer_case(layer: str, space: L.SpaceTag, dims: dict, rng):
    """Parameters and a scalar test function sum(w * layer(inputs))."""
    b = _Builder(rng, space)
    dM, dC, dS, n = dims["d_M"], dims["d_C"], dims["d_S"], dims["word_dim"]
    batch, length = 2, 3
    mask = np.ones((batch, length), dtype=bool)
    mask[1, -1] = False
    if layer == "FFNN":
        mod = L.FeedForward(b.matrix("W", dM, n), b.point("b", (dM,)), "tanh", space)
        x = b.point("x", (batch, n))
        run = lambda: L.ffnn_forward(mod, use(x))
    elif layer == "RNN":
        mod = L.RNNCell(b.matrix("W", dC, dC), b.matrix("U", dC, dC), b.point("b", (dC,)), "identity", space)
        x = b.point("x", (batch, length, dC))
        run = lambda: L.run_rnn(mod, use(x), mask)
    elif layer == "GRU":
        names = ("W_r", "U_r", "b_r", "W_z", "U_z", "b_z", "W", "U", "bias")
        parts = []
        for name in names:
            if name.startswith("W"):
                parts.append(b.matrix(name, dS, dS))
            elif name.startswith("U"):
                parts.append(b.matrix(name, dS, n))
            else:
                parts.append(b.point(name, (dS,)))
        mod = L.GRUCell(*parts, space=space)
        x = b.point("x", (batch, length, n))
        run = lambda: L.run_gru(mod, use(x), mask)
    elif layer == "concat":
        m = dM + dC + 2 * dS
        mod = L.Concat([b.matrix("M1", m, dM), b.matrix("M2", m, dC), b.matrix("M3", m, 2 * dS)], b.point("b", (m,)), space)
        xs = [b.point("x1", (batch, dM)), b.point("x2", (batch, dC)), b.point("x3", (batch, 2 * dS))]
        run = lambda: L.concat(mod, [use(x) for x in xs])
    elif layer == "attention":
        mod = L.DistanceAttention(
            b.matrix("W_q", dM, dM), b.point("b_q", (dM,)), b.matrix("W_k", dM, dM), b.point("b_k", (dM,)),
            b.scalar("beta", rng.uniform(0.5, 1.5)), b.point("positions", (length + 2, dM)), space,
        )
        x = b.point("x", (batch, length, dM))
        pos = np.array([[2, 3, 4], [0, 1, 2]])
        run = lambda: L.attention(mod, use(x), pos, mask)
    elif layer == "MLR":
        m, k = dM + dC + 2 * dS, 10
        p = b.point("p", (k, m))
        a = b.params["a"] = Parameter("a", rng.normal(size=(k, m)))
        mod = L.MLR(p, a, space)
        x = b.point("x", (batch, m))
        run = lambda: L.mlr_logits(mod, use(x))
    else:
        raise ValueError(f"unknown layer {layer!r}")
    out_shape = np.shape(run())
    w = rng.normal(size=out_shape)
    return b.params, lambda: ad.sum(run() * w)


def _tiny_corpus(rng, n_labels=9, n_words=30, n_examples=4):
    levels = ("coarse", "fine", "ultra")
    inv = LabelInventory([f"t{i}" for i in range(n_labels)], {f"t{i}": levels[i % 3] for i in range(n_labels)})
    vocab = [f"w{i}" for i in range(n_words)]
    examples = []
    for i in range(n_examples):
        record = {
            "mention_span": list(rng.choice(vocab, size=rng.integers(1, 4))) + (["unseen"] if i == 0 else []),
            "left_context": list(rng.choice(vocab, size=rng.integers(0, 4))),
            "right_context": list(rng.choice(vocab, size=rng.integers(0, 4))),
            "labels": list(rng.choice(inv.labels, size=rng.integers(1, 4), replace=False)),
        }
        examples.append(parse_record({k: [str(t) for t in v] for k, v in record.items()}, i + 1, inv))
    return inv, vocab, examples


def end_to_end_case(seed: int, preset: str = "base", word_dim: int = 100, spaces: ComponentSpaceConfig | None = None):
    """Freshly initialised model at ``preset`` dims and a multitask loss on a tiny batch."""
    rng = np.random.default_rng(seed)
    spaces = spaces or ComponentSpaceConfig()
    inv, vocab, examples = _tiny_corpus(rng)
    emb = random_embeddings(vocab, word_dim, seed, "poincare")
    words = Vocab.build(emb.tokens)
    chars = Vocab.build(c for ex in examples for c in ex.mention_chars)
    dims = PRESETS[preset]
    cfg = ModelConfig(dims["d_M"], dims["d_C"], dims["d_S"], word_dim, len(words), len(chars), len(inv))
    params = init_parameters(cfg, spaces, seed)
    clf = Classifier(cfg, spaces, params, word_table(words, emb, spaces.encoder), words, chars)
    batch = clf.batch(examples)
    return params, lambda: multitask_loss(clf.forward(batch).logits, batch.gold, inv)


GradHook = Callable[[str, dict], dict]


def _check(name, params, f, rng, max_coords, directions, grad_hook):
    start = time.perf_counter()
    with ad.Tape():
        loss = f()
        grads = ad.backward(loss)
    if grad_hook is not None:
        grads = grad_hook(name, grads)
    err = ad.finite_diff_check(
        f, params.values(), max_coords=max_coords, rng=rng, grads=grads, directions=directions, order=4
    )
    return GradRow(name, err, time.perf_counter() - start)


def run_gradcheck(
    seeds=range(10),
    preset: str = "base",
    word_dim: int = 100,
    spaces=(L.HYP, L.EU),
    layer_coords: int = 6,
    layer_directions: int = 2,
    e2e_coords: int = 0,
    e2e_directions: int = 1,
    grad_hook: GradHook | None = None,
    progress: Callable[[GradRow], None] | None = None,
) -> list[GradRow]:
    """One row per layer and geometry plus the end-to-end loss; each row's
    error is the worst over all seeds."""
    dims = dict(PRESETS[preset], word_dim=word_dim)
    worst: dict[str, GradRow] = {}

    def record(row):
        old = worst.get(row.layer)
        if old is None:
            worst[row.layer] = row
        else:
            worst[row.layer] = GradRow(row.layer, max(old.error, row.error), old.seconds + row.seconds)

    for seed in seeds:
        rng = np.random.default_rng(seed)
        for space in spaces:
            for layer in LAYERS:
                name = layer if space == L.HYP else f"{layer} (euclidean)"
                params, f = _layer_case(layer, space, dims, rng)
                record(_check(name, params, f, rng, layer_coords, layer_directions, grad_hook))
        params, f = end_to_end_case(seed, preset, word_dim)
        record(_check("end-to-end loss", params, f, rng, e2e_coords, e2e_directions, grad_hook))
    rows = list(worst.values())
    if progress is not None:
        for row in rows:
            progress(row)
    return rows
