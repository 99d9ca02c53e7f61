"""Synthetic hierarchical typing tasks.

A balanced label tree of ``depth`` levels and ``branching`` children per node
is laid out in the Poincare ball: every node sits a fixed hyperbolic distance
from its parent, in a direction close to its parent's. Every label owns a few
words whose embeddings scatter (in hyperbolic distance) around its anchor. An
example draws a leaf; its gold set is the leaf plus all ancestors, its mention
uses words of the leaf (and sometimes of the parent), and its context mixes
ancestor words with filler words. Characters carry no signal.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import geometry as geo
from .data import EmbeddingTable, LabelInventory, TypedExample


@dataclass
class LabelTree:
    depth: int
    branching: int
    levels: list[list[str]]
    parent: dict[str, str | None]

    @property
    def labels(self) -> list[str]:
        return [name for level in self.levels for name in level]

    def level_of(self, label: str) -> int:
        return label.count(".") + 1

    def ancestors(self, label: str) -> list[str]:
        out = []
        node = self.parent[label]
        while node is not None:
            out.append(node)
            node = self.parent[node]
        return out

    def inventory(self) -> LabelInventory:
        """Level 1 is coarse, the deepest level ultra, everything between fine."""

        def gran(level):
            if level == 1:
                return "coarse"
            return "ultra" if level == self.depth else "fine"

        labels = self.labels
        return LabelInventory(labels, {l: gran(self.level_of(l)) for l in labels})


def build_tree(depth: int, branching: int) -> LabelTree:
    if depth < 2 or branching < 2:
        raise ValueError("the label tree needs depth >= 2 and branching >= 2")
    levels = [[f"n{i}" for i in range(branching)]]
    parent: dict[str, str | None] = {name: None for name in levels[0]}
    for _ in range(depth - 1):
        nxt = []
        for node in levels[-1]:
            for i in range(branching):
                child = f"{node}.{i}"
                parent[child] = node
                nxt.append(child)
        levels.append(nxt)
    return LabelTree(depth, branching, levels, parent)


def _unit(v):
    return v / np.linalg.norm(v, axis=-1, keepdims=True)


def tree_anchors(tree: LabelTree, dim: int, rng: np.random.Generator, step: float = 0.8, spread: float = 0.8):
    """Ball anchors: each node sits at hyperbolic distance ``step`` from its parent."""
    directions = {}
    anchors = {}
    origin = np.zeros(dim)
    for names in tree.levels:
        for name in names:
            up = tree.parent[name]
            noise = _unit(rng.normal(size=dim))
            d = noise if up is None else _unit(directions[up] + spread * noise)
            directions[name] = d
            base = origin if up is None else anchors[up]
            anchors[name] = geo.exp_x(base, step * d / geo.conformal_factor(base))
    return anchors


def _jitter(x, scale, rng):
    """Random point at hyperbolic distance about ``scale`` from ``x``."""
    u = rng.normal(size=x.shape)
    return geo.exp_x(x, scale * u / geo.conformal_factor(x))


@dataclass
class SyntheticTask:
    tree: LabelTree
    inventory: LabelInventory
    embeddings: EmbeddingTable
    train: list[TypedExample]
    test: list[TypedExample]

    def level_ids(self, level: int) -> set[int]:
        return {self.inventory.index[name] for name in self.tree.levels[level - 1]}


def make_task(
    depth: int = 4,
    branching: int = 3,
    dim: int = 4,
    n_train: int = 2000,
    n_test: int = 500,
    seed: int = 0,
    words_per_label: int = 3,
    noise: float = 0.12,
    fillers: int = 20,
    step: float = 0.8,
    spread: float = 0.8,
) -> SyntheticTask:
    rng = np.random.default_rng(seed)
    tree = build_tree(depth, branching)
    anchors = tree_anchors(tree, dim, rng, step, spread)
    tokens, vectors = [], []
    words = {}
    for name in tree.labels:
        words[name] = []
        for j in range(words_per_label):
            token = f"w_{name}_{j}"
            words[name].append(token)
            tokens.append(token)
            vectors.append(_jitter(anchors[name], noise, rng))
    filler = [f"f{j}" for j in range(fillers)]
    for token in filler:
        tokens.append(token)
        vectors.append(geo.exp0(0.3 * rng.normal(size=dim)))
    table = EmbeddingTable(tokens, np.array(vectors), "poincare")
    inventory = tree.inventory()
    leaves = tree.levels[-1]
    alphabet = list("abcdefghij")

    def example():
        leaf = leaves[rng.integers(len(leaves))]
        lineage = tree.ancestors(leaf)
        mention = [rng.choice(words[leaf])]
        if rng.random() < 0.5:
            mention.insert(0, rng.choice(words[lineage[0]]))
        context = [rng.choice(words[a]) if rng.random() < 0.7 else rng.choice(filler) for a in lineage]
        rng.shuffle(context)
        cut = int(rng.integers(len(context) + 1))
        left, right = context[:cut], context[cut:]
        labels = [leaf] + lineage
        chars = "".join(rng.choice(alphabet, size=3))
        mention = [str(t) for t in mention]
        ex = TypedExample(
            mention, [str(t) for t in left] + mention + [str(t) for t in right],
            len(left), len(left) + len(mention),
            frozenset(inventory.index[l] for l in labels), tuple(labels), chars,
        )
        return ex

    train = [example() for _ in range(n_train)]
    test = [example() for _ in range(n_test)]
    return SyntheticTask(tree, inventory, table, train, test)
