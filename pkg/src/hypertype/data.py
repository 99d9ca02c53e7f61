"""Datasets, embeddings, vocabularies, parameter initialisation and batching.

Dataset files hold one JSON object per line::

    {"mention_span": ["Paris"], "left_context": ["He", "lives", "in"],
     "right_context": ["."], "labels": ["location", "city"]}

``mention_span`` may also be a plain string (split on whitespace), and the
Ultra-Fine field names ``left_context_token``, ``right_context_token`` and
``y_str`` are accepted as aliases. An optional ``mention_chars`` string
replaces the characters fed to the char encoder (default: the mention tokens
joined by spaces).

Embedding files are whitespace separated text, ``token v1 ... vn`` per line.
Label inventories are ``label<TAB>granularity`` lines with granularity one of
``coarse``, ``fine``, ``ultra``.
"""

from __future__ import annotations

import json
import logging
import queue
import threading
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Sequence

import numpy as np

from . import geometry as geo
from .autodiff import EUCLIDEAN, POINCARE, Parameter
from .config import ComponentSpaceConfig, ModelConfig
from .layers import SpaceTag

log = logging.getLogger(__name__)

GRANULARITIES = ("coarse", "fine", "ultra")
PAD, OOV = 0, 1


class DataError(ValueError):
    pass


# ----------------------------------------------------------------- labels


@dataclass
class LabelInventory:
    labels: list[str]
    granularity: dict[str, str]
    index: dict[str, int] = field(init=False)

    def __post_init__(self):
        if len(set(self.labels)) != len(self.labels):
            raise DataError("duplicate labels in inventory")
        missing = [l for l in self.labels if l not in self.granularity]
        if missing:
            raise DataError(f"labels without granularity: {missing[:5]}")
        bad = {g for g in self.granularity.values() if g not in GRANULARITIES}
        if bad:
            raise DataError(f"unknown granularities {sorted(bad)}")
        self.index = {label: i for i, label in enumerate(self.labels)}

    def __len__(self):
        return len(self.labels)

    def ids_of(self, level: str) -> np.ndarray:
        return np.array([i for i, l in enumerate(self.labels) if self.granularity[l] == level], dtype=int)

    def partition_masks(self) -> np.ndarray:
        """Boolean (3, K) matrix, one row per granularity."""
        masks = np.zeros((len(GRANULARITIES), len(self.labels)), dtype=bool)
        for i, label in enumerate(self.labels):
            masks[GRANULARITIES.index(self.granularity[label]), i] = True
        return masks

    def to_dict(self):
        return {"labels": list(self.labels), "granularity": dict(self.granularity)}

    @classmethod
    def from_dict(cls, d):
        return cls(list(d["labels"]), dict(d["granularity"]))

    @classmethod
    def from_labels(cls, labels: Iterable[str], default: str = "ultra") -> "LabelInventory":
        ordered = sorted(set(labels))
        return cls(ordered, {l: default for l in ordered})


def load_label_inventory(path: str | Path) -> LabelInventory:
    labels, gran = [], {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n")
            if not line.strip() or line.startswith("#"):
                continue
            parts = line.split("\t")
            if len(parts) != 2:
                raise DataError(f"{path}:{lineno}: expected 'label<TAB>granularity'")
            label, level = parts[0].strip(), parts[1].strip().lower()
            if level not in GRANULARITIES:
                raise DataError(f"{path}:{lineno}: unknown granularity {level!r}")
            labels.append(label)
            gran[label] = level
    return LabelInventory(labels, gran)


def save_label_inventory(inv: LabelInventory, path: str | Path):
    with open(path, "w", encoding="utf-8") as fh:
        for label in inv.labels:
            fh.write(f"{label}\t{inv.granularity[label]}\n")


# --------------------------------------------------------------- examples


@dataclass
class TypedExample:
    mention_tokens: list[str]
    context_tokens: list[str]
    mention_start: int
    mention_end: int
    gold_labels: frozenset
    label_names: tuple = ()
    char_text: str | None = None  # overrides the characters of the mention

    @property
    def mention_chars(self) -> list[str]:
        return list(self.char_text if self.char_text is not None else " ".join(self.mention_tokens))

    @property
    def left_context(self):
        return self.context_tokens[: self.mention_start]

    @property
    def right_context(self):
        return self.context_tokens[self.mention_end :]

    def to_record(self) -> dict:
        record = {
            "mention_span": list(self.mention_tokens),
            "left_context": list(self.left_context),
            "right_context": list(self.right_context),
            "labels": list(self.label_names),
        }
        if self.char_text is not None:
            record["mention_chars"] = self.char_text
        return record


def _tokens(record, keys, lineno, required=True):
    for key in keys:
        if key in record:
            value = record[key]
            if isinstance(value, str):
                return value.split()
            if isinstance(value, list) and all(isinstance(t, str) for t in value):
                return list(value)
            raise DataError(f"line {lineno}: field {key!r} must be a string or a list of strings")
    if required:
        raise DataError(f"line {lineno}: missing field {keys[0]!r}")
    return []


def parse_record(record: dict, lineno: int, inventory: LabelInventory | None, strict: bool = True) -> TypedExample:
    if not isinstance(record, dict):
        raise DataError(f"line {lineno}: record is not an object")
    mention = _tokens(record, ("mention_span",), lineno)
    if not mention:
        raise DataError(f"line {lineno}: field 'mention_span' is empty")
    left = _tokens(record, ("left_context", "left_context_token"), lineno, required=False)
    right = _tokens(record, ("right_context", "right_context_token"), lineno, required=False)
    labels = _tokens(record, ("labels", "y_str"), lineno)
    ids = []
    kept = []
    for label in labels:
        if inventory is None:
            kept.append(label)
            continue
        if label not in inventory.index:
            if strict:
                raise DataError(f"line {lineno}: field 'labels': unknown label {label!r}")
            continue
        ids.append(inventory.index[label])
        kept.append(label)
    if inventory is not None and not ids:
        raise DataError(f"line {lineno}: field 'labels': no label from the inventory")
    chars = record.get("mention_chars")
    if chars is not None and not isinstance(chars, str):
        raise DataError(f"line {lineno}: field 'mention_chars' must be a string")
    context = left + mention + right
    return TypedExample(mention, context, len(left), len(left) + len(mention), frozenset(ids), tuple(kept), chars)


def read_records(path: str | Path) -> Iterator[tuple[int, dict]]:
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                yield lineno, json.loads(line)
            except json.JSONDecodeError as exc:
                raise DataError(f"{path}:{lineno}: malformed JSON ({exc.msg})") from None


def load_examples(path: str | Path, inventory: LabelInventory | None = None, strict: bool = True) -> list[TypedExample]:
    """Parse a dataset file. Without an inventory, ``gold_labels`` stays empty
    and only ``label_names`` is filled (used to build an inventory)."""
    out = []
    for lineno, record in read_records(path):
        try:
            out.append(parse_record(record, lineno, inventory, strict))
        except DataError as exc:
            msg = str(exc).removeprefix(f"line {lineno}: ")
            raise DataError(f"{path}:{lineno}: {msg}") from None
    return out


def attach_labels(examples: Sequence[TypedExample], inventory: LabelInventory) -> list[TypedExample]:
    out = []
    for ex in examples:
        unknown = [l for l in ex.label_names if l not in inventory.index]
        if unknown:
            raise DataError(f"label {unknown[0]!r} is not in the label inventory")
        ids = frozenset(inventory.index[l] for l in ex.label_names)
        out.append(
            TypedExample(ex.mention_tokens, ex.context_tokens, ex.mention_start, ex.mention_end, ids, ex.label_names, ex.char_text)
        )
    return out


def save_examples(examples: Iterable[TypedExample], path: str | Path):
    with open(path, "w", encoding="utf-8") as fh:
        for ex in examples:
            fh.write(json.dumps(ex.to_record(), ensure_ascii=False) + "\n")


# ------------------------------------------------------------- embeddings


@dataclass
class EmbeddingTable:
    tokens: list[str]
    vectors: np.ndarray
    space: str = "poincare"
    rescale: float = 1.0

    def __post_init__(self):
        self.vectors = np.asarray(self.vectors, dtype=np.float64)
        if self.vectors.ndim != 2 or len(self.tokens) != self.vectors.shape[0]:
            raise DataError("embedding table shape does not match its token list")
        if self.space not in ("poincare", "euclidean"):
            raise DataError(f"unknown embedding space {self.space!r}")
        if self.space == "poincare" and len(self.tokens):
            norms = np.linalg.norm(self.vectors, axis=1)
            if np.any(norms >= 1.0):
                bad = self.tokens[int(np.argmax(norms))]
                raise DataError(f"poincare embedding for {bad!r} has norm >= 1")

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]

    def for_space(self, space: SpaceTag) -> np.ndarray:
        """Vectors as consumed by an encoder living in ``space``."""
        space = SpaceTag.parse(space)
        if self.space == "poincare":
            return self.vectors if space == SpaceTag.HYPERBOLIC else geo.log0(self.vectors)
        if space == SpaceTag.HYPERBOLIC:
            return geo.exp0(self.rescale * self.vectors)
        return self.vectors


def load_embeddings(path: str | Path, space: str = "poincare", rescale: float = 1.0) -> EmbeddingTable:
    tokens, rows, dim = [], [], None
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            parts = line.rstrip("\n").split()
            if not parts:
                continue
            try:
                values = [float(v) for v in parts[1:]]
            except ValueError:
                raise DataError(f"{path}:{lineno}: non-numeric embedding value") from None
            if dim is None:
                dim = len(values)
                if dim == 0:
                    raise DataError(f"{path}:{lineno}: embedding line without values")
            elif len(values) != dim:
                raise DataError(f"{path}:{lineno}: expected {dim} values, got {len(values)}")
            tokens.append(parts[0])
            rows.append(values)
    vectors = np.array(rows, dtype=np.float64).reshape(len(rows), dim or 0)
    try:
        return EmbeddingTable(tokens, vectors, space, rescale)
    except DataError as exc:
        raise DataError(f"{path}: {exc}") from None


def save_embeddings(table: EmbeddingTable, path: str | Path):
    with open(path, "w", encoding="utf-8") as fh:
        for token, vec in zip(table.tokens, table.vectors):
            fh.write(token + " " + " ".join(repr(float(v)) for v in vec) + "\n")


def random_embeddings(tokens: Sequence[str], dim: int, seed: int, space: str = "euclidean") -> EmbeddingTable:
    """Stand-in table when no pre-trained embeddings are supplied."""
    rng = np.random.default_rng(seed)
    vectors = rng.normal(scale=1.0 / np.sqrt(dim), size=(len(tokens), dim))
    if space == "poincare":
        vectors = geo.exp0(vectors)
    return EmbeddingTable(list(tokens), vectors, space)


# ----------------------------------------------------------- vocabularies


@dataclass
class Vocab:
    items: list[str]
    index: dict[str, int] = field(init=False)

    def __post_init__(self):
        self.index = {tok: i for i, tok in enumerate(self.items)}

    @classmethod
    def build(cls, tokens: Iterable[str]) -> "Vocab":
        seen = dict.fromkeys(tokens)
        return cls(["<pad>", "<unk>"] + [t for t in seen if t not in ("<pad>", "<unk>")])

    def __len__(self):
        return len(self.items)

    def ids(self, tokens: Sequence[str]) -> list[int]:
        return [self.index.get(t, OOV) for t in tokens]


def word_table(vocab: Vocab, emb: EmbeddingTable, space: SpaceTag) -> np.ndarray:
    """Frozen lookup table aligned with ``vocab``; rows 0/1 (pad/OOV) are zero."""
    vecs = emb.for_space(space)
    table = np.zeros((len(vocab), emb.dim))
    lookup = {tok: i for i, tok in enumerate(emb.tokens)}
    for i, tok in enumerate(vocab.items[2:], 2):
        j = lookup.get(tok)
        if j is not None:
            table[i] = vecs[j]
    return table


# --------------------------------------------------------- initialisation


def _glorot(rng, fan_out, fan_in):
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_out, fan_in))


def _small_points(rng, shape, hyperbolic):
    v = rng.uniform(-1e-4, 1e-4, size=shape)
    return geo.exp0(v) if hyperbolic else v


def init_parameters(config: ModelConfig, spaces: ComponentSpaceConfig, seed: int) -> dict[str, Parameter]:
    """Fresh parameters: Glorot matrices, ball biases at the origin, small
    uniform embeddings (mapped by exp0 in hyperbolic components)."""
    rng = np.random.default_rng(seed)
    params: dict[str, Parameter] = {}

    def matrix(name, fan_out, fan_in):
        params[name] = Parameter(name, _glorot(rng, fan_out, fan_in))

    def bias(name, dim, space):
        params[name] = Parameter(name, np.zeros(dim), POINCARE if space == SpaceTag.HYPERBOLIC else EUCLIDEAN)

    def points(name, shape, space):
        hyp = space == SpaceTag.HYPERBOLIC
        params[name] = Parameter(name, _small_points(rng, shape, hyp), POINCARE if hyp else EUCLIDEAN)

    enc, att, cat, mlr = spaces.encoder, spaces.attention, spaces.concat, spaces.mlr
    n, dM, dC, dS, m, K = config.word_dim, config.d_M, config.d_C, config.d_S, config.m, config.num_labels

    points("word.oov", (n,), enc)
    matrix("mention.ffnn.weight", dM, n)
    bias("mention.ffnn.bias", dM, enc)
    points("char.embedding", (config.char_vocab_size, dC), enc)
    matrix("char.rnn.W", dC, dC)
    matrix("char.rnn.U", dC, dC)
    bias("char.rnn.bias", dC, enc)
    for direction in ("fwd", "bwd"):
        prefix = f"context.{direction}."
        for gate in ("r", "z", ""):
            suffix = f"_{gate}" if gate else ""
            matrix(prefix + "W" + suffix, dS, dS)
            matrix(prefix + "U" + suffix, dS, n)
            bias(prefix + ("b" + suffix if gate else "bias"), dS, enc)
    matrix("context.merge.M1", 2 * dS, dS)
    matrix("context.merge.M2", 2 * dS, dS)
    bias("context.merge.bias", 2 * dS, enc)

    for prefix, dim, rows in (
        ("mention.attn.", dM, config.max_mention_len),
        ("context.attn.", 2 * dS, 2 * config.max_rel + 1),
    ):
        matrix(prefix + "W_q", dim, dim)
        bias(prefix + "b_q", dim, att)
        matrix(prefix + "W_k", dim, dim)
        bias(prefix + "b_k", dim, att)
        params[prefix + "beta"] = Parameter(prefix + "beta", np.array(config.beta_init))
        points(prefix + "positions", (rows, dim), att)

    matrix("concat.M_mention", m, dM)
    matrix("concat.M_char", m, dC)
    matrix("concat.M_context", m, 2 * dS)
    bias("concat.bias", m, cat)

    points("mlr.p", (K, m), mlr)
    params["mlr.a"] = Parameter("mlr.a", _glorot(rng, K, m))
    return params


# ---------------------------------------------------------------- batching


@dataclass
class Batch:
    mention_ids: np.ndarray
    mention_mask: np.ndarray
    mention_pos: np.ndarray
    char_ids: np.ndarray
    char_mask: np.ndarray
    context_ids: np.ndarray
    context_mask: np.ndarray
    context_pos: np.ndarray
    gold: np.ndarray

    def __len__(self):
        return self.gold.shape[0]


def _pad(rows: Sequence[Sequence[int]], fill=PAD):
    width = max(1, max((len(r) for r in rows), default=1))
    out = np.full((len(rows), width), fill, dtype=np.int64)
    mask = np.zeros((len(rows), width), dtype=bool)
    for i, r in enumerate(rows):
        out[i, : len(r)] = r
        mask[i, : len(r)] = True
    return out, mask


def relative_positions(length: int, start: int, end: int, max_rel: int) -> list[int]:
    """Offset of each context token to the mention span, clipped and shifted to [0, 2*max_rel]."""
    out = []
    for i in range(length):
        if i < start:
            off = i - start
        elif i >= end:
            off = i - end + 1
        else:
            off = 0
        out.append(int(np.clip(off, -max_rel, max_rel)) + max_rel)
    return out


def _context_window(ex: TypedExample, max_len: int):
    tokens, start, end = ex.context_tokens, ex.mention_start, ex.mention_end
    if len(tokens) <= max_len:
        return tokens, start, end
    # keep a window centred on the mention
    centre = (start + end) // 2
    lo = max(0, min(centre - max_len // 2, len(tokens) - max_len))
    return tokens[lo : lo + max_len], start - lo, end - lo


def make_batch(
    examples: Sequence[TypedExample],
    words: Vocab,
    chars: Vocab,
    num_labels: int,
    max_mention_len: int,
    max_chars: int,
    max_context_len: int,
    max_rel: int,
) -> Batch:
    mention_rows = [words.ids(ex.mention_tokens[:max_mention_len]) for ex in examples]
    char_rows = [chars.ids(ex.mention_chars[:max_chars]) for ex in examples]
    ctx_rows, pos_rows = [], []
    for ex in examples:
        tokens, start, end = _context_window(ex, max_context_len)
        ctx_rows.append(words.ids(tokens))
        pos_rows.append(relative_positions(len(tokens), start, end, max_rel))
    mention_ids, mention_mask = _pad(mention_rows)
    char_ids, char_mask = _pad(char_rows)
    context_ids, context_mask = _pad(ctx_rows)
    context_pos, _ = _pad(pos_rows, fill=max_rel)
    mention_pos = np.broadcast_to(np.arange(mention_ids.shape[1]), mention_ids.shape).copy()
    gold = np.zeros((len(examples), num_labels))
    for i, ex in enumerate(examples):
        ids = list(ex.gold_labels)
        if ids and (min(ids) < 0 or max(ids) >= num_labels):
            raise DataError("gold label id outside the inventory")
        gold[i, ids] = 1.0
    return Batch(mention_ids, mention_mask, mention_pos, char_ids, char_mask, context_ids, context_mask, context_pos, gold)


def iter_batches(examples: Sequence[TypedExample], batch_size: int, rng: np.random.Generator | None = None):
    """Index chunks of ``examples`` (shuffled when ``rng`` is given)."""
    order = np.arange(len(examples))
    if rng is not None:
        rng.shuffle(order)
    for lo in range(0, len(order), batch_size):
        yield [examples[i] for i in order[lo : lo + batch_size]]


def prefetch(items: Iterable, size: int = 2) -> Iterator:
    """Produce ``items`` on a background thread through a bounded queue."""
    if size <= 0:
        yield from items
        return
    q: queue.Queue = queue.Queue(maxsize=size)
    done = object()
    failure = []

    def worker():
        try:
            for item in items:
                q.put(item)
        except BaseException as exc:  # re-raised in the consumer
            failure.append(exc)
        finally:
            q.put(done)

    thread = threading.Thread(target=worker, daemon=True)
    thread.start()
    while True:
        item = q.get()
        if item is done:
            break
        yield item
    thread.join()
    if failure:
        raise failure[0]


@dataclass
class EpochSchedule:
    """One pass over the main split per epoch, then ``crowd_cycles`` passes over
    the crowdsourced split before evaluation."""

    main_passes: int = 1
    crowd_cycles: int = 5

    def __post_init__(self):
        if self.crowd_cycles < 0 or self.main_passes < 0:
            raise ValueError("pass counts must be nonnegative")

    def passes(self, train: Sequence, crowd: Sequence | None = None):
        for _ in range(self.main_passes):
            yield "train", train
        if crowd:
            for _ in range(self.crowd_cycles):
                yield "crowd", crowd
