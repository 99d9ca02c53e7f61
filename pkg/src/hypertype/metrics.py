"""Losses and multi-label evaluation scores."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from typing import Iterable, Sequence

import numpy as np

from . import autodiff as ad
from .data import GRANULARITIES, LabelInventory

LEVELS = ("total",) + GRANULARITIES


# -------------------------------------------------------------------- loss


def bce_terms(logits, gold):
    """Elementwise -[y log s(z) + (1-y) log(1-s(z))] = softplus(z) - y z."""
    return ad.softplus(logits) - gold * logits


def bce_loss(logits, gold):
    """Mean binary cross-entropy over the last axis."""
    if np.shape(ad.value_of(logits)) != np.shape(gold):
        raise ValueError("logits and gold labels must have the same shape")
    return ad.mean(bce_terms(logits, np.asarray(gold, dtype=np.float64)), axis=-1)


def multitask_loss(logits, gold, inventory: LabelInventory | np.ndarray):
    """Batch mean of the summed per-granularity BCE.

    ``logits`` and ``gold`` are (B, K). For each example, a granularity
    contributes the mean BCE over its own labels, and only when the example
    has at least one gold label there. ``inventory`` may also be the (P, K)
    boolean partition matrix.
    """
    gold = np.asarray(gold, dtype=np.float64)
    if gold.ndim == 1:
        gold = gold[None]
        logits = ad.expand_dims(logits, 0)
    if np.shape(ad.value_of(logits)) != gold.shape:
        raise ValueError("logits and gold labels must have the same shape")
    parts = inventory.partition_masks() if isinstance(inventory, LabelInventory) else np.asarray(inventory, dtype=bool)
    terms = bce_terms(logits, gold)
    total = 0.0
    for part in parts:
        size = int(part.sum())
        if size == 0:
            continue
        present = (gold[:, part].sum(axis=1) > 0).astype(np.float64)
        if not present.any():
            continue
        part_mean = ad.sum(terms * (part / size), axis=-1)
        total = total + ad.sum(part_mean * present)
    return total / gold.shape[0]


# ----------------------------------------------------------------- metrics


def _f1(p, r):
    return 0.0 if p + r == 0 else 2 * p * r / (p + r)


@dataclass
class PRF:
    precision: float = 0.0
    recall: float = 0.0
    f1: float = 0.0


@dataclass
class LevelScores:
    macro: PRF
    micro: PRF
    examples: int = 0


@dataclass
class GranularityScores:
    total: LevelScores
    coarse: LevelScores
    fine: LevelScores
    ultra: LevelScores
    accuracy: float = 0.0

    def level(self, name: str) -> LevelScores:
        return getattr(self, name)

    def as_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.as_dict(), indent=2, sort_keys=True)

    def to_text(self) -> str:
        lines = [f"{'level':<8}{'ma-P':>8}{'ma-R':>8}{'ma-F1':>8}{'mi-P':>8}{'mi-R':>8}{'mi-F1':>8}{'n':>7}"]
        for name in LEVELS:
            s = self.level(name)
            lines.append(
                f"{name:<8}{s.macro.precision:8.4f}{s.macro.recall:8.4f}{s.macro.f1:8.4f}"
                f"{s.micro.precision:8.4f}{s.micro.recall:8.4f}{s.micro.f1:8.4f}{s.examples:7d}"
            )
        lines.append(f"accuracy {self.accuracy:.4f}")
        return "\n".join(lines)


def level_scores(predictions: Sequence[Iterable[int]], golds: Sequence[Iterable[int]], keep=None) -> LevelScores:
    """Macro and micro P/R/F1, optionally restricted to the label ids in ``keep``.

    Examples with no gold label (after restriction) are skipped entirely.
    Macro precision averages over the remaining examples with a nonempty
    prediction, macro recall over all remaining examples.
    """
    if len(predictions) != len(golds):
        raise ValueError("predictions and golds must be aligned")
    keep = None if keep is None else set(keep)
    p_sum = r_sum = 0.0
    p_n = r_n = 0
    tp = fp = fn = 0
    for pred, gold in zip(predictions, golds):
        pred, gold = set(pred), set(gold)
        if keep is not None:
            pred &= keep
            gold &= keep
        if not gold:
            continue
        hit = len(pred & gold)
        r_sum += hit / len(gold)
        r_n += 1
        if pred:
            p_sum += hit / len(pred)
            p_n += 1
        tp += hit
        fp += len(pred) - hit
        fn += len(gold) - hit
    macro_p = p_sum / p_n if p_n else 0.0
    macro_r = r_sum / r_n if r_n else 0.0
    micro_p = tp / (tp + fp) if tp + fp else 0.0
    micro_r = tp / (tp + fn) if tp + fn else 0.0
    return LevelScores(
        PRF(macro_p, macro_r, _f1(macro_p, macro_r)),
        PRF(micro_p, micro_r, _f1(micro_p, micro_r)),
        r_n,
    )


def accuracy(predictions, golds) -> float:
    """Fraction of examples whose predicted set equals the gold set."""
    if not len(golds):
        return 0.0
    return sum(set(p) == set(g) for p, g in zip(predictions, golds)) / len(golds)


def evaluate(predictions, golds, inventory: LabelInventory | None = None) -> GranularityScores:
    total = level_scores(predictions, golds)
    per = {}
    for level in GRANULARITIES:
        keep = set() if inventory is None else set(inventory.ids_of(level).tolist())
        per[level] = level_scores(predictions, golds, keep)
    return GranularityScores(total, per["coarse"], per["fine"], per["ultra"], accuracy(predictions, golds))
