"""Model construction, the training loop, evaluation and run persistence."""

from __future__ import annotations

import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from . import checkpoint
from .config import ComponentSpaceConfig, ModelConfig, Settings
from .data import (
    EmbeddingTable,
    EpochSchedule,
    LabelInventory,
    TypedExample,
    Vocab,
    init_parameters,
    iter_batches,
    word_table,
)
from .metrics import GranularityScores, evaluate, multitask_loss
from .model import Classifier
from .optim import RiemannianAdam, make_optimizer

log = logging.getLogger(__name__)


def build_classifier(
    settings: Settings,
    inventory: LabelInventory,
    embeddings: EmbeddingTable,
    examples: Sequence[TypedExample],
    seed: int | None = None,
) -> Classifier:
    """Fresh model whose vocabulary is the embedding table and whose char
    vocabulary comes from the mentions in ``examples``."""
    words = Vocab.build(embeddings.tokens)
    chars = Vocab.build(c for ex in examples for c in ex.mention_chars)
    config = settings.model_config(len(words), len(chars), len(inventory), word_dim=embeddings.dim)
    spaces = settings.spaces
    params = init_parameters(config, spaces, settings.seed if seed is None else seed)
    table = word_table(words, embeddings, spaces.encoder)
    return Classifier(config, spaces, params, table, words, chars, settings.max_chars, settings.max_context_len)


def evaluate_model(clf: Classifier, examples: Sequence[TypedExample], inventory: LabelInventory, batch_size: int = 256):
    predictions = clf.predict(examples, batch_size)
    golds = [set(ex.gold_labels) for ex in examples]
    return evaluate(predictions, golds, inventory), predictions


@dataclass
class EpochLog:
    epoch: int
    loss: float
    steps: int
    seconds: float
    mean_norm: float
    scores: dict | None = None

    def as_dict(self):
        """Deterministic fields only (wall-clock time is left out)."""
        return {
            "epoch": self.epoch,
            "loss": self.loss,
            "steps": self.steps,
            "mean_norm": self.mean_norm,
            "scores": self.scores,
        }


@dataclass
class TrainResult:
    model: Classifier
    optimizer: RiemannianAdam
    history: list[EpochLog] = field(default_factory=list)
    best_epoch: int = 0
    best_score: float = -1.0
    best_scores: GranularityScores | None = None


def train_step(clf: Classifier, opt: RiemannianAdam, batch_examples, inventory, rng) -> float:
    batch = clf.batch(batch_examples)
    with ad.Tape():
        loss = multitask_loss(clf.forward(batch, rng).logits, batch.gold, inventory)
        grads = ad.backward(loss)
    opt.step(grads)
    return float(ad.value_of(loss))


def train_model(
    settings: Settings,
    train: Sequence[TypedExample],
    inventory: LabelInventory,
    embeddings: EmbeddingTable,
    dev: Sequence[TypedExample] | None = None,
    crowd: Sequence[TypedExample] | None = None,
    out_dir: str | Path | None = None,
    on_epoch: Callable[[EpochLog], None] | None = None,
    model: Classifier | None = None,
) -> TrainResult:
    """Train for ``settings.epochs`` epochs.

    Each epoch makes one pass over ``train`` followed by ``crowd_cycles``
    passes over ``crowd``. When ``dev`` is given, the model with the best
    total macro-F1 on it is kept (and written to ``out_dir/best.ckpt``).
    """
    if not train:
        raise ValueError("no training examples")
    settings.validate()
    clf = model or build_classifier(settings, inventory, embeddings, train)
    opt = make_optimizer(clf.params, settings)
    rng = np.random.default_rng(settings.seed)
    schedule = EpochSchedule(crowd_cycles=settings.crowd_cycles)
    result = TrainResult(clf, opt)
    out = Path(out_dir) if out_dir is not None else None
    best_values = None
    for epoch in range(1, settings.epochs + 1):
        start = time.perf_counter()
        losses = []
        for _, split in schedule.passes(train, crowd):
            for chunk in iter_batches(split, settings.batch_size, rng):
                losses.append(train_step(clf, opt, chunk, inventory, rng))
        watch = dev if dev else train
        norms = clf.text_vector_norms(watch)
        entry = EpochLog(epoch, float(np.mean(losses)), len(losses), 0.0, float(np.mean(norms)))
        if dev:
            scores, _ = evaluate_model(clf, dev, inventory)
            entry.scores = scores.as_dict()
            score = scores.total.macro.f1
            if score > result.best_score:
                result.best_score, result.best_epoch, result.best_scores = score, epoch, scores
                best_values = {name: p.value.copy() for name, p in clf.params.items()}
                if out is not None:
                    save_run(out / "best.ckpt", clf, opt, settings, inventory, {"epoch": epoch, "dev_scores": entry.scores})
        entry.seconds = time.perf_counter() - start
        result.history.append(entry)
        if out is not None:
            checkpoint.atomic_write_text(
                out / "metrics.jsonl", "".join(json.dumps(h.as_dict(), sort_keys=True) + "\n" for h in result.history)
            )
        log.info("epoch %d loss %.4f norm %.3f%s", epoch, entry.loss, entry.mean_norm,
                 "" if entry.scores is None else f" dev ma-F1 {entry.scores['total']['macro']['f1']:.4f}")
        if on_epoch is not None:
            on_epoch(entry)
    if best_values is not None:
        for name, value in best_values.items():
            clf.params[name].value = value
    elif out is not None:
        save_run(out / "best.ckpt", clf, opt, settings, inventory, {"epoch": settings.epochs})
    return result


# ------------------------------------------------------------ persistence


def save_run(path, clf: Classifier, opt: RiemannianAdam | None, settings: Settings, inventory: LabelInventory, extra_meta=None):
    meta = {
        "settings": {k: v for k, v in vars(settings).items()},
        "model_config": vars(clf.config),
        "spaces": clf.spaces.as_dict(),
        "words": clf.words.items,
        "chars": clf.chars.items,
        "inventory": inventory.to_dict(),
        "max_chars": clf.max_chars,
        "max_context_len": clf.max_context_len,
        "optimizer": None if opt is None else opt.state_dict(),
        "extra": extra_meta or {},
    }
    groups = {"words": {"table": clf.word_vectors}}
    if opt is not None:
        groups["adam_m"] = dict(opt.state.m)
        groups["adam_v"] = dict(opt.state.v)
    checkpoint.save(path, clf.params, meta, groups)


@dataclass
class LoadedRun:
    model: Classifier
    settings: Settings
    inventory: LabelInventory
    optimizer: RiemannianAdam | None
    meta: dict


def load_run(path) -> LoadedRun:
    params, groups, meta = checkpoint.load(path)
    try:
        settings = Settings(**meta["settings"])
        config = ModelConfig(**meta["model_config"])
        spaces = ComponentSpaceConfig(**meta["spaces"])
        inventory = LabelInventory.from_dict(meta["inventory"])
        words, chars = Vocab(list(meta["words"])), Vocab(list(meta["chars"]))
        clf = Classifier(
            config, spaces, params, groups["words"]["table"], words, chars, meta["max_chars"], meta["max_context_len"]
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise checkpoint.CheckpointError(f"inconsistent checkpoint contents: {exc}") from None
    opt = None
    if meta.get("optimizer") is not None and "adam_m" in groups:
        opt = make_optimizer(clf.params, settings)
        opt.load_state(meta["optimizer"], groups["adam_m"], groups["adam_v"])
    return LoadedRun(clf, settings, inventory, opt, meta)
