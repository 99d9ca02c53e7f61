"""Hyperbolic vs Euclidean comparison on synthetic label trees."""

from __future__ import annotations

import csv
import io
import time
from dataclasses import dataclass, replace

import numpy as np

from .config import ComponentSpaceConfig, Settings
from .metrics import level_scores
from .synthetic import make_task
from .train import build_classifier, train_model

CSV_FIELDS = ("space", "seed", "level", "macro_p", "macro_r", "macro_f1", "micro_f1", "examples")


@dataclass
class BenchOptions:
    depth: int = 4
    branching: int = 3
    dim: int = 4
    n_train: int = 2000
    n_test: int = 500
    epochs: int = 16
    batch_size: int = 25
    learning_rate: float = 0.02
    noise: float = 0.12
    step: float = 0.8
    spread: float = 0.8


def bench_settings(opts: BenchOptions, spaces: ComponentSpaceConfig, seed: int) -> Settings:
    """Every state dimension equals ``dim``; no crowd split, no dropout on the tiny model."""
    return replace(
        Settings(),
        preset="custom",
        d_M=opts.dim,
        d_C=opts.dim,
        d_S=opts.dim,
        word_dim=opts.dim,
        batch_size=opts.batch_size,
        epochs=opts.epochs,
        crowd_cycles=0,
        learning_rate=opts.learning_rate,
        input_dropout=0.0,
        concat_dropout=0.0,
        seed=seed,
    ).set_spaces(spaces)


def run_one(opts: BenchOptions, spaces: ComponentSpaceConfig, seed: int):
    task = make_task(
        opts.depth, opts.branching, opts.dim, opts.n_train, opts.n_test,
        seed=seed, noise=opts.noise, step=opts.step, spread=opts.spread,
    )
    settings = bench_settings(opts, spaces, seed)
    clf = build_classifier(settings, task.inventory, task.embeddings, task.train)
    train_model(settings, task.train, task.inventory, task.embeddings, model=clf)
    predictions = clf.predict(task.test)
    golds = [set(ex.gold_labels) for ex in task.test]
    rows = []
    for level in range(1, opts.depth + 1):
        s = level_scores(predictions, golds, task.level_ids(level))
        rows.append(
            {
                "space": spaces.encoder.value if len(set(spaces.as_dict().values())) == 1 else spaces.label(),
                "seed": seed,
                "level": level,
                "macro_p": s.macro.precision,
                "macro_r": s.macro.recall,
                "macro_f1": s.macro.f1,
                "micro_f1": s.micro.f1,
                "examples": s.examples,
            }
        )
    return rows


def run_bench(opts: BenchOptions, seeds=(0, 1, 2), spaces=("hyperbolic", "euclidean"), progress=None):
    rows = []
    for seed in seeds:
        for space in spaces:
            start = time.perf_counter()
            cfg = space if isinstance(space, ComponentSpaceConfig) else ComponentSpaceConfig.uniform(space)
            new = run_one(opts, cfg, seed)
            rows.extend(new)
            if progress is not None:
                progress(f"seed {seed} {new[0]['space']}: deepest macro-F1 {new[-1]['macro_f1']:.4f} "
                         f"({time.perf_counter() - start:.1f}s)")
    return rows


def mean_deepest(rows, space: str, depth: int) -> float:
    vals = [r["macro_f1"] for r in rows if r["space"] == space and r["level"] == depth]
    return float(np.mean(vals)) if vals else float("nan")


def to_csv(rows) -> str:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=CSV_FIELDS, lineterminator="\n")
    writer.writeheader()
    for r in rows:
        writer.writerow({k: (f"{v:.6f}" if isinstance(v, float) else v) for k, v in r.items()})
    return buf.getvalue()
