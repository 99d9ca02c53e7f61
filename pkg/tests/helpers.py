"""Small fixtures shared by model, training and CLI tests."""

from __future__ import annotations

import dataclasses

from hypertype.config import ComponentSpaceConfig, Settings
from hypertype.synthetic import make_task
from hypertype.train import build_classifier


def tiny_settings(spaces: ComponentSpaceConfig | None = None, **overrides) -> Settings:
    fields = dict(
        preset="custom",
        d_M=4,
        d_C=3,
        d_S=3,
        word_dim=4,
        batch_size=16,
        epochs=1,
        crowd_cycles=0,
        learning_rate=0.01,
    )
    fields.update(overrides)
    base = dataclasses.replace(Settings(), **fields)
    return base.set_spaces(spaces or ComponentSpaceConfig())


def tiny_task(seed: int = 0, n_train: int = 40, n_test: int = 12):
    return make_task(depth=2, branching=2, dim=4, n_train=n_train, n_test=n_test, seed=seed)


def tiny_model(spaces: ComponentSpaceConfig | None = None, seed: int = 0, task=None, **overrides):
    task = task or tiny_task()
    settings = tiny_settings(spaces, seed=seed, **overrides)
    return build_classifier(settings, task.inventory, task.embeddings, task.train), task, settings
