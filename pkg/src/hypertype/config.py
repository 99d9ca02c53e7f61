"""Run settings, presets and the flat ``key = value`` config format."""

from __future__ import annotations

import dataclasses
import itertools
from dataclasses import dataclass, field, fields
from pathlib import Path

from .layers import SpaceTag

PRESETS = {
    "base": {"d_M": 40, "d_C": 20, "d_S": 20, "batch_size": 900},
    "large": {"d_M": 100, "d_C": 50, "d_S": 50, "batch_size": 350},
    "xlarge": {"d_M": 200, "d_C": 100, "d_S": 100, "batch_size": 160},
}

COMPONENTS = ("encoder", "attention", "concat", "mlr")


class ConfigError(ValueError):
    """Invalid configuration; ``errors`` lists every problem found."""

    def __init__(self, errors):
        self.errors = list(errors)
        super().__init__("; ".join(self.errors))


@dataclass(frozen=True)
class ComponentSpaceConfig:
    """Geometry of each of the four swappable model components."""

    encoder: SpaceTag = SpaceTag.HYPERBOLIC
    attention: SpaceTag = SpaceTag.HYPERBOLIC
    concat: SpaceTag = SpaceTag.HYPERBOLIC
    mlr: SpaceTag = SpaceTag.HYPERBOLIC

    def __post_init__(self):
        for name in COMPONENTS:
            object.__setattr__(self, name, SpaceTag.parse(getattr(self, name)))

    @classmethod
    def uniform(cls, space) -> "ComponentSpaceConfig":
        space = SpaceTag.parse(space)
        return cls(space, space, space, space)

    @classmethod
    def all_combinations(cls):
        for combo in itertools.product(list(SpaceTag), repeat=len(COMPONENTS)):
            yield cls(*combo)

    def with_override(self, spec: str) -> "ComponentSpaceConfig":
        """Apply ``"component=space"``."""
        name, sep, space = spec.partition("=")
        name = name.strip().lower()
        if not sep or name not in COMPONENTS:
            raise ValueError(f"expected <{'|'.join(COMPONENTS)}>=<space>, got {spec!r}")
        return dataclasses.replace(self, **{name: SpaceTag.parse(space.strip())})

    def as_dict(self):
        return {name: getattr(self, name).value for name in COMPONENTS}

    def label(self) -> str:
        return ",".join(f"{k}={v[:3]}" for k, v in self.as_dict().items())


@dataclass
class ModelConfig:
    d_M: int
    d_C: int
    d_S: int
    word_dim: int
    vocab_size: int
    char_vocab_size: int
    num_labels: int
    dropout_input: float = 0.2
    dropout_concat: float = 0.1
    mention_nonlinearity: str = "tanh"
    context_nonlinearity: str = "tanh"
    char_nonlinearity: str = "identity"
    max_mention_len: int = 10
    max_rel: int = 50
    beta_init: float = 1.0

    @property
    def m(self) -> int:
        return self.d_M + self.d_C + 2 * self.d_S

    def validate(self):
        errors = []
        for name in ("d_M", "d_C", "d_S", "word_dim", "num_labels", "max_mention_len"):
            if getattr(self, name) <= 0:
                errors.append(f"{name} must be positive")
        if self.vocab_size < 2 or self.char_vocab_size < 2:
            errors.append("vocabularies must hold at least the padding and OOV entries")
        for name in ("dropout_input", "dropout_concat"):
            if not 0.0 <= getattr(self, name) < 1.0:
                errors.append(f"{name} must lie in [0, 1)")
        if self.max_rel < 0:
            errors.append("max_rel must be nonnegative")
        if errors:
            raise ConfigError(errors)
        return self


@dataclass
class Settings:
    """Every tunable of a training run; defaults are the ``base`` preset."""

    preset: str = "base"
    d_M: int = 40
    d_C: int = 20
    d_S: int = 20
    batch_size: int = 900
    mention_nonlinearity: str = "tanh"
    context_nonlinearity: str = "tanh"
    char_nonlinearity: str = "identity"
    epochs: int = 40
    crowd_cycles: int = 5
    input_dropout: float = 0.2
    concat_dropout: float = 0.1
    learning_rate: float = 0.0005
    weight_decay: float = 0.0
    max_grad_norm: float = 5.0
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    word_dim: int = 100
    max_mention_len: int = 10
    max_chars: int = 25
    max_context_len: int = 100
    max_rel: int = 50
    beta_init: float = 1.0
    embedding_space: str = "poincare"
    embedding_rescale: float = 1.0
    encoder: str = "hyperbolic"
    attention: str = "hyperbolic"
    concat: str = "hyperbolic"
    mlr: str = "hyperbolic"
    seed: int = 0

    @property
    def spaces(self) -> ComponentSpaceConfig:
        return ComponentSpaceConfig(self.encoder, self.attention, self.concat, self.mlr)

    @property
    def m(self) -> int:
        return self.d_M + self.d_C + 2 * self.d_S

    def apply_preset(self, name: str) -> "Settings":
        key = name.lower()
        if key == "custom":
            return dataclasses.replace(self, preset=key)
        if key not in PRESETS:
            raise ConfigError([f"unknown preset {name!r} (choose from {', '.join(PRESETS)})"])
        return dataclasses.replace(self, preset=key, **PRESETS[key])

    def set_spaces(self, spaces: ComponentSpaceConfig) -> "Settings":
        return dataclasses.replace(self, **spaces.as_dict())

    def validate(self) -> "Settings":
        errors = []
        for name in ("d_M", "d_C", "d_S", "batch_size", "word_dim", "max_mention_len", "max_chars", "max_context_len"):
            if getattr(self, name) <= 0:
                errors.append(f"{name} must be positive (got {getattr(self, name)})")
        for name in ("epochs", "crowd_cycles", "max_rel"):
            if getattr(self, name) < 0:
                errors.append(f"{name} must be nonnegative (got {getattr(self, name)})")
        for name in ("input_dropout", "concat_dropout"):
            if not 0.0 <= getattr(self, name) < 1.0:
                errors.append(f"{name} must lie in [0, 1) (got {getattr(self, name)})")
        if self.learning_rate <= 0:
            errors.append("learning_rate must be positive")
        if self.weight_decay < 0:
            errors.append("weight_decay must be nonnegative")
        if self.max_grad_norm <= 0:
            errors.append("max_grad_norm must be positive")
        for name in ("adam_beta1", "adam_beta2"):
            if not 0.0 <= getattr(self, name) < 1.0:
                errors.append(f"{name} must lie in [0, 1)")
        if self.adam_eps <= 0:
            errors.append("adam_eps must be positive")
        if self.embedding_rescale <= 0:
            errors.append("embedding_rescale must be positive")
        if self.embedding_space not in ("poincare", "euclidean"):
            errors.append(f"embedding_space must be poincare or euclidean (got {self.embedding_space!r})")
        for name in ("mention_nonlinearity", "context_nonlinearity", "char_nonlinearity"):
            if getattr(self, name) not in ("tanh", "identity"):
                errors.append(f"{name} must be tanh or identity")
        for name in COMPONENTS:
            if getattr(self, name) not in ("hyperbolic", "euclidean"):
                errors.append(f"{name} space must be hyperbolic or euclidean (got {getattr(self, name)!r})")
        if self.preset not in PRESETS and self.preset != "custom":
            errors.append(f"unknown preset {self.preset!r}")
        if errors:
            raise ConfigError(errors)
        return self

    def model_config(self, vocab_size: int, char_vocab_size: int, num_labels: int, word_dim: int | None = None):
        return ModelConfig(
            d_M=self.d_M,
            d_C=self.d_C,
            d_S=self.d_S,
            word_dim=word_dim or self.word_dim,
            vocab_size=vocab_size,
            char_vocab_size=char_vocab_size,
            num_labels=num_labels,
            dropout_input=self.input_dropout,
            dropout_concat=self.concat_dropout,
            mention_nonlinearity=self.mention_nonlinearity,
            context_nonlinearity=self.context_nonlinearity,
            char_nonlinearity=self.char_nonlinearity,
            max_mention_len=self.max_mention_len,
            max_rel=self.max_rel,
            beta_init=self.beta_init,
        ).validate()

    def to_text(self) -> str:
        return "".join(f"{f.name} = {getattr(self, f.name)}\n" for f in fields(self))


def _coerce(name: str, raw: str, kind):
    raw = raw.strip()
    if kind in (int, "int"):
        return int(raw)
    if kind in (float, "float"):
        return float(raw)
    return raw


def parse_settings(text: str, base: Settings | None = None) -> Settings:
    """Parse ``key = value`` lines; a ``preset`` line is expanded before the rest."""
    settings = base or Settings()
    types = {f.name: f.type for f in fields(Settings)}
    pairs = []
    errors = []
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        key = key.strip()
        if not sep:
            errors.append(f"line {lineno}: expected 'key = value'")
        elif key not in types:
            errors.append(f"line {lineno}: unknown key {key!r}")
        else:
            pairs.append((lineno, key, value))
    for lineno, key, value in pairs:
        if key == "preset":
            try:
                settings = settings.apply_preset(value.strip())
            except ConfigError as exc:
                errors.extend(f"line {lineno}: {e}" for e in exc.errors)
    updates = {}
    for lineno, key, value in pairs:
        if key == "preset":
            continue
        try:
            updates[key] = _coerce(key, value, types[key])
        except ValueError:
            errors.append(f"line {lineno}: {key} expects {types[key]}, got {value.strip()!r}")
    settings = dataclasses.replace(settings, **updates)
    try:
        settings.validate()
    except ConfigError as exc:
        errors.extend(exc.errors)
    if errors:
        raise ConfigError(errors)
    return settings


def load_settings(path: str | Path, base: Settings | None = None) -> Settings:
    return parse_settings(Path(path).read_text(encoding="utf-8"), base)
