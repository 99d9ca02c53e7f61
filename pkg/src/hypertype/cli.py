"""Command-line entry point: ``hypertype {train,eval,inspect,gradcheck,bench}``.

Exit codes: 0 success, 1 usage or configuration error, 2 data or checkpoint
error, 3 numeric failure (including a failed gradient check).
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import checkpoint
from . import geometry as geo
from .autodiff import NumericError
from .bench import BenchOptions, mean_deepest, run_bench, to_csv
from .config import COMPONENTS, PRESETS, ComponentSpaceConfig, ConfigError, Settings, load_settings
from .data import (
    DataError,
    LabelInventory,
    attach_labels,
    load_embeddings,
    load_examples,
    load_label_inventory,
    random_embeddings,
)
from .gradcheck import run_gradcheck
from .layers import SpaceTag
from .train import evaluate_model, load_run, train_model

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3

log = logging.getLogger("hypertype")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def parse_seeds(text: str) -> list[int]:
    """``"0,1,2"`` or ``"0-9"`` (inclusive) or a mix of both."""
    seeds = []
    try:
        for part in text.split(","):
            part = part.strip()
            if not part:
                continue
            lo, sep, hi = part.partition("-")
            if sep and lo:
                seeds.extend(range(int(lo), int(hi) + 1))
            else:
                seeds.append(int(part))
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad seed list {text!r}") from None
    if not seeds:
        raise argparse.ArgumentTypeError("empty seed list")
    return seeds


def _component_space(text: str) -> str:
    name, sep, space = text.partition("=")
    if not sep or name.strip().lower() not in COMPONENTS or space.strip().lower() not in ("hyperbolic", "euclidean"):
        raise argparse.ArgumentTypeError(f"expected {'|'.join(COMPONENTS)}=hyperbolic|euclidean, got {text!r}")
    return text


def _add_model_flags(p: argparse.ArgumentParser):
    p.add_argument("--config", help="flat 'key = value' settings file")
    p.add_argument("--preset", choices=sorted(PRESETS), help="dimension preset")
    p.add_argument("--space", choices=("hyperbolic", "euclidean"), help="put every component in this space")
    p.add_argument(
        "--component-space", action="append", default=[], type=_component_space, metavar="COMPONENT=SPACE",
        help="override one component (repeatable)",
    )


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="hypertype", description="Hyperbolic fine-grained entity typing.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("train", help="train a model")
    _add_model_flags(p)
    p.add_argument("--train", required=True, help="training set (JSON lines)")
    p.add_argument("--dev", help="validation set used for model selection")
    p.add_argument("--crowd", help="crowdsourced split interleaved after every epoch")
    p.add_argument("--labels", help="label inventory (label<TAB>granularity); default: labels seen in --train, all ultra")
    p.add_argument("--embeddings", help="word embedding file; default: random vectors")
    p.add_argument("--embedding-space", choices=("poincare", "euclidean"))
    p.add_argument("--seeds", type=parse_seeds, help="run once per seed, e.g. 0,1,2")
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--out", required=True, help="run directory")

    p = sub.add_parser("eval", help="score a checkpoint on a dataset")
    p.add_argument("checkpoint")
    p.add_argument("data")
    p.add_argument("--json", action="store_true", help="print scores as JSON")

    p = sub.add_parser("inspect", help="nearest labels of a label in the classifier")
    p.add_argument("checkpoint")
    p.add_argument("label")
    p.add_argument("-k", type=int, default=10)

    p = sub.add_parser("gradcheck", help="finite-difference check of every layer and the loss")
    p.add_argument("--config")
    p.add_argument("--preset", choices=sorted(PRESETS), default=None)
    p.add_argument("--seeds", type=parse_seeds, default=list(range(10)))
    p.add_argument("--word-dim", type=int)

    p = sub.add_parser("bench", help="hyperbolic vs euclidean on a synthetic label tree")
    defaults = BenchOptions()
    p.add_argument("--depth", type=int, default=defaults.depth)
    p.add_argument("--branching", type=int, default=defaults.branching)
    p.add_argument("--dim", type=int, default=defaults.dim)
    p.add_argument("--n-train", type=int, default=defaults.n_train)
    p.add_argument("--n-test", type=int, default=defaults.n_test)
    p.add_argument("--epochs", type=int, default=defaults.epochs)
    p.add_argument("--lr", type=float, default=defaults.learning_rate)
    p.add_argument("--batch-size", type=int, default=defaults.batch_size)
    p.add_argument("--seeds", type=parse_seeds, default=[0, 1, 2])
    p.add_argument("--space", choices=("hyperbolic", "euclidean"), help="run only this space")
    p.add_argument(
        "--component-space", action="append", default=[], type=_component_space, metavar="COMPONENT=SPACE",
        help="add a mixed configuration (starting from all-hyperbolic)",
    )
    p.add_argument("--out", help="CSV path (default: stdout)")
    return parser


# ------------------------------------------------------------------ helpers


def resolve_settings(args) -> Settings:
    settings = Settings()
    if getattr(args, "preset", None):
        settings = settings.apply_preset(args.preset)
    if getattr(args, "config", None):
        try:
            settings = load_settings(args.config, settings)
        except OSError as exc:
            raise UsageError(f"cannot read config: {exc}") from None
        if getattr(args, "preset", None):
            settings = settings.apply_preset(args.preset)
    if getattr(args, "space", None):
        settings = settings.set_spaces(ComponentSpaceConfig.uniform(args.space))
    spaces = settings.spaces
    for spec in getattr(args, "component_space", []):
        spaces = spaces.with_override(spec)
    settings = settings.set_spaces(spaces)
    for flag, key in (("epochs", "epochs"), ("batch_size", "batch_size"), ("lr", "learning_rate"), ("embedding_space", "embedding_space")):
        value = getattr(args, flag, None)
        if value is not None:
            settings = _replace(settings, **{key: value})
    return settings.validate()


def _replace(settings, **kw):
    return dataclasses.replace(settings, **kw)


def _inventory_and_data(args):
    if args.labels:
        inventory = load_label_inventory(args.labels)
        train = load_examples(args.train, inventory)
    else:
        raw = load_examples(args.train, None)
        inventory = LabelInventory.from_labels(sorted({l for ex in raw for l in ex.label_names}))
        train = attach_labels(raw, inventory)
    if not train:
        raise DataError(f"{args.train}: no examples")
    dev = load_examples(args.dev, inventory) if args.dev else None
    crowd = load_examples(args.crowd, inventory) if args.crowd else None
    return inventory, train, dev, crowd


def _embeddings(args, settings, splits):
    if args.embeddings:
        return load_embeddings(args.embeddings, settings.embedding_space, settings.embedding_rescale)
    tokens = sorted({t for split in splits if split for ex in split for t in ex.context_tokens})
    return random_embeddings(tokens, settings.word_dim, settings.seed, settings.embedding_space)


def _epoch_line(seed, entry) -> str:
    line = f"seed {seed} epoch {entry.epoch:3d}  loss {entry.loss:.4f}  norm {entry.mean_norm:.3f}"
    if entry.scores is not None:
        t = entry.scores
        line += "  ma-F1 total {:.4f} coarse {:.4f} fine {:.4f} ultra {:.4f}".format(
            *(t[level]["macro"]["f1"] for level in ("total", "coarse", "fine", "ultra"))
        )
    return line + f"  ({entry.seconds:.1f}s)"


# ----------------------------------------------------------------- commands


def cmd_train(args, out=sys.stdout) -> int:
    settings = resolve_settings(args)
    inventory, train, dev, crowd = _inventory_and_data(args)
    seeds = args.seeds or [settings.seed]
    root = Path(args.out)
    summary = []
    for seed in seeds:
        run_settings = _replace(settings, seed=seed)
        embeddings = _embeddings(args, run_settings, (train, dev, crowd))
        run_dir = root if len(seeds) == 1 else root / f"seed-{seed}"
        run_dir.mkdir(parents=True, exist_ok=True)
        checkpoint.atomic_write_text(run_dir / "config.txt", run_settings.to_text())
        result = train_model(
            run_settings, train, inventory, embeddings, dev=dev, crowd=crowd, out_dir=run_dir,
            on_epoch=lambda e, s=seed: print(_epoch_line(s, e), file=out, flush=True),
        )
        if result.best_scores is not None:
            summary.append(result.best_scores)
            print(f"seed {seed} best epoch {result.best_epoch}: total ma-F1 {result.best_score:.4f}", file=out)
    if summary:
        mean = {
            level: float(np.mean([s.level(level).macro.f1 for s in summary]))
            for level in ("total", "coarse", "fine", "ultra")
        }
        report = {"seeds": seeds, "mean_dev_macro_f1": mean}
        checkpoint.atomic_write_text(root / "summary.json", json.dumps(report, indent=2, sort_keys=True) + "\n")
        print("mean dev ma-F1 " + " ".join(f"{k} {v:.4f}" for k, v in mean.items()), file=out)
    return EXIT_OK


def cmd_eval(args, out=sys.stdout) -> int:
    run = load_run(args.checkpoint)
    examples = load_examples(args.data, run.inventory)
    if not examples:
        raise DataError(f"{args.data}: no examples to evaluate")
    scores, _ = evaluate_model(run.model, examples, run.inventory)
    print(scores.to_json() if args.json else scores.to_text(), file=out)
    return EXIT_OK


def nearest_labels(run, label: str, k: int) -> list[tuple[str, float]]:
    inventory = run.inventory
    if label not in inventory.index:
        raise DataError(f"unknown label {label!r}")
    if k < 0:
        raise UsageError("-k must be nonnegative")
    p = run.model.params["mlr.p"].value
    i = inventory.index[label]
    if run.model.spaces.mlr == SpaceTag.HYPERBOLIC:
        d = geo.distance(p[i], p)
    else:
        d = np.linalg.norm(p - p[i], axis=-1)
    order = [j for j in np.argsort(d, kind="stable") if j != i]
    return [(inventory.labels[j], float(d[j])) for j in order[:k]]


def cmd_inspect(args, out=sys.stdout) -> int:
    run = load_run(args.checkpoint)
    for name, dist in nearest_labels(run, args.label, args.k):
        print(f"{name} {dist:.2f}", file=out)
    return EXIT_OK


def cmd_gradcheck(args, out=sys.stdout, grad_hook=None) -> int:
    settings = resolve_settings(args)
    word_dim = args.word_dim or settings.word_dim
    preset = settings.preset if settings.preset in PRESETS else "base"
    rows = run_gradcheck(args.seeds, preset, word_dim, grad_hook=grad_hook)
    for row in rows:
        print(row.line(), file=out)
    failed = [row.layer for row in rows if not row.passed]
    if failed:
        print(f"gradient check FAILED for: {', '.join(failed)}", file=out)
        return EXIT_NUMERIC
    print("gradient check passed", file=out)
    return EXIT_OK


def cmd_bench(args, out=sys.stdout) -> int:
    if args.depth < 2 or args.branching < 2:
        raise UsageError("bench needs --depth >= 2 and --branching >= 2")
    opts = BenchOptions(
        depth=args.depth, branching=args.branching, dim=args.dim, n_train=args.n_train, n_test=args.n_test,
        epochs=args.epochs, batch_size=args.batch_size, learning_rate=args.lr,
    )
    spaces = [args.space] if args.space else ["hyperbolic", "euclidean"]
    cfg = ComponentSpaceConfig.uniform("hyperbolic")
    for spec in args.component_space:
        cfg = cfg.with_override(spec)
    if args.component_space:
        spaces.append(cfg)
    rows = run_bench(opts, args.seeds, spaces, progress=lambda m: print(m, file=sys.stderr, flush=True))
    text = to_csv(rows)
    if args.out:
        checkpoint.atomic_write_text(args.out, text)
    else:
        out.write(text)
    names = sorted({r["space"] for r in rows})
    summary = ", ".join(f"{n} {mean_deepest(rows, n, opts.depth):.4f}" for n in names)
    print(f"mean deepest-level macro-F1: {summary}", file=sys.stderr)
    return EXIT_OK


COMMANDS = {"train": cmd_train, "eval": cmd_eval, "inspect": cmd_inspect, "gradcheck": cmd_gradcheck, "bench": cmd_bench}


def main(argv=None, out=None) -> int:
    out = out or sys.stdout
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return COMMANDS[args.command](args, out)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except ConfigError as exc:
        print("configuration errors:", file=sys.stderr)
        for err in exc.errors:
            print(f"  - {err}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, checkpoint.CheckpointError, FileNotFoundError, IsADirectoryError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (NumericError, geo.InvalidValueError, FloatingPointError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
