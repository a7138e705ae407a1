"""Command-line entry point: ``magneto <subcommand> [options]``.

Exit status is 0 on success, 1 for invalid input or configuration and 2 for
runtime failures.  Errors go to stderr as ``error: <ErrorClass>: <message>``.
"""

from __future__ import annotations

import argparse
import csv
import logging
import math
import sys
from dataclasses import replace
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np

from . import __version__
from .blocks import reduced_size
from .checkpoint import load_checkpoint, manifest, save_checkpoint
from .checks import gradient_suite
from .config import TINY_MODEL, ModelConfig
from .data import (
    TaggedItem,
    TagVocabulary,
    generate_synthetic,
    load_items,
    preprocess_nuswide,
    read_raw_records,
    save_items,
    split_items,
)
from .errors import MagnetoError, NonFiniteLossError
from .metrics import binarize, outlier_pick_rate, prf1, write_metrics_csv
from .model import ModelKind, build_model, copy_pretrained
from .plotting import plot_history, plot_score_distribution
from .runconfig import (
    RunConfig,
    build_run_config,
    dump_config,
    load_config_file,
    parse_assignments,
)
from .tad import augment_all, inject_irrelevant, inject_outliers
from .trainer import predict, train


EXIT_OK, EXIT_INVALID, EXIT_RUNTIME = 0, 1, 2


class UsageError(MagnetoError, ValueError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


# flag name -> config key, for the shortcuts each subcommand exposes
_SHORTCUTS = {
    "seed": "seed",
    "items": "synth.items",
    "epochs": "train.epochs",
    "lr": "train.lr",
    "batch_size": "train.batch_size",
    "kind": "kind",
    "beta": "tad.beta",
    "beta_hat": "tad.beta_hat",
    "threshold": "train.threshold",
    "outliers_per_item": "outliers_per_item",
}


def _resolve(args, base: Optional[RunConfig] = None) -> RunConfig:
    layers = []
    if getattr(args, "config", None):
        layers.append(load_config_file(args.config))
    flags = parse_assignments(getattr(args, "set", None) or [])
    for attr, key in _SHORTCUTS.items():
        value = getattr(args, attr, None)
        if value is not None:
            flags[key] = value
    layers.append(flags)
    return build_run_config(*layers, base=base)


def _fresh_dir(path) -> Path:
    """Run directories are write-once."""
    path = Path(path)
    if path.exists() and any(path.iterdir()):
        raise UsageError(f"output directory {path} already exists and is not empty")
    path.mkdir(parents=True, exist_ok=True)
    return path


def _write_config(run_dir: Path, cfg: RunConfig, command: str, extra=()) -> None:
    (run_dir / "config.cfg").write_text(
        dump_config(cfg, (("command", command),) + tuple(extra)), encoding="utf-8", newline="\n"
    )


def _load_dataset(path, vocab, require_labels=True) -> List[TaggedItem]:
    items = load_items(path, vocab, require_labels=require_labels)
    if not items:
        raise UsageError(f"{path}: no items")
    # decode image files once instead of every epoch
    return [replace(it, image=it.pixels()) if isinstance(it.image, str) else it for it in items]


def _fit_model_config(cfg: ModelConfig, items: Sequence[TaggedItem], vocab: TagVocabulary) -> ModelConfig:
    """Vocabulary size, backbone and grid size follow from the data."""
    first = items[0]
    if first.features is not None:
        rows, cols = np.asarray(first.features).shape
        g = int(round(math.sqrt(rows)))
        if g * g != rows:
            raise UsageError(f"feature rows {rows} do not form a square grid")
        if cols != cfg.d_model:
            raise UsageError(f"features are {cols}-dimensional; set model.d_model = {cols}")
        return cfg.with_(vocab_size=vocab.size, backbone="precomputed", grid_size=g)
    side = first.pixels().shape[-1]
    g = reduced_size(side, len(cfg.conv_channels))
    return cfg.with_(vocab_size=vocab.size, backbone="tiny_conv", grid_size=g)


def _report(run_dir: Path, kind, store, mcfg, cfg: RunConfig, splits, history=None, title=None):
    rows = []
    for split, items, flags in splits:
        if not items:
            continue
        pr = predict(kind, items, store, mcfg, outlier_flags=flags)
        pred = binarize(pr.scores, cfg.train.threshold, pr.mask)
        m = prf1(pred, pr.labels, pr.mask)
        if pr.outliers is not None and pr.outliers.any():
            m.outlier_item_rate = outlier_pick_rate(pred, pr.outliers, pr.mask)
        rows.append((run_dir.name, split, m))
        plot_score_distribution(pr.scores, pr.labels, pr.mask, run_dir / f"scores_{split}.png",
                                cfg.train.threshold, pr.outliers)
    if rows:
        write_metrics_csv(run_dir / "metrics.csv", rows)
    if history is not None:
        history.to_csv(run_dir / "history.csv")
        plot_history(history, run_dir / "history.png", title)
    return rows


# --------------------------------------------------------------------------- subcommands


def cmd_synth(args) -> int:
    cfg = _resolve(args)
    out = _fresh_dir(args.out)
    items, vocab = generate_synthetic(cfg.synthetic())
    train_items, val_items = split_items(items, cfg.val_fraction, cfg.seed)
    vocab.save(out / "vocab.txt")
    save_items(train_items, out / "train.jsonl", vocab)
    save_items(val_items, out / "val.jsonl", vocab)
    _write_config(out, cfg, "synth")
    print(f"wrote {len(train_items)} train and {len(val_items)} val items to {out}")
    return EXIT_OK


def cmd_preprocess(args) -> int:
    cfg = _resolve(args)
    out = _fresh_dir(args.out)
    records = read_raw_records(args.input)
    items, vocab, rejected = preprocess_nuswide(records)
    vocab.save(out / "vocab.txt")
    save_items(items, out / "items.jsonl", vocab)
    with open(out / "rejections.csv", "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["index", "id", "reason"])
        for r in rejected:
            w.writerow([r.index, "" if r.item_id is None else r.item_id, r.reason])
    _write_config(out, cfg, "preprocess", (("input", str(args.input)),))
    print(f"kept {len(items)} of {len(records)} records; {len(rejected)} malformed")
    return EXIT_OK


def _train_like(args, stage: str) -> int:
    cfg = _resolve(args)
    vocab = TagVocabulary.load(args.vocab)
    require = stage != "pretrain"
    train_items = _load_dataset(args.train, vocab, require_labels=require)
    val_items = _load_dataset(args.val, vocab) if args.val else None
    init_store = None
    if stage == "finetune":
        pre_store, pre_kind, pre_cfg = load_checkpoint(args.init)
        if pre_kind is not ModelKind.MAGNETO_PRETRAIN:
            raise UsageError(f"{args.init} holds a {pre_kind.value} model, not MAGNETO_PRETRAIN")
        cfg = replace(cfg, model=pre_cfg)
        kind = ModelKind.MAGNETO
    else:
        kind = ModelKind.MAGNETO_PRETRAIN if stage == "pretrain" else ModelKind.parse(cfg.kind)
    mcfg = _fit_model_config(cfg.model, train_items, vocab)
    if stage == "finetune":
        if mcfg != cfg.model:
            raise UsageError("fine-tuning data does not match the pre-trained model configuration")
        init_store = copy_pretrained(pre_store, build_model(kind, mcfg, seed=cfg.seed))
    cfg = replace(cfg, model=mcfg, kind=kind.value, train=replace(cfg.train, stage=stage))
    run_dir = _fresh_dir(args.run_dir)
    _write_config(run_dir, cfg, stage)

    store, history = train(kind, train_items, val_items, mcfg, cfg.training(), vocab, store=init_store)
    save_checkpoint(run_dir / "model.mgnt", store, kind, mcfg)
    if stage == "pretrain":
        # relevance metrics on the same injected copies the trainer monitored
        inject = lambda items, k: inject_irrelevant(  # noqa: E731
            items, vocab, cfg.train.pretrain_inject_ratio, np.random.default_rng([cfg.seed, k]),
            max_tags=mcfg.max_tags)
        splits = [("train_relevance", inject(train_items, 8), None)]
        if val_items:
            splits.append(("val_relevance", inject(val_items, 7), None))
    else:
        splits = [("train", train_items, None), ("val", val_items, None)]
    rows = _report(run_dir, kind, store, mcfg, cfg, splits, history, f"{kind.value} ({stage})")
    for _, split, m in rows:
        print(f"{split}: precision {m.precision:.4f} recall {m.recall:.4f} f1 {m.f1:.4f}")
    print(f"run written to {run_dir}")
    return EXIT_OK


def cmd_train(args) -> int:
    return _train_like(args, "supervised")


def cmd_pretrain(args) -> int:
    return _train_like(args, "pretrain")


def cmd_finetune(args) -> int:
    return _train_like(args, "finetune")


def cmd_eval(args) -> int:
    store, kind, mcfg = load_checkpoint(args.checkpoint)
    cfg = replace(_resolve(args), model=mcfg, kind=kind.value)
    vocab = TagVocabulary.load(args.vocab)
    if vocab.size != mcfg.vocab_size:
        raise UsageError(f"vocabulary has {vocab.size} ids, checkpoint expects {mcfg.vocab_size}")
    items = _load_dataset(args.data, vocab)
    flags = None
    if cfg.outliers_per_item:
        items, flags = inject_outliers(items, cfg.outliers_per_item, vocab,
                                       np.random.default_rng([cfg.seed, 99]), max_tags=mcfg.max_tags)
    out = _fresh_dir(args.out)
    _write_config(out, cfg, "eval", (("checkpoint", str(args.checkpoint)), ("data", str(args.data))))
    _report(out, kind, store, mcfg, cfg, [(args.split, items, flags)])
    sys.stdout.write((out / "metrics.csv").read_text(encoding="utf-8"))
    return EXIT_OK


def cmd_augment(args) -> int:
    cfg = _resolve(args)
    vocab = TagVocabulary.load(args.vocab)
    items = load_items(args.data, vocab)
    rng = np.random.default_rng([cfg.seed, 3])
    out_items = augment_all(items, vocab, cfg.tad, rng, max_tags=cfg.model.max_tags)
    out = Path(args.out)
    if out.exists():
        raise UsageError(f"{out} already exists")
    out.parent.mkdir(parents=True, exist_ok=True)
    save_items(out_items, out, vocab, write_images=False)
    before = sum(len(it.tags) for it in items)
    after = sum(len(it.tags) for it in out_items)
    print(f"augmented {len(items)} items ({before} -> {after} tags) -> {out}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    cfg = _resolve(args, base=RunConfig(model=TINY_MODEL))

    def progress(name, rep):
        print(f"== {name}")
        print(rep.format_table())
        sys.stdout.flush()

    reports = gradient_suite(cfg.model, seed=cfg.seed, eps=cfg.gradcheck_eps, tol=cfg.gradcheck_tol,
                             progress=progress)
    ok = all(r.passed for r in reports.values())
    print(f"gradcheck: {'PASS' if ok else 'FAIL'} ({len(reports)} cases)")
    if not ok:
        print("error: GradientCheckFailed: " + ", ".join(n for n, r in reports.items() if not r.passed),
              file=sys.stderr)
    return EXIT_OK if ok else EXIT_RUNTIME


def cmd_inspect(args) -> int:
    rows = manifest(args.checkpoint)
    w = csv.writer(sys.stdout, delimiter="\t", lineterminator="\n")
    w.writerow(["name", "dtype", "shape", "offset"])
    for name, dtype, shape, offset in rows:
        w.writerow([name, dtype, "x".join(map(str, shape)) or "scalar", offset])
    return EXIT_OK


# --------------------------------------------------------------------------- parser


def _common(p, shortcuts=()):
    p.add_argument("--config", help="flat key = value configuration file")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one configuration key")
    p.add_argument("--seed", type=int, help="seed for every random stream")
    types = {"items": int, "epochs": int, "batch_size": int, "outliers_per_item": int,
             "lr": float, "beta": float, "beta_hat": float, "threshold": float, "kind": str}
    for name in shortcuts:
        p.add_argument("--" + name.replace("_", "-"), dest=name, type=types[name],
                       help=f"shortcut for {_SHORTCUTS[name]}")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="magneto", description="Tag summarization with a gated two-stream model.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-q", "--quiet", action="store_true", help="suppress per-epoch progress")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth", help="generate a planted-pattern dataset")
    _common(p, ("items",))
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("preprocess", help="filter raw NUS-WIDE-style records")
    _common(p)
    p.add_argument("--input", required=True, help="line-delimited raw records")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_preprocess)

    train_flags = ("epochs", "lr", "batch_size", "beta", "beta_hat", "threshold")
    for name, func, helptext in (("train", cmd_train, "supervised training"),
                                 ("pretrain", cmd_pretrain, "relevance pre-training of the gate-free model"),
                                 ("finetune", cmd_finetune, "supervised fine-tuning from a pre-trained run")):
        p = sub.add_parser(name, help=helptext)
        _common(p, train_flags + (("kind",) if name == "train" else ()))
        p.add_argument("--train", required=True, help="training items (JSON lines)")
        p.add_argument("--val", help="validation items")
        p.add_argument("--vocab", required=True)
        p.add_argument("--run-dir", required=True)
        if name == "finetune":
            p.add_argument("--init", required=True, help="checkpoint written by pretrain")
        p.set_defaults(func=func)

    p = sub.add_parser("eval", help="score a dataset with a checkpoint")
    _common(p, ("threshold", "outliers_per_item"))
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--vocab", required=True)
    p.add_argument("--out", required=True, help="directory for metrics.csv and figures")
    p.add_argument("--split", default="eval", help="split name recorded in metrics.csv")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("augment", help="apply tag adding & dropping to a dataset file")
    _common(p, ("beta", "beta_hat"))
    p.add_argument("--data", required=True)
    p.add_argument("--vocab", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_augment)

    p = sub.add_parser("gradcheck", help="finite-difference check of every block and the full objective")
    _common(p)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("inspect", help="print a checkpoint manifest")
    p.add_argument("checkpoint")
    p.set_defaults(func=cmd_inspect)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(f"error: usage: {exc}", file=sys.stderr)
        return EXIT_INVALID
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                        format="%(name)s: %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except (NonFiniteLossError, OSError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except (MagnetoError, ValueError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
