"""Command-line entry point.

Exit codes: 0 success, 2 bad input / format / config, 3 training failure,
4 checkpoint or inventory problem. Data goes to stdout, logs to stderr.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

from . import corpus
from .checkpoint import load_checkpoint, save_checkpoint
from .errors import (
    ConceptNormError,
    ConfigError,
    CorruptCheckpoint,
    Diverged,
    EmptyDataset,
    EmptyEval,
    FormatError,
    InvalidParams,
    InventoryMismatch,
    LexiconError,
    MissingLexicon,
    NotInitialized,
    TooSmall,
)
from .evaluator import accuracy, error_report, fold_average, format_report, predict_outcomes, report_tsv
from .preprocess import PreprocessConfig, load_lexicon, preprocess
from .trainer import TrainConfig, random_search, read_kv_file, read_search_config, train

log = logging.getLogger("conceptnorm")

EXIT_OK, EXIT_INPUT, EXIT_TRAIN, EXIT_CHECKPOINT = 0, 2, 3, 4

_EXIT_CODES = [
    ((Diverged,), EXIT_TRAIN),
    ((CorruptCheckpoint, InventoryMismatch, NotInitialized), EXIT_CHECKPOINT),
    (
        (FormatError, ConfigError, MissingLexicon, LexiconError, EmptyDataset, EmptyEval, InvalidParams, TooSmall),
        EXIT_INPUT,
    ),
]


def _folds_arg(text: str) -> list[int]:
    try:
        folds = sorted({int(x) for x in text.split(",") if x.strip()})
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated fold numbers, got {text!r}") from None
    if not folds or folds[0] < 0:
        raise argparse.ArgumentTypeError("fold numbers must be >= 0")
    return folds


def _select_folds(foldset: corpus.FoldSet, wanted: list[int] | None) -> list[int]:
    if wanted is None:
        return list(range(len(foldset)))
    missing = [k for k in wanted if k >= len(foldset)]
    if missing:
        raise InvalidParams(f"dataset has {len(foldset)} fold(s); no fold {missing[0]}")
    return wanted


def _preprocess_config(path: str | None) -> PreprocessConfig:
    if path is None:
        return PreprocessConfig()
    raw = read_kv_file(path)
    fields = {f.name for f in dataclasses.fields(PreprocessConfig)}
    kw: dict = {}
    for key, value in raw.items():
        if key not in fields:
            raise ConfigError(f"unknown config key {key!r}", key=key)
        if key == "lexicon_paths":
            kw[key] = tuple(p.strip() for p in value.split(",") if p.strip())
        elif value.lower() in ("true", "1", "yes", "on"):
            kw[key] = True
        elif value.lower() in ("false", "0", "no", "off"):
            kw[key] = False
        else:
            raise ConfigError(f"bad value for {key!r}: {value!r}", key=key)
    return PreprocessConfig(**kw)


def _ensure_preprocessed(foldset: corpus.FoldSet, cfg: PreprocessConfig) -> corpus.FoldSet:
    if all(r.processed_text is not None for r in foldset.records()):
        return foldset
    log.info("dataset has unprocessed mentions; preprocessing them now")
    lexicon = load_lexicon(cfg) if cfg.expand else None
    return foldset.map_records(
        lambda r: r
        if r.processed_text is not None
        else dataclasses.replace(r, processed_text=preprocess(r.raw_text, cfg, lexicon))
    )


# ---------------------------------------------------------------- commands


def run_preprocess(args) -> int:
    cfg = _preprocess_config(args.config)
    inventory, foldset = corpus.load_dataset(args.data)
    processed = corpus.preprocess_foldset(foldset, cfg)
    corpus.save_dataset(args.out, inventory, processed)
    print(f"{args.out}\t{len(processed.records())} mentions\t{len(processed)} fold(s)")
    return EXIT_OK


def run_generate(args) -> int:
    noise = args.noise
    if noise is None:
        noise = corpus.SyntheticNoise()
    inventory, foldset = corpus.generate_synthetic(args.concepts, args.mentions, noise, seed=args.seed or 0)
    corpus.save_dataset(args.out, inventory, foldset)
    fold = foldset[0]
    print(f"{args.out}\t{len(inventory)} concepts\t{len(fold.train)} train\t{len(fold.test)} test")
    return EXIT_OK


def _train_config(args) -> TrainConfig:
    cfg = TrainConfig.from_file(args.config) if args.config else TrainConfig()
    if args.seed is not None:
        cfg = dataclasses.replace(cfg, seed=args.seed)
    return cfg


def run_train(args) -> int:
    cfg = _train_config(args)
    inventory, foldset = corpus.load_dataset(args.data)
    pp_cfg = PreprocessConfig()
    foldset = _ensure_preprocessed(foldset, pp_cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.txt").write_text(cfg.to_text(), encoding="utf-8")
    for k in _select_folds(foldset, args.folds):
        fold_dir = out / f"fold_{k}"
        fold_dir.mkdir(exist_ok=True)
        try:
            model, report = train(foldset[k].train, cfg, inventory, fold=k, preprocess_config=pp_cfg)
        except Diverged as exc:
            if exc.report is not None:
                exc.report.save(fold_dir / "train_report.json")
            raise
        save_checkpoint(model, fold_dir / "model.ckpt")
        report.save(fold_dir / "train_report.json")
        log.info("fold %d: wall time %.2fs", k, report.wall_time)
        print(
            f"fold {k}\tepochs {len(report.epochs)}\tbest_epoch {report.best_epoch}\t"
            f"val_accuracy {report.best_val_accuracy:.4f}\t{fold_dir / 'model.ckpt'}"
        )
    return EXIT_OK


def run_search(args) -> int:
    if not args.config:
        raise ConfigError("search needs --config with the hyperparameter space")
    space, base = read_search_config(args.config)
    if args.seed is not None:
        base = dataclasses.replace(base, seed=args.seed)
        space = dataclasses.replace(space, search_seed=args.seed)
    inventory, foldset = corpus.load_dataset(args.data)
    foldset = _ensure_preprocessed(foldset, PreprocessConfig())
    k = _select_folds(foldset, args.folds)[0]
    best, trials = random_search(space, foldset[k].train, inventory, base, fold=k, workers=args.workers)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(best.to_text(), encoding="utf-8")
    log_path = out.with_name(out.name + ".trials.json")
    log_path.write_text(json.dumps([t.to_dict() for t in trials], indent=2, sort_keys=True) + "\n", encoding="utf-8")
    for t in trials:
        status = t.error or f"{t.report.best_val_accuracy:.4f}"
        print(f"trial {t.index}\t{status}\tlearning_rate={t.config.learning_rate!r}\tbatch_size={t.config.batch_size}\tdim={t.config.dim}")
    print(f"best\t{out}")
    return EXIT_OK


def _fold_checkpoint(path: Path, k: int) -> Path:
    if path.is_dir():
        return path / f"fold_{k}" / "model.ckpt"
    return path


def run_evaluate(args) -> int:
    inventory, foldset = corpus.load_dataset(args.data)
    ckpt = Path(args.checkpoint)
    out = Path(args.out) if args.out else (ckpt if ckpt.is_dir() else ckpt.parent)
    results = []
    for k in _select_folds(foldset, args.folds):
        model = load_checkpoint(_fold_checkpoint(ckpt, k), inventory=inventory)
        fs = _ensure_preprocessed(corpus.FoldSet([foldset[k]]), model.preprocess_config)
        fold = fs[0]
        result = accuracy(predict_outcomes(model, fold.test))
        results.append(result)
        buckets = error_report(result.outcomes, fold.train, getattr(model.encoder, "vocab", None), inventory)
        fold_out = out / f"fold_{k}"
        fold_out.mkdir(parents=True, exist_ok=True)
        (fold_out / "errors.txt").write_text(format_report(buckets, inventory, result.n_total), encoding="utf-8")
        (fold_out / "errors.tsv").write_text(report_tsv(buckets, inventory), encoding="utf-8")
        print(f"fold {k}\t{result.accuracy:.4f}\t{result.n_correct}/{result.n_total}")
    print(f"mean\t{fold_average(results):.4f}")
    return EXIT_OK


def run_predict(args) -> int:
    ckpt = Path(args.checkpoint)
    model = load_checkpoint(_fold_checkpoint(ckpt, 0) if ckpt.is_dir() else ckpt)
    if args.text:
        lines = list(args.text)
    else:
        stream = open(args.data, encoding="utf-8") if args.data else sys.stdin
        with stream:
            lines = [line.rstrip("\r\n") for line in stream]
    cfg = model.preprocess_config
    lexicon = load_lexicon(cfg) if cfg.expand else None
    texts = [preprocess(t, cfg, lexicon) for t in lines]
    print("input\trank\tconcept_id\tpreferred_term\tsimilarity")
    if not texts:
        return EXIT_OK
    inv = model.inventory
    for raw, ranked in zip(lines, model.topk(texts, args.topk)):
        shown = raw.replace("\t", " ")
        for rank, (idx, score) in enumerate(ranked, 1):
            term = inv.term(idx) or ""
            print(f"{shown}\t{rank}\t{inv.concept_id(idx)}\t{term}\t{score:.6f}")
    return EXIT_OK


# ------------------------------------------------------------------ parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="conceptnorm", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, func, help_text):
        p = sub.add_parser(name, help=help_text)
        p.set_defaults(func=func)
        p.add_argument("--seed", type=int, default=None, help="random seed (overrides config)")
        return p

    p = add("preprocess", run_preprocess, "normalize mention text in a dataset")
    p.add_argument("--data", required=True, help="input dataset directory")
    p.add_argument("--out", required=True, help="output dataset directory")
    p.add_argument("--config", help="preprocessing config (key = value)")

    p = add("generate", run_generate, "write a synthetic dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--concepts", type=int, default=20)
    p.add_argument("--mentions", type=int, default=200)
    p.add_argument("--noise", type=float, default=None, help="uniform noise level in [0, 1]")

    p = add("train", run_train, "train one model per fold")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True, help="output directory for checkpoints and reports")
    p.add_argument("--config", help="training config (key = value)")
    p.add_argument("--folds", type=_folds_arg, help="comma-separated folds (default: all)")

    p = add("search", run_search, "random hyperparameter search on one fold")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True, help="where to write the best config")
    p.add_argument("--config", required=True, help="search space config")
    p.add_argument("--folds", type=_folds_arg, help="fold to search on (default 0)")
    p.add_argument("--workers", type=int, default=1)

    p = add("evaluate", run_evaluate, "score checkpoints on test splits")
    p.add_argument("--checkpoint", required=True, help="train output directory or a single .ckpt")
    p.add_argument("--data", required=True)
    p.add_argument("--out", help="where to write error reports (default: next to the checkpoints)")
    p.add_argument("--folds", type=_folds_arg)

    p = add("predict", run_predict, "top-k concepts for free-text mentions")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--topk", type=int, default=5)
    p.add_argument("--data", help="file with one mention per line (default: stdin)")
    p.add_argument("text", nargs="*", help="mentions to normalize")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    if getattr(args, "topk", 1) < 1:
        parser.error("--topk must be >= 1")
    try:
        return args.func(args)
    except ConceptNormError as exc:
        for types, code in _EXIT_CODES:
            if isinstance(exc, types):
                print(f"error: {exc}", file=sys.stderr)
                return code
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
