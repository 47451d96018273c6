"""Command-line entry point: ingest, stats, merge-annotations, train, evaluate, matrix, analyze, predict.

Exit status 0 on success, 1 on validation errors, 2 on runtime failures.
"""

from __future__ import annotations

import argparse
import json
import logging
import re
import sys
import types
import typing
from dataclasses import MISSING, asdict, dataclass, field, fields
from pathlib import Path

import yaml

from . import annotate, apply, corpus, evaluation
from .embed import BackendKind, ContextualBackend, StaticTableConfig, make_static_backend
from .model import HeadKind, build_model, preset_head_config
from .train import (
    TrainConfig,
    file_digest,
    load_checkpoint,
    run_manifest,
    save_checkpoint,
    train,
    verify_data_digests,
)

logger = logging.getLogger("bengali_sa")

COMMANDS = ("ingest", "stats", "merge-annotations", "train", "evaluate", "matrix", "analyze", "predict")
FORMATS = {"text": "txt", "csv": "csv", "json": "json"}


class ConfigError(ValueError):
    pass


class _ConfigLoader(yaml.SafeLoader):
    """Safe loader that also reads exponent floats without a dot, such as ``2e-5``."""


_ConfigLoader.add_implicit_resolver(
    "tag:yaml.org,2002:float",
    re.compile(
        r"""^(?:[-+]?(?:[0-9][0-9_]*)\.[0-9_]*(?:[eE][-+]?[0-9]+)?
        |[-+]?(?:[0-9][0-9_]*)(?:[eE][-+]?[0-9]+)
        |\.[0-9_]+(?:[eE][-+][0-9]+)?
        |[-+]?\.(?:inf|Inf|INF)
        |\.(?:nan|NaN|NAN))$""",
        re.X,
    ),
    list("-+0123456789."),
)


def _load_yaml(text: str):
    return yaml.load(text, Loader=_ConfigLoader)


@dataclass
class RunConfig:
    # task and model
    backend: str = "contextual"
    head: str = "gru"
    arity: int = 3
    data_arity: int = 3
    feature_mode: str = "concat"
    max_len: int = 128
    # data
    corpus_path: str | None = None
    train_path: str | None = None
    valid_path: str | None = None
    test_path: str | None = None
    split: bool = False
    annotations_path: str | None = None
    comments_path: str | None = None
    categorized_path: str | None = None
    categories: list = field(default_factory=lambda: list(apply.DEFAULT_CATEGORIES))
    # embeddings
    contextual_checkpoint: str = "bert-base-multilingual-cased"
    vectors_path: str | None = None
    embedding_dim: int = 300
    window: int = 5
    embedding_epochs: int = 5
    min_count: int = 1
    min_n: int = 3
    max_n: int = 6
    bucket: int = 200_000
    # training
    learning_rate: float | None = None
    batch_size: int = 32
    max_epochs: int = 20
    patience: int | None = 3
    l2_coefficient: float = 0.01
    fine_tune_encoder: bool = True
    deterministic: bool = True
    seed: int = 0
    # matrix
    matrix_backends: list = field(default_factory=lambda: [b.value for b in evaluation.BACKEND_ORDER])
    matrix_heads: list = field(default_factory=lambda: [h.value for h in evaluation.HEAD_ORDER])
    matrix_arities: list = field(default_factory=lambda: [2, 3])
    # run
    checkpoint: str | None = None
    texts: list = field(default_factory=list)
    out: str = "runs"
    format: str = "text"

    def __post_init__(self):
        for name, value in asdict(self).items():
            _check_type(name, value, _field_types()[name])
        _check_choice("backend", self.backend, [b.value for b in BackendKind])
        _check_choice("head", self.head, [h.value for h in HeadKind])
        _check_choice("arity", self.arity, [2, 3])
        _check_choice("data_arity", self.data_arity, [2, 3])
        _check_choice("format", self.format, list(FORMATS))
        _check_choice("feature_mode", self.feature_mode, ["concat", "final"])
        for b in self.matrix_backends:
            _check_choice("matrix_backends", b, [k.value for k in BackendKind])
        for h in self.matrix_heads:
            _check_choice("matrix_heads", h, [k.value for k in HeadKind])
        for a in self.matrix_arities:
            _check_choice("matrix_arities", a, [2, 3])
        if self.arity == 3 and self.data_arity == 2:
            raise ConfigError("a 3-class task cannot be built from 2-class data files")
        try:
            self.train_config()
            if self.backend != BackendKind.CONTEXTUAL.value:
                self.table_config()
        except ValueError as exc:
            raise ConfigError(str(exc)) from None

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            learning_rate=self.learning_rate,
            batch_size=self.batch_size,
            max_epochs=self.max_epochs,
            patience=self.patience,
            l2_coefficient=self.l2_coefficient,
            seed=self.seed,
            fine_tune_encoder=self.fine_tune_encoder,
            deterministic=self.deterministic,
        )

    def table_config(self, kind: str | None = None) -> StaticTableConfig:
        kind = kind or self.backend
        return StaticTableConfig(
            kind=BackendKind(kind) if kind != "contextual" else BackendKind.WORD_STATIC,
            dimension=self.embedding_dim,
            window=self.window,
            epochs=self.embedding_epochs,
            min_count=self.min_count,
            min_n=self.min_n,
            max_n=self.max_n,
            bucket=self.bucket,
            seed=self.seed,
        )


def _field_types() -> dict:
    return typing.get_type_hints(RunConfig)


def _check_type(name: str, value, hint) -> None:
    allowed = typing.get_args(hint) if isinstance(hint, types.UnionType) else (hint,)
    ok = False
    for t in allowed:
        if t is type(None) and value is None:
            ok = True
        elif t is float and isinstance(value, (int, float)) and not isinstance(value, bool):
            ok = True
        elif t is int and isinstance(value, int) and not isinstance(value, bool):
            ok = True
        elif t in (str, bool, list) and isinstance(value, t):
            ok = True
    if not ok:
        names = ", ".join(getattr(t, "__name__", str(t)) for t in allowed)
        raise ConfigError(f"config key {name!r} expects {names}, got {value!r}")


def _check_choice(name, value, choices) -> None:
    if value not in choices:
        raise ConfigError(f"config key {name!r} must be one of {choices}, got {value!r}")


def read_config_file(path: str | Path, _seen: tuple = ()) -> dict:
    """Flat YAML mapping; ``include`` (path or list of paths) is merged first, then overridden."""
    path = Path(path).resolve()
    if path in _seen:
        raise ConfigError(f"config include cycle at {path}")
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    try:
        data = _load_yaml(path.read_text(encoding="utf-8")) or {}
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: unparseable config ({exc})") from None
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: config must be a key-value mapping")
    includes = data.pop("include", [])
    if isinstance(includes, str):
        includes = [includes]
    merged: dict = {}
    for inc in includes:
        merged.update(read_config_file(path.parent / inc, _seen + (path,)))
    merged.update(data)
    return merged


def resolve_config(config_path: str | None, overrides: dict) -> RunConfig:
    values = read_config_file(config_path) if config_path else {}
    values.update(overrides)
    known = {f.name for f in fields(RunConfig)}
    unknown = sorted(set(values) - known)
    if unknown:
        raise ConfigError(f"unknown config keys: {unknown}")
    return RunConfig(**values)


def _parse_set(items: list[str]) -> dict:
    out = {}
    for item in items:
        if "=" not in item:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        key, raw = item.split("=", 1)
        out[key.strip()] = _load_yaml(raw) if raw else None
    return out


class RunDir:
    """Output directory that refuses to overwrite existing files unless forced."""

    def __init__(self, path: str | Path, force: bool):
        self.path = Path(path)
        self.force = force
        self.path.mkdir(parents=True, exist_ok=True)

    def file(self, name: str) -> Path:
        target = self.path / name
        if target.exists() and not self.force:
            raise FileExistsError(f"{target} exists; pass --force to overwrite")
        return target

    def write(self, name: str, text: str) -> Path:
        target = self.file(name)
        target.write_text(text, encoding="utf-8")
        return target


def _emit(run: RunDir, stem: str, fmt: str, text: str) -> None:
    run.write(f"{stem}.{FORMATS[fmt]}", text)
    sys.stdout.write(text if text.endswith("\n") else text + "\n")


def _kv_render(mapping: dict, fmt: str) -> str:
    if fmt == "json":
        return json.dumps(mapping, indent=2, ensure_ascii=False)
    if fmt == "csv":
        return "key,value\n" + "".join(f"{k},{v}\n" for k, v in mapping.items())
    width = max(len(k) for k in mapping)
    return "".join(f"{k:<{width}}  {v}\n" for k, v in mapping.items())


def _require(cfg: RunConfig, *names: str) -> None:
    missing = [n for n in names if getattr(cfg, n) in (None, "", [])]
    if missing:
        raise ConfigError(f"missing required config: {', '.join(missing)}")


def _split_paths(cfg: RunConfig) -> dict[str, str]:
    _require(cfg, "train_path", "valid_path", "test_path")
    return {"train": cfg.train_path, "valid": cfg.valid_path, "test": cfg.test_path}


def _load_task_splits(cfg: RunConfig, arity: int) -> corpus.SplitCorpus:
    paths = _split_paths(cfg)
    splits = corpus.load_splits(list(paths.values()), cfg.data_arity)
    if arity == 2 and cfg.data_arity == 3:
        splits = corpus.derive_two_class_splits(splits)
    return splits


def _load_any_corpus(cfg: RunConfig) -> corpus.LabeledCorpus:
    if cfg.corpus_path:
        return corpus.load_corpus(cfg.corpus_path, cfg.data_arity)
    splits = corpus.load_splits(list(_split_paths(cfg).values()), cfg.data_arity)
    return corpus.concat_corpora(splits.as_dict().values())


def cmd_ingest(cfg: RunConfig, run: RunDir) -> None:
    if cfg.corpus_path and not cfg.split:
        parts = {"corpus": corpus.load_corpus(cfg.corpus_path, cfg.data_arity)}
    elif cfg.corpus_path:
        whole = corpus.load_corpus(cfg.corpus_path, cfg.data_arity)
        parts = corpus.stratified_split(whole, cfg.seed).as_dict()
    else:
        parts = corpus.load_splits(list(_split_paths(cfg).values()), cfg.data_arity).as_dict()
    summary: dict = {}
    for name, part in parts.items():
        corpus.save_corpus(part, run.file(f"{name}.tsv"))
        summary[f"{name}_entries"] = len(part)
        for label, n in corpus.label_distribution(part).items():
            summary[f"{name}_{label.serialized}"] = n
        if part.task_arity == 3:
            two = corpus.derive_two_class(part)
            corpus.save_corpus(two, run.file(f"{name}_2class.tsv"))
            summary[f"{name}_2class_entries"] = len(two)
    if len(parts) == 1:
        for topic, n in corpus.topic_distribution(parts["corpus"]).items():
            summary[f"topic_{topic}"] = n
    _emit(run, "ingest_summary", cfg.format, _kv_render(summary, cfg.format))


def cmd_stats(cfg: RunConfig, run: RunDir) -> None:
    stats = corpus.compute_stats(_load_any_corpus(cfg))
    _emit(run, "stats", cfg.format, _kv_render(stats.as_dict(), cfg.format))


def cmd_merge(cfg: RunConfig, run: RunDir) -> None:
    _require(cfg, "comments_path", "annotations_path")
    raw = annotate.load_raw_comments(cfg.comments_path)
    records = annotate.load_annotations(cfg.annotations_path)
    result = annotate.merge_annotations(raw, records)
    corpus.save_corpus(result.corpus, run.file("corpus.tsv"))
    annotate.write_review_file(result.unresolved, run.file("review.tsv"))
    discarded = ["id\treason"] + [f"{item[0]}\t{reason.value}" for item, reason in result.discarded]
    run.write("discarded.tsv", "\n".join(discarded) + "\n")
    summary = {
        **result.report.as_dict(),
        "kept_entries": len(result.corpus),
        "unresolved": len(result.unresolved),
        "discarded": len(result.discarded),
        "unannotated": len(result.unannotated),
    }
    _emit(run, "agreement", cfg.format, _kv_render(summary, cfg.format))


def _make_backend(cfg: RunConfig, kind: str, splits: corpus.SplitCorpus):
    if kind == BackendKind.CONTEXTUAL.value:
        return ContextualBackend(cfg.contextual_checkpoint, max_len=cfg.max_len, fine_tune=cfg.fine_tune_encoder)
    source = cfg.vectors_path or splits.train
    return make_static_backend(source, cfg.table_config(kind), max_len=cfg.max_len)


def cmd_train(cfg: RunConfig, run: RunDir) -> None:
    splits = _load_task_splits(cfg, cfg.arity)
    backend = _make_backend(cfg, cfg.backend, splits)
    head_cfg = preset_head_config(cfg.head, cfg.arity, feature_mode=cfg.feature_mode)
    model = build_model(backend, head_cfg, cfg.arity, seed=cfg.seed)
    run.write("parameters.json", json.dumps(model.parameter_manifest(), indent=2))
    tcfg = cfg.train_config()
    ckpt = run.file("model.pt")
    model, history = train(model, splits, tcfg)
    paths = _split_paths(cfg)
    save_checkpoint(model, ckpt, tcfg, {k: file_digest(p) for k, p in paths.items()}, history)
    run.write("history.json", json.dumps(history.to_dict(), indent=2))
    run.write("manifest.json", json.dumps(run_manifest(model, tcfg, paths, history), indent=2))
    summary = {
        "epochs": history.epochs,
        "best_epoch": history.best_epoch,
        "best_valid_accuracy": history.valid_accuracy[history.best_epoch],
        "checkpoint": str(ckpt),
    }
    _emit(run, "train_summary", cfg.format, _kv_render(summary, cfg.format))


def _load_model(cfg: RunConfig):
    _require(cfg, "checkpoint")
    return load_checkpoint(cfg.checkpoint)


def cmd_evaluate(cfg: RunConfig, run: RunDir) -> None:
    _require(cfg, "test_path")
    model = _load_model(cfg)
    test = corpus.load_corpus(cfg.test_path, cfg.data_arity)
    if model.num_classes == 2 and test.task_arity == 3:
        test = corpus.derive_two_class(test)
    verify_data_digests(model, {"test": cfg.test_path})
    report = evaluation.evaluate(model, test)
    _emit(run, "evaluation", cfg.format, evaluation.render_report(report, cfg.format))


def cmd_matrix(cfg: RunConfig, run: RunDir) -> None:
    paths = _split_paths(cfg)
    arities = list(dict.fromkeys(cfg.matrix_arities))
    splits = {a: _load_task_splits(cfg, a) for a in arities}
    vector_files = {}
    if cfg.vectors_path:
        # the vector file feeds the static backend named by ``backend``
        if cfg.backend == BackendKind.CONTEXTUAL.value:
            raise ConfigError("vectors_path needs backend set to word_static or subword_static")
        vector_files[BackendKind(cfg.backend)] = cfg.vectors_path
    factory = evaluation.default_backend_factory(
        cfg.table_config(BackendKind.WORD_STATIC.value), cfg.contextual_checkpoint, vector_files
    )
    specs = evaluation.matrix_specs(
        cfg.matrix_backends, cfg.matrix_heads, arities, cfg.train_config(), master_seed=cfg.seed
    )
    matrix = evaluation.run_matrix(
        specs,
        splits.get(2),
        splits.get(3),
        backend_factory=factory,
        head_overrides={"feature_mode": cfg.feature_mode},
        out_dir=run.path / "cells",
        data_paths={a: paths for a in arities},
    )
    for fmt in FORMATS:
        if fmt != cfg.format:
            run.write(f"results.{FORMATS[fmt]}", evaluation.render_results(matrix, fmt))
    _emit(run, "results", cfg.format, evaluation.render_results(matrix, cfg.format))
    if matrix.failures:
        for cell in matrix.failures:
            logger.error("cell %s failed:\n%s", cell.spec.name, cell.error)
        raise RuntimeError(f"{len(matrix.failures)} of {len(matrix)} matrix cells failed")


def cmd_analyze(cfg: RunConfig, run: RunDir) -> None:
    _require(cfg, "categorized_path")
    model = _load_model(cfg)
    comments = apply.load_categorized(cfg.categorized_path, cfg.categories)
    table = apply.analyze_categories(comments, model, cfg.categories)
    _emit(run, "categories", cfg.format, apply.render_category_report(table, cfg.format))


def cmd_predict(cfg: RunConfig, run: RunDir) -> None:
    texts = list(cfg.texts) or [line.strip() for line in sys.stdin if line.strip()]
    if not texts:
        raise ConfigError("no texts to classify (use --text or pipe lines on stdin)")
    model = _load_model(cfg)
    probs = model.predict_proba(texts)
    labels = model.predict_labels(texts)
    rows = [
        {"text": t, "label": l.serialized, "probabilities": [round(float(p), 6) for p in pr]}
        for t, l, pr in zip(texts, labels, probs)
    ]
    if cfg.format == "json":
        text = json.dumps(rows, indent=2, ensure_ascii=False)
    elif cfg.format == "csv":
        text = "label,text\n" + "".join(f"{r['label']},{r['text']}\n" for r in rows)
    else:
        text = "".join(f"{r['label']}\t{r['text']}\n" for r in rows)
    _emit(run, "predictions", cfg.format, text)


HANDLERS = {
    "ingest": cmd_ingest,
    "stats": cmd_stats,
    "merge-annotations": cmd_merge,
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "matrix": cmd_matrix,
    "analyze": cmd_analyze,
    "predict": cmd_predict,
}

# command-line shortcuts for common config keys
SHORTCUTS = {
    "--corpus": "corpus_path",
    "--train": "train_path",
    "--valid": "valid_path",
    "--test": "test_path",
    "--annotations": "annotations_path",
    "--comments": "comments_path",
    "--categorized": "categorized_path",
    "--checkpoint": "checkpoint",
    "--backend": "backend",
    "--head": "head",
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="bengali-sa", description="Bengali sentiment classification pipeline")
    parser.add_argument("command", choices=COMMANDS)
    parser.add_argument("--config", help="YAML config file")
    parser.add_argument("--out", help="output directory")
    parser.add_argument("--seed", type=int)
    parser.add_argument("--force", action="store_true", help="overwrite existing outputs")
    parser.add_argument("--format", choices=list(FORMATS))
    parser.add_argument("--arity", type=int, choices=[2, 3])
    parser.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override a config key")
    parser.add_argument("--text", action="append", default=[], help="text to classify (predict)")
    parser.add_argument("-v", "--verbose", action="store_true")
    for flag, key in SHORTCUTS.items():
        parser.add_argument(flag, dest=key)
    return parser


def dispatch(command: str, overrides: dict, config_path: str | None = None, force: bool = False) -> int:
    try:
        cfg = resolve_config(config_path, overrides)
        run = RunDir(cfg.out, force)
        run.write("resolved_config.yaml", yaml.safe_dump(asdict(cfg), sort_keys=True, allow_unicode=True))
        HANDLERS[command](cfg, run)
    except (ValueError, FileNotFoundError, FileExistsError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:
        logger.debug("runtime failure", exc_info=True)
        print(f"runtime failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    return 0


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(asctime)s %(name)s %(levelname)s %(message)s",
    )
    try:
        overrides = _parse_set(args.set)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    for key in ("out", "seed", "format", "arity", *SHORTCUTS.values()):
        value = getattr(args, key)
        if value is not None:
            overrides[key] = value
    if args.text:
        overrides["texts"] = args.text
    return dispatch(args.command, overrides, args.config, args.force)


if __name__ == "__main__":
    sys.exit(main())
