"""Confusion-matrix evaluation and the backend x head x task experiment matrix."""

from __future__ import annotations

import csv
import io
import json
import logging
import traceback
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Iterable, Mapping, Protocol, Sequence

import numpy as np

from .corpus import LabeledCorpus, SentimentLabel, SplitCorpus, class_index, labels_for_arity
from .embed import (
    DEFAULT_CHECKPOINT,
    BackendKind,
    ContextualBackend,
    EmbeddingBackend,
    StaticTableConfig,
    make_static_backend,
)
from .model import HeadKind, build_model, preset_head_config
from .train import TrainConfig, file_digest, run_manifest, save_checkpoint, train

logger = logging.getLogger(__name__)

BACKEND_ORDER = (BackendKind.WORD_STATIC, BackendKind.SUBWORD_STATIC, BackendKind.CONTEXTUAL)
HEAD_ORDER = (HeadKind.GRU, HeadKind.LSTM, HeadKind.CNN)
BACKEND_NAMES = {
    BackendKind.WORD_STATIC: "Word2Vec",
    BackendKind.SUBWORD_STATIC: "fastText",
    BackendKind.CONTEXTUAL: "BERT",
}

# Published test accuracies: (backend, head, arity) -> accuracy.
REFERENCE_ACCURACY = {
    (BackendKind.WORD_STATIC, HeadKind.GRU, 2): 0.67,
    (BackendKind.WORD_STATIC, HeadKind.LSTM, 2): 0.68,
    (BackendKind.WORD_STATIC, HeadKind.CNN, 2): 0.66,
    (BackendKind.SUBWORD_STATIC, HeadKind.GRU, 2): 0.68,
    (BackendKind.SUBWORD_STATIC, HeadKind.LSTM, 2): 0.68,
    (BackendKind.SUBWORD_STATIC, HeadKind.CNN, 2): 0.69,
    (BackendKind.CONTEXTUAL, HeadKind.GRU, 2): 0.71,
    (BackendKind.CONTEXTUAL, HeadKind.LSTM, 2): 0.70,
    (BackendKind.CONTEXTUAL, HeadKind.CNN, 2): 0.67,
    (BackendKind.WORD_STATIC, HeadKind.GRU, 3): 0.57,
    (BackendKind.WORD_STATIC, HeadKind.LSTM, 3): 0.54,
    (BackendKind.WORD_STATIC, HeadKind.CNN, 3): 0.55,
    (BackendKind.SUBWORD_STATIC, HeadKind.GRU, 3): 0.58,
    (BackendKind.SUBWORD_STATIC, HeadKind.LSTM, 3): 0.58,
    (BackendKind.SUBWORD_STATIC, HeadKind.CNN, 3): 0.56,
    (BackendKind.CONTEXTUAL, HeadKind.GRU, 3): 0.60,
    (BackendKind.CONTEXTUAL, HeadKind.LSTM, 3): 0.59,
    (BackendKind.CONTEXTUAL, HeadKind.CNN, 3): 0.58,
}


class Classifier(Protocol):
    num_classes: int

    def predict_labels(self, texts: Sequence[str]) -> list[SentimentLabel]: ...


@dataclass(frozen=True)
class ClassMetrics:
    label: SentimentLabel
    support: int
    precision: float
    recall: float
    f1: float
    # set when the metric's denominator was zero and it was reported as 0
    undefined: tuple[str, ...] = ()


@dataclass(frozen=True)
class EvaluationReport:
    labels: tuple[SentimentLabel, ...]
    confusion: np.ndarray  # rows true, columns predicted
    per_class: tuple[ClassMetrics, ...]

    @property
    def num_samples(self) -> int:
        return int(self.confusion.sum())

    @property
    def accuracy(self) -> float:
        return float(np.trace(self.confusion)) / self.num_samples

    def as_dict(self) -> dict:
        return {
            "accuracy": self.accuracy,
            "num_samples": self.num_samples,
            "labels": [l.serialized for l in self.labels],
            "confusion": self.confusion.tolist(),
            "per_class": {
                m.label.serialized: {
                    "support": m.support,
                    "precision": m.precision,
                    "recall": m.recall,
                    "f1": m.f1,
                    "undefined": list(m.undefined),
                }
                for m in self.per_class
            },
        }


def confusion_matrix(true_idx: Sequence[int], pred_idx: Sequence[int], k: int) -> np.ndarray:
    cm = np.zeros((k, k), dtype=np.int64)
    np.add.at(cm, (np.asarray(true_idx, dtype=np.int64), np.asarray(pred_idx, dtype=np.int64)), 1)
    return cm


def _ratio(num: float, den: float) -> tuple[float, bool]:
    return (num / den, False) if den else (0.0, True)


def report_from_confusion(confusion: np.ndarray, arity: int) -> EvaluationReport:
    labels = labels_for_arity(arity)
    metrics = []
    for i, label in enumerate(labels):
        tp = confusion[i, i]
        precision, p_undef = _ratio(tp, confusion[:, i].sum())
        recall, r_undef = _ratio(tp, confusion[i, :].sum())
        f1, f_undef = _ratio(2 * precision * recall, precision + recall)
        undefined = tuple(
            name for name, flag in (("precision", p_undef), ("recall", r_undef), ("f1", f_undef)) if flag
        )
        metrics.append(
            ClassMetrics(label, int(confusion[i, :].sum()), float(precision), float(recall), float(f1), undefined)
        )
    return EvaluationReport(labels, confusion, tuple(metrics))


def report_from_predictions(
    true: Sequence[SentimentLabel], predicted: Sequence[SentimentLabel], arity: int
) -> EvaluationReport:
    if len(true) != len(predicted):
        raise ValueError("prediction count does not match label count")
    if not true:
        raise ValueError("cannot evaluate on an empty set")
    cm = confusion_matrix(
        [class_index(l, arity) for l in true], [class_index(l, arity) for l in predicted], len(labels_for_arity(arity))
    )
    return report_from_confusion(cm, arity)


def evaluate(model: Classifier, test: LabeledCorpus) -> EvaluationReport:
    if model.num_classes != test.task_arity:
        raise ValueError(f"{model.num_classes}-class model cannot score a {test.task_arity}-class test set")
    if len(test) == 0:
        raise ValueError("test split is empty")
    return report_from_predictions(test.labels, model.predict_labels(test.texts), test.task_arity)


@dataclass(frozen=True)
class ExperimentSpec:
    backend: BackendKind
    head: HeadKind
    arity: int
    train_config: TrainConfig = field(default_factory=TrainConfig)
    seed: int = 0

    @property
    def key(self) -> tuple[BackendKind, HeadKind, int]:
        return (self.backend, self.head, self.arity)

    @property
    def name(self) -> str:
        return f"{self.backend.value}-{self.head.value}-{self.arity}class"


@dataclass
class CellResult:
    spec: ExperimentSpec
    report: EvaluationReport | None = None
    error: str | None = None
    artifacts: dict[str, str] = field(default_factory=dict)
    epochs: int | None = None

    @property
    def ok(self) -> bool:
        return self.report is not None

    @property
    def accuracy(self) -> float | None:
        return self.report.accuracy if self.report else None


@dataclass
class ResultMatrix:
    cells: list[CellResult] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.cells)

    def get(self, backend: BackendKind, head: HeadKind, arity: int) -> CellResult | None:
        for cell in self.cells:
            if cell.spec.key == (backend, head, arity):
                return cell
        return None

    @property
    def complete(self) -> bool:
        keys = {c.spec.key for c in self.cells if c.ok}
        return len(keys) == len(BACKEND_ORDER) * len(HEAD_ORDER) * 2

    @property
    def failures(self) -> list[CellResult]:
        return [c for c in self.cells if not c.ok]

    def accuracies(self) -> dict[tuple[BackendKind, HeadKind, int], float]:
        return {c.spec.key: c.accuracy for c in self.cells if c.ok}


def derive_cell_seed(master_seed: int, cell_index: int) -> int:
    return int(np.random.SeedSequence([master_seed, cell_index]).generate_state(1)[0])


def matrix_specs(
    backends: Iterable[BackendKind] = BACKEND_ORDER,
    heads: Iterable[HeadKind] = HEAD_ORDER,
    arities: Iterable[int] = (2, 3),
    train_config: TrainConfig | None = None,
    master_seed: int = 0,
) -> list[ExperimentSpec]:
    """Specs in table order (task, backend, head), each with its own derived seed."""
    train_config = train_config or TrainConfig()
    specs = []
    backends, heads = [BackendKind(b) for b in backends], [HeadKind(h) for h in heads]
    for arity in arities:
        for b in backends:
            for h in heads:
                seed = derive_cell_seed(master_seed, len(specs))
                specs.append(ExperimentSpec(b, h, arity, replace(train_config, seed=seed), seed))
    return specs


BackendFactory = Callable[[BackendKind, SplitCorpus], EmbeddingBackend]


def default_backend_factory(
    table_config: StaticTableConfig | None = None,
    contextual_checkpoint: str = DEFAULT_CHECKPOINT,
    vector_files: Mapping[BackendKind, str] | None = None,
) -> BackendFactory:
    """Static tables come from ``vector_files`` or are trained on each task's train split."""
    table_config = table_config or StaticTableConfig()
    vector_files = vector_files or {}
    cache: dict = {}

    def factory(kind: BackendKind, splits: SplitCorpus) -> EmbeddingBackend:
        key = (kind, splits.task_arity if kind not in vector_files else None)
        if key not in cache:
            if kind is BackendKind.CONTEXTUAL:
                cache[key] = ContextualBackend(contextual_checkpoint)
            else:
                cfg = replace(table_config, kind=kind)
                cache[key] = make_static_backend(vector_files.get(kind, splits.train), cfg)
        return cache[key]

    return factory


def run_matrix(
    specs: Sequence[ExperimentSpec],
    splits2: SplitCorpus | None,
    splits3: SplitCorpus | None,
    backend_factory: BackendFactory | None = None,
    head_overrides: Mapping | None = None,
    out_dir: str | Path | None = None,
    data_paths: Mapping[int, Mapping[str, str | Path]] | None = None,
) -> ResultMatrix:
    """Train and score one model per spec; a failing cell records its traceback and the run continues.

    With ``out_dir`` each cell gets a directory holding its checkpoint,
    run manifest and report, and a master manifest links them.
    """
    backend_factory = backend_factory or default_backend_factory()
    splits_by_arity = {2: splits2, 3: splits3}
    out = Path(out_dir) if out_dir else None
    matrix = ResultMatrix()
    for index, spec in enumerate(specs):
        cell = CellResult(spec)
        try:
            splits = splits_by_arity[spec.arity]
            if splits is None:
                raise ValueError(f"no {spec.arity}-class splits supplied")
            backend = backend_factory(spec.backend, splits)
            head_cfg = preset_head_config(spec.head, spec.arity, **dict(head_overrides or {}))
            model = build_model(backend, head_cfg, spec.arity, seed=spec.seed)
            model, history = train(model, splits, spec.train_config)
            cell.report = evaluate(model, splits.test)
            cell.epochs = history.epochs
            logger.info("%s: accuracy %.4f", spec.name, cell.report.accuracy)
            if out is not None:
                cell_dir = out / f"cell{index:02d}_{spec.name}"
                cell_dir.mkdir(parents=True, exist_ok=True)
                paths = dict((data_paths or {}).get(spec.arity, {}))
                digests = {k: file_digest(p) for k, p in paths.items()}
                save_checkpoint(model, cell_dir / "model.pt", spec.train_config, digests, history)
                manifest = run_manifest(model, spec.train_config, paths, history, cell_index=index)
                (cell_dir / "manifest.json").write_text(json.dumps(manifest, indent=2))
                (cell_dir / "report.json").write_text(json.dumps(cell.report.as_dict(), indent=2))
                cell.artifacts = {
                    "checkpoint": str(cell_dir / "model.pt"),
                    "manifest": str(cell_dir / "manifest.json"),
                    "report": str(cell_dir / "report.json"),
                }
        except Exception as exc:  # isolate cell failures
            logger.warning("%s failed: %s", spec.name, exc)
            cell.error = "".join(traceback.format_exception(type(exc), exc, exc.__traceback__))
        matrix.cells.append(cell)
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / "matrix_manifest.json").write_text(json.dumps(matrix_manifest(matrix), indent=2))
    return matrix


def matrix_manifest(matrix: ResultMatrix) -> dict:
    return {
        "cells": [
            {
                "backend": c.spec.backend.value,
                "head": c.spec.head.value,
                "arity": c.spec.arity,
                "seed": c.spec.seed,
                "train_config": c.spec.train_config.to_dict(),
                "accuracy": c.accuracy,
                "epochs": c.epochs,
                "error": c.error,
                "artifacts": c.artifacts,
            }
            for c in matrix.cells
        ]
    }


def compare_to_reference(matrix: ResultMatrix, tolerance: float = 0.03) -> dict:
    """Per-cell deviation from the published accuracies."""
    out = {}
    for key, acc in matrix.accuracies().items():
        ref = REFERENCE_ACCURACY[key]
        out[key] = {"accuracy": acc, "reference": ref, "within": abs(acc - ref) <= tolerance}
    return out


def _table_rows(matrix: ResultMatrix) -> list[tuple[int, BackendKind, list[str]]]:
    rows = []
    for arity in (2, 3):
        for backend in BACKEND_ORDER:
            cells = [matrix.get(backend, head, arity) for head in HEAD_ORDER]
            if all(c is None for c in cells):
                continue
            values = []
            for c in cells:
                if c is None:
                    values.append("")
                elif c.ok:
                    values.append(f"{c.accuracy:.4f}")
                else:
                    values.append("FAILED")
            rows.append((arity, backend, values))
    return rows


def render_results(matrix: ResultMatrix, fmt: str = "text") -> str:
    """Accuracy table with rows Word2Vec/fastText/BERT and columns GRU/LSTM/CNN per task."""
    if not matrix.cells:
        raise ValueError("cannot render an empty result matrix")
    if fmt == "json":
        return json.dumps(matrix_manifest(matrix), indent=2)
    rows = _table_rows(matrix)
    heads = [h.value.upper() for h in HEAD_ORDER]
    if fmt == "csv":
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["task", "backend", *heads])
        for arity, backend, values in rows:
            writer.writerow([f"{arity}-class", BACKEND_NAMES[backend], *values])
        return buf.getvalue()
    if fmt != "text":
        raise ValueError(f"unknown format {fmt!r}")
    lines = [f"{'task':<8} {'backend':<10} " + " ".join(f"{h:>8}" for h in heads)]
    lines.append("-" * len(lines[0]))
    for arity, backend, values in rows:
        lines.append(
            f"{f'{arity}-class':<8} {BACKEND_NAMES[backend]:<10} " + " ".join(f"{v:>8}" for v in values)
        )
    return "\n".join(lines) + "\n"


def render_report(report: EvaluationReport, fmt: str = "text") -> str:
    if fmt == "json":
        return json.dumps(report.as_dict(), indent=2)
    names = [l.serialized for l in report.labels]
    if fmt == "csv":
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["label", "support", "precision", "recall", "f1"])
        for m in report.per_class:
            writer.writerow([m.label.serialized, m.support, f"{m.precision:.6f}", f"{m.recall:.6f}", f"{m.f1:.6f}"])
        writer.writerow(["accuracy", report.num_samples, "", "", f"{report.accuracy:.6f}"])
        return buf.getvalue()
    if fmt != "text":
        raise ValueError(f"unknown format {fmt!r}")
    lines = [f"accuracy {report.accuracy:.4f} on {report.num_samples} samples", ""]
    lines.append("confusion (rows true, columns predicted)")
    lines.append(" " * 10 + "".join(f"{n:>10}" for n in names))
    for name, row in zip(names, report.confusion):
        lines.append(f"{name:<10}" + "".join(f"{v:>10}" for v in row))
    lines.append("")
    lines.append(f"{'label':<10}{'support':>10}{'precision':>10}{'recall':>10}{'f1':>10}")
    for m in report.per_class:
        flag = " *" if m.undefined else ""
        lines.append(
            f"{m.label.serialized:<10}{m.support:>10}{m.precision:>10.4f}{m.recall:>10.4f}{m.f1:>10.4f}{flag}"
        )
    if any(m.undefined for m in report.per_class):
        lines.append("* zero denominator, reported as 0")
    return "\n".join(lines) + "\n"
