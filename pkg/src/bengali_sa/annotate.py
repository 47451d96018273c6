"""Three-annotator label merging, agreement reporting and noise filtering."""

from __future__ import annotations

import csv
import enum
from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping, Sequence

from .corpus import (
    TOPICS,
    LabeledComment,
    LabeledCorpus,
    SentimentLabel,
    canonical_topic,
    is_bengali_token,
    stat_tokens,
)

ANNOTATION_HEADER = ("comment_id", "label_a", "label_b", "label_c")
RAW_HEADER = ("id", "topic", "text")
MIN_TOKENS = 2
MAX_NON_BENGALI_FRACTION = 0.5


class Agreement(enum.Enum):
    UNANIMOUS = "unanimous"
    MAJORITY = "majority"
    NONE = "none"


class NoiseReason(enum.Enum):
    EMPTY = "empty"
    TOO_SHORT = "too_short"
    DUPLICATE_TEXT = "duplicate_text"
    NON_BENGALI_DOMINANT = "non_bengali_dominant"


@dataclass(frozen=True)
class AnnotationRecord:
    comment_id: str
    labels: tuple[SentimentLabel, SentimentLabel, SentimentLabel]

    def __post_init__(self):
        if not self.comment_id:
            raise ValueError("comment_id must be non-empty")
        object.__setattr__(self, "labels", tuple(self.labels))
        if len(self.labels) != 3:
            raise ValueError(f"{self.comment_id}: expected 3 labels, got {len(self.labels)}")


@dataclass(frozen=True)
class MergedLabel:
    label: SentimentLabel | None  # None means unresolved
    agreement: Agreement

    @property
    def resolved(self) -> bool:
        return self.label is not None


@dataclass(frozen=True)
class AgreementReport:
    counts: dict[Agreement, int]
    total: int

    @property
    def proportions(self) -> dict[Agreement, float]:
        return {a: self.counts[a] / self.total for a in Agreement}

    def as_dict(self) -> dict:
        return {
            "total": self.total,
            **{f"{a.value}_count": self.counts[a] for a in Agreement},
            **{f"{a.value}_proportion": p for a, p in self.proportions.items()},
        }


def merge_majority(record: AnnotationRecord) -> MergedLabel:
    """Label chosen by at least two of three annotators; otherwise unresolved."""
    label, votes = Counter(record.labels).most_common(1)[0]
    if votes == 3:
        return MergedLabel(label, Agreement.UNANIMOUS)
    if votes == 2:
        return MergedLabel(label, Agreement.MAJORITY)
    return MergedLabel(None, Agreement.NONE)


def agreement_report(records: Iterable[AnnotationRecord]) -> AgreementReport:
    counts = Counter(merge_majority(r).agreement for r in records)
    total = sum(counts.values())
    if total == 0:
        raise ValueError("agreement report needs at least one record")
    return AgreementReport({a: counts.get(a, 0) for a in Agreement}, total)


def filter_noise(
    raw: Iterable[tuple[str, str, str]],
) -> tuple[list[tuple[str, str, str]], list[tuple[tuple[str, str, str], NoiseReason]]]:
    """Split raw ``(id, topic, text)`` items into kept and discarded-with-reason.

    Checks run in order empty, too_short, non_bengali_dominant, duplicate_text;
    an item is discarded for the first check it fails. Duplicates are judged
    against earlier kept items only, so the first occurrence survives.
    """
    kept: list[tuple[str, str, str]] = []
    discarded: list[tuple[tuple[str, str, str], NoiseReason]] = []
    seen_texts: set[str] = set()
    for item in raw:
        text = item[2].strip()
        tokens = stat_tokens(text)
        if not text:
            reason = NoiseReason.EMPTY
        elif len(tokens) < MIN_TOKENS:
            reason = NoiseReason.TOO_SHORT
        elif sum(not is_bengali_token(t) for t in tokens) > MAX_NON_BENGALI_FRACTION * len(tokens):
            reason = NoiseReason.NON_BENGALI_DOMINANT
        elif text in seen_texts:
            reason = NoiseReason.DUPLICATE_TEXT
        else:
            seen_texts.add(text)
            kept.append(item)
            continue
        discarded.append((item, reason))
    return kept, discarded


def _read_tsv(path: str | Path, header: Sequence[str]) -> list[list[str]]:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"file not found: {path}")
    with path.open(encoding="utf-8", newline="") as fh:
        lines = fh.read().replace("\r\n", "\n").split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    rows = list(csv.reader(lines, delimiter="\t", quoting=csv.QUOTE_NONE))
    if not rows or tuple(rows[0]) != tuple(header):
        raise ValueError(f"{path}: expected header {tuple(header)}")
    for lineno, row in enumerate(rows[1:], start=2):
        if len(row) != len(header):
            raise ValueError(f"{path}:{lineno}: expected {len(header)} columns, got {len(row)}")
    return rows[1:]


def load_annotations(path: str | Path) -> list[AnnotationRecord]:
    records = []
    seen = set()
    for cid, a, b, c in _read_tsv(path, ANNOTATION_HEADER):
        if cid in seen:
            raise ValueError(f"{path}: duplicate comment_id {cid!r}")
        seen.add(cid)
        records.append(AnnotationRecord(cid, tuple(SentimentLabel.parse(x) for x in (a, b, c))))
    return records


def load_raw_comments(path: str | Path) -> list[tuple[str, str, str]]:
    return [tuple(row) for row in _read_tsv(path, RAW_HEADER)]


def write_review_file(records: Iterable[AnnotationRecord], path: str | Path) -> None:
    lines = ["\t".join(ANNOTATION_HEADER)]
    for r in records:
        lines.append("\t".join([r.comment_id, *(l.serialized for l in r.labels)]))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8", newline="")


@dataclass
class MergeResult:
    corpus: LabeledCorpus
    unresolved: list[AnnotationRecord]
    discarded: list[tuple[tuple[str, str, str], NoiseReason]]
    unannotated: list[str]
    report: AgreementReport


def merge_annotations(
    raw: Iterable[tuple[str, str, str]],
    records: Iterable[AnnotationRecord],
    topic_lookup: Mapping[str, str] | None = None,
) -> MergeResult:
    """Filter noise, merge labels and assemble a fully labeled 3-class corpus.

    Unresolved records are kept out of the corpus and returned for expert review.
    """
    kept, discarded = filter_noise(raw)
    by_id = {r.comment_id: r for r in records}
    report = agreement_report(by_id.values())
    entries, unresolved, unannotated = [], [], []
    for cid, topic, text in kept:
        record = by_id.get(cid)
        if record is None:
            unannotated.append(cid)
            continue
        merged = merge_majority(record)
        if not merged.resolved:
            unresolved.append(record)
            continue
        topic = topic_lookup.get(topic, topic) if topic_lookup else topic
        entries.append(LabeledComment(cid, text, canonical_topic(topic, TOPICS), merged.label))
    return MergeResult(LabeledCorpus(tuple(entries), 3), unresolved, discarded, unannotated, report)
