"""Labeled sentiment corpora: TSV I/O, validation, derivation, splitting, statistics."""

from __future__ import annotations

import csv
import enum
import math
import random
import warnings
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

TSV_HEADER = ("id", "topic", "text", "label")

TOPICS = (
    "Sports",
    "Economy",
    "Entertainment",
    "International",
    "Education",
    "Technology",
    "Lifestyle",
    "Fashion",
    "Food",
    "Travel",
)

# Published per-split sizes of the 3-class dataset, used as default split ratios.
SPLIT_SIZES = {"train": 12626, "valid": 2226, "test": 3000}

BENGALI_BLOCK = (0x0980, 0x09FF)


class SentimentLabel(enum.IntEnum):
    NEGATIVE = 0
    NEUTRAL = 1
    POSITIVE = 2

    @property
    def serialized(self) -> str:
        return self.name.lower()

    @classmethod
    def parse(cls, value: str) -> "SentimentLabel":
        try:
            return cls[value.strip().upper()]
        except KeyError:
            raise UnknownLabelError(f"unknown label {value!r}") from None

    def __str__(self) -> str:
        return self.serialized


def labels_for_arity(arity: int) -> tuple[SentimentLabel, ...]:
    """Admissible labels for a task, in class-index order."""
    if arity == 3:
        return (SentimentLabel.NEGATIVE, SentimentLabel.NEUTRAL, SentimentLabel.POSITIVE)
    if arity == 2:
        return (SentimentLabel.NEGATIVE, SentimentLabel.POSITIVE)
    raise ValueError(f"task arity must be 2 or 3, got {arity!r}")


def class_index(label: SentimentLabel, arity: int) -> int:
    return labels_for_arity(arity).index(label)


class CorpusError(ValueError):
    """Base class for corpus validation failures."""


class HeaderError(CorpusError):
    pass


class MalformedRowError(CorpusError):
    pass


class UnknownLabelError(CorpusError):
    pass


class UnknownTopicError(CorpusError):
    pass


class EmptyTextError(CorpusError):
    pass


class DuplicateIdError(CorpusError):
    def __init__(self, comment_id: str, message: str | None = None):
        self.comment_id = comment_id
        super().__init__(message or f"duplicate id {comment_id!r}")


class InadmissibleLabelError(CorpusError):
    pass


class EmptyCorpusError(CorpusError):
    pass


class SplitOverlapError(CorpusError):
    def __init__(self, overlap: Mapping[tuple[str, str], Sequence[str]]):
        self.overlap = {k: sorted(v) for k, v in overlap.items()}
        parts = [f"{a}/{b}: {', '.join(ids)}" for (a, b), ids in self.overlap.items()]
        super().__init__("splits share ids: " + "; ".join(parts))


class CorpusWarning(UserWarning):
    pass


@dataclass(frozen=True)
class LabeledComment:
    id: str
    text: str
    topic: str
    label: SentimentLabel

    def __post_init__(self):
        if not self.id:
            raise CorpusError("comment id must be non-empty")
        if not self.text.strip():
            raise EmptyTextError(f"comment {self.id!r} has empty text")


@dataclass(frozen=True)
class LabeledCorpus:
    entries: tuple[LabeledComment, ...]
    task_arity: int

    def __post_init__(self):
        object.__setattr__(self, "entries", tuple(self.entries))
        admissible = set(labels_for_arity(self.task_arity))
        seen: set[str] = set()
        for entry in self.entries:
            if entry.id in seen:
                raise DuplicateIdError(entry.id)
            seen.add(entry.id)
            if entry.label not in admissible:
                raise InadmissibleLabelError(
                    f"label {entry.label} not admissible in a {self.task_arity}-class corpus "
                    f"(id {entry.id!r})"
                )

    def __len__(self) -> int:
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)

    @property
    def ids(self) -> list[str]:
        return [e.id for e in self.entries]

    @property
    def texts(self) -> list[str]:
        return [e.text for e in self.entries]

    @property
    def labels(self) -> list[SentimentLabel]:
        return [e.label for e in self.entries]


@dataclass(frozen=True)
class SplitCorpus:
    train: LabeledCorpus
    valid: LabeledCorpus
    test: LabeledCorpus

    def __post_init__(self):
        arities = {self.train.task_arity, self.valid.task_arity, self.test.task_arity}
        if len(arities) != 1:
            raise CorpusError(f"splits disagree on task arity: {sorted(arities)}")
        parts = self.as_dict()
        overlap = {}
        names = list(parts)
        for i, a in enumerate(names):
            for b in names[i + 1:]:
                shared = set(parts[a].ids) & set(parts[b].ids)
                if shared:
                    overlap[(a, b)] = shared
        if overlap:
            raise SplitOverlapError(overlap)

    @property
    def task_arity(self) -> int:
        return self.train.task_arity

    def as_dict(self) -> dict[str, LabeledCorpus]:
        return {"train": self.train, "valid": self.valid, "test": self.test}

    def sizes(self) -> dict[str, int]:
        return {name: len(part) for name, part in self.as_dict().items()}


@dataclass(frozen=True)
class CorpusStats:
    longest_sentence: int
    average_length: int
    total_words: int
    non_bengali_words: int
    num_entries: int = field(default=0)

    def as_dict(self) -> dict[str, int]:
        return {
            "entries": self.num_entries,
            "longest_sentence": self.longest_sentence,
            "average_length": self.average_length,
            "total_words": self.total_words,
            "non_bengali_words": self.non_bengali_words,
        }


def canonical_topic(raw: str, topics: Sequence[str]) -> str:
    lookup = {t.lower(): t for t in topics}
    try:
        return lookup[raw.strip().lower()]
    except KeyError:
        raise UnknownTopicError(f"unknown topic {raw!r}") from None


def load_corpus(path: str | Path, arity: int, topics: Sequence[str] = TOPICS) -> LabeledCorpus:
    """Read and validate a UTF-8 TSV corpus with header ``id topic text label``.

    Every failure mode raises its own ``CorpusError`` subclass carrying the
    offending line number.
    """
    labels_for_arity(arity)
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"corpus file not found: {path}")

    with path.open(encoding="utf-8", newline="") as fh:
        lines = fh.read().replace("\r\n", "\n").split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    if not lines:
        raise HeaderError(f"{path}: missing header")
    rows = csv.reader(lines, delimiter="\t", quoting=csv.QUOTE_NONE)
    header = tuple(next(rows))
    if header != TSV_HEADER:
        raise HeaderError(f"{path}: expected header {TSV_HEADER}, got {header}")

    admissible = set(labels_for_arity(arity))
    entries: list[LabeledComment] = []
    seen: dict[str, int] = {}
    for lineno, row in enumerate(rows, start=2):
        if len(row) != len(TSV_HEADER):
            raise MalformedRowError(
                f"{path}:{lineno}: expected {len(TSV_HEADER)} columns, got {len(row)}"
            )
        cid, topic, text, label_str = row
        try:
            label = SentimentLabel.parse(label_str)
        except UnknownLabelError as exc:
            raise UnknownLabelError(f"{path}:{lineno}: {exc}") from None
        if label not in admissible:
            raise InadmissibleLabelError(
                f"{path}:{lineno}: label {label} not allowed in a {arity}-class corpus"
            )
        if cid in seen:
            raise DuplicateIdError(
                cid, f"{path}:{lineno}: duplicate id {cid!r} (first on line {seen[cid]})"
            )
        seen[cid] = lineno
        try:
            topic = canonical_topic(topic, topics)
        except UnknownTopicError as exc:
            raise UnknownTopicError(f"{path}:{lineno}: {exc}") from None
        if not text.strip():
            raise EmptyTextError(f"{path}:{lineno}: empty text for id {cid!r}")
        entries.append(LabeledComment(id=cid, text=text, topic=topic, label=label))

    if not entries:
        raise EmptyCorpusError(f"{path}: no data rows")
    return LabeledCorpus(tuple(entries), arity)


def save_corpus(corpus: LabeledCorpus, path: str | Path) -> None:
    """Write ``corpus`` in the TSV schema read by ``load_corpus`` (LF line endings)."""
    lines = ["\t".join(TSV_HEADER)]
    for e in corpus:
        for value in (e.id, e.topic, e.text):
            if "\t" in value or "\n" in value or "\r" in value:
                raise CorpusError(f"id {e.id!r}: fields may not contain tabs or newlines")
        lines.append("\t".join((e.id, e.topic, e.text, e.label.serialized)))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8", newline="")


def derive_two_class(corpus: LabeledCorpus) -> LabeledCorpus:
    """Drop Neutral entries from a 3-class corpus, preserving order."""
    if corpus.task_arity != 3:
        raise CorpusError("derive_two_class expects a 3-class corpus")
    kept = tuple(e for e in corpus if e.label is not SentimentLabel.NEUTRAL)
    if not kept and len(corpus):
        warnings.warn("every entry was Neutral; derived 2-class corpus is empty", CorpusWarning)
    return LabeledCorpus(kept, 2)


def load_splits(
    paths: Sequence[str | Path], arity: int, topics: Sequence[str] = TOPICS
) -> SplitCorpus:
    if len(paths) != 3:
        raise ValueError("expected three paths: train, valid, test")
    train, valid, test = (load_corpus(p, arity, topics) for p in paths)
    return SplitCorpus(train, valid, test)


def derive_two_class_splits(splits: SplitCorpus) -> SplitCorpus:
    return SplitCorpus(*(derive_two_class(part) for part in splits.as_dict().values()))


def label_distribution(corpus: LabeledCorpus) -> dict[SentimentLabel, int]:
    counts = Counter(e.label for e in corpus)
    return {label: counts.get(label, 0) for label in labels_for_arity(corpus.task_arity)}


def topic_distribution(corpus: LabeledCorpus) -> dict[str, int]:
    return dict(Counter(e.topic for e in corpus))


def stat_tokens(text: str) -> list[str]:
    # Whitespace-only split; punctuation stays attached to its word.
    return text.split()


def is_bengali_token(token: str) -> bool:
    lo, hi = BENGALI_BLOCK
    return any(lo <= ord(ch) <= hi for ch in token)


def compute_stats(corpus: LabeledCorpus | Iterable[str]) -> CorpusStats:
    """Sentence-length and vocabulary statistics over whitespace tokens.

    The average length is the floor of the mean token count per entry.
    """
    texts = corpus.texts if isinstance(corpus, LabeledCorpus) else list(corpus)
    if not texts:
        raise EmptyCorpusError("cannot compute statistics of an empty corpus")
    lengths = []
    non_bengali = 0
    for text in texts:
        tokens = stat_tokens(text)
        lengths.append(len(tokens))
        non_bengali += sum(1 for t in tokens if not is_bengali_token(t))
    total = sum(lengths)
    return CorpusStats(
        longest_sentence=max(lengths),
        average_length=total // len(lengths),
        total_words=total,
        non_bengali_words=non_bengali,
        num_entries=len(lengths),
    )


def concat_corpora(parts: Iterable[LabeledCorpus]) -> LabeledCorpus:
    parts = list(parts)
    arities = {p.task_arity for p in parts}
    if len(arities) != 1:
        raise CorpusError("cannot concatenate corpora of different arity")
    return LabeledCorpus(tuple(e for p in parts for e in p), arities.pop())


def _apportion(total: int, weights: Sequence[float]) -> list[int]:
    """Largest-remainder allocation of ``total`` items proportional to ``weights``."""
    norm = sum(weights)
    quotas = [total * w / norm for w in weights]
    counts = [math.floor(q) for q in quotas]
    order = sorted(range(len(weights)), key=lambda i: (-(quotas[i] - counts[i]), i))
    for i in order[: total - sum(counts)]:
        counts[i] += 1
    return counts


def stratified_split(
    corpus: LabeledCorpus,
    seed: int,
    ratios: Sequence[float] = tuple(SPLIT_SIZES.values()),
) -> SplitCorpus:
    """Seeded label-stratified train/valid/test partition, for synthetic corpora.

    Published data ships with fixed split files; use ``load_splits`` for it.
    """
    rng = random.Random(seed)
    by_label: dict[SentimentLabel, list[LabeledComment]] = {}
    for e in corpus:
        by_label.setdefault(e.label, []).append(e)
    assigned: dict[str, int] = {}
    for label in sorted(by_label):
        group = list(by_label[label])
        rng.shuffle(group)
        start = 0
        for part, n in enumerate(_apportion(len(group), ratios)):
            for e in group[start:start + n]:
                assigned[e.id] = part
            start += n
    parts = [tuple(e for e in corpus if assigned[e.id] == p) for p in range(3)]
    return SplitCorpus(*(LabeledCorpus(p, corpus.task_arity) for p in parts))
