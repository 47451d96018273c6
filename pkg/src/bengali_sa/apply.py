"""Per-category sentiment percentages over category-tagged comments."""

from __future__ import annotations

import csv
import io
import json
import math
import warnings
from dataclasses import dataclass
from fractions import Fraction
from pathlib import Path
from typing import Iterable, Sequence

from .corpus import SentimentLabel, labels_for_arity

CATEGORY_HEADER = ("category", "text")
DEFAULT_CATEGORIES = ("politics", "sports", "religion")
LABELS = labels_for_arity(3)


class CategoryWarning(UserWarning):
    pass


@dataclass(frozen=True)
class CategorizedComment:
    text: str
    category: str

    def __post_init__(self):
        if not self.text.strip():
            raise ValueError("comment text must be non-empty")


@dataclass(frozen=True)
class CategoryRow:
    category: str
    counts: dict[SentimentLabel, int]

    @property
    def total(self) -> int:
        return sum(self.counts.values())

    @property
    def proportions(self) -> dict[SentimentLabel, Fraction]:
        return {l: Fraction(self.counts[l], self.total) for l in LABELS}

    @property
    def percentages(self) -> dict[SentimentLabel, int]:
        return round_percentages([self.counts[l] for l in LABELS], dict_keys=LABELS)


@dataclass(frozen=True)
class CategorySentimentTable:
    rows: tuple[CategoryRow, ...]

    def __len__(self) -> int:
        return len(self.rows)

    def row(self, category: str) -> CategoryRow:
        for r in self.rows:
            if r.category == category:
                return r
        raise KeyError(category)

    @property
    def categories(self) -> list[str]:
        return [r.category for r in self.rows]

    def as_dict(self) -> dict:
        return {
            r.category: {
                "count": r.total,
                "percent": {l.serialized: r.percentages[l] for l in LABELS},
                "proportion": {l.serialized: float(r.proportions[l]) for l in LABELS},
                "counts": {l.serialized: r.counts[l] for l in LABELS},
            }
            for r in self.rows
        }


def round_percentages(counts: Sequence[int], dict_keys: Sequence | None = None):
    """Integer percentages, rounded half up, corrected to sum to exactly 100.

    When independent half-up rounding misses 100 the row falls back to
    largest-remainder apportionment (ties to the earlier position).
    """
    total = sum(counts)
    exact = [Fraction(100 * c, total) for c in counts]
    rounded = [math.floor(p + Fraction(1, 2)) for p in exact]
    if sum(rounded) != 100:
        rounded = [math.floor(p) for p in exact]
        order = sorted(range(len(exact)), key=lambda i: (-(exact[i] - rounded[i]), i))
        for i in order[: 100 - sum(rounded)]:
            rounded[i] += 1
    return dict(zip(dict_keys, rounded)) if dict_keys is not None else rounded


def load_categorized(
    path: str | Path, categories: Sequence[str] = DEFAULT_CATEGORIES
) -> list[CategorizedComment]:
    """Read ``category<TAB>text`` rows; categories match case-insensitively."""
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"file not found: {path}")
    lookup = {c.lower(): c for c in categories}
    with path.open(encoding="utf-8", newline="") as fh:
        lines = fh.read().replace("\r\n", "\n").split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    rows = list(csv.reader(lines, delimiter="\t", quoting=csv.QUOTE_NONE))
    if not rows or tuple(rows[0]) != CATEGORY_HEADER:
        raise ValueError(f"{path}: expected header {CATEGORY_HEADER}")
    out = []
    for lineno, row in enumerate(rows[1:], start=2):
        if len(row) != 2:
            raise ValueError(f"{path}:{lineno}: expected 2 columns, got {len(row)}")
        category, text = row
        if category.strip().lower() not in lookup:
            raise ValueError(f"{path}:{lineno}: category {category!r} not in {list(categories)}")
        if not text.strip():
            raise ValueError(f"{path}:{lineno}: empty comment text")
        out.append(CategorizedComment(text, lookup[category.strip().lower()]))
    return out


def analyze_categories(
    comments: Iterable[CategorizedComment],
    model,
    categories: Sequence[str] = DEFAULT_CATEGORIES,
) -> CategorySentimentTable:
    """Classify every comment with a 3-class model and tabulate labels per category.

    Declared categories with no comments are omitted with a warning.
    """
    if model.num_classes != 3:
        raise ValueError("category analysis needs a 3-class model")
    comments = list(comments)
    unknown = {c.category for c in comments} - set(categories)
    if unknown:
        raise ValueError(f"comments use undeclared categories: {sorted(unknown)}")
    predictions = model.predict_labels([c.text for c in comments]) if comments else []
    rows = []
    for category in categories:
        counts = {l: 0 for l in LABELS}
        for c, label in zip(comments, predictions):
            if c.category == category:
                counts[label] += 1
        if sum(counts.values()) == 0:
            warnings.warn(f"category {category!r} has no comments; omitted", CategoryWarning)
            continue
        rows.append(CategoryRow(category, counts))
    return CategorySentimentTable(tuple(rows))


def render_category_report(table: CategorySentimentTable, fmt: str = "text") -> str:
    if not table.rows:
        raise ValueError("cannot render an empty category table")
    if fmt == "json":
        return json.dumps(table.as_dict(), indent=2)
    names = [l.serialized for l in LABELS]
    if fmt == "csv":
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["category", "count", *names])
        for r in table.rows:
            writer.writerow([r.category, r.total, *(r.percentages[l] for l in LABELS)])
        return buf.getvalue()
    if fmt != "text":
        raise ValueError(f"unknown format {fmt!r}")
    lines = [f"{'category':<12}{'count':>8}" + "".join(f"{n:>10}" for n in names)]
    for r in table.rows:
        lines.append(
            f"{r.category:<12}{r.total:>8}" + "".join(f"{r.percentages[l]:>9}%" for l in LABELS)
        )
    return "\n".join(lines) + "\n"
