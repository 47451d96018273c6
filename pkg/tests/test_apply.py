import contextlib
import json
from fractions import Fraction

import pytest
from hypothesis import given
from hypothesis import strategies as st

from bengali_sa.apply import (
    CategorizedComment,
    CategoryWarning,
    analyze_categories,
    load_categorized,
    render_category_report,
    round_percentages,
)
from bengali_sa.corpus import SentimentLabel

from conftest import write_tsv

N, U, P = SentimentLabel.NEGATIVE, SentimentLabel.NEUTRAL, SentimentLabel.POSITIVE


class ConstantStub:
    def __init__(self, label, num_classes=3):
        self.label = label
        self.num_classes = num_classes

    def predict_labels(self, texts):
        return [self.label] * len(texts)


class KeywordStub:
    """Label decided by a marker word in the text."""

    num_classes = 3
    markers = {"খারাপ": N, "ঠিক": U, "ভালো": P}

    def predict_labels(self, texts):
        return [next(l for w, l in self.markers.items() if w in t) for t in texts]


def comments(category, counts):
    words = {N: "খারাপ", U: "ঠিক", P: "ভালো"}
    out = []
    for label, n in counts.items():
        out += [CategorizedComment(f"{words[label]} {i}", category) for i in range(n)]
    return out


class TestAnalyze:
    def test_constant_negative(self):
        table = analyze_categories(comments("politics", {N: 3, P: 2}), ConstantStub(N), ["politics"])
        assert table.row("politics").percentages == {N: 100, U: 0, P: 0}

    def test_six_three_one(self):
        data = comments("sports", {N: 6, U: 3, P: 1})
        table = analyze_categories(data, KeywordStub(), ["sports"])
        assert table.row("sports").percentages == {N: 60, U: 30, P: 10}

    def test_row_order_follows_declaration(self):
        data = comments("religion", {P: 1}) + comments("politics", {N: 1})
        table = analyze_categories(data, KeywordStub(), ["politics", "religion"])
        assert table.categories == ["politics", "religion"]

    def test_proportions_exact(self):
        data = comments("politics", {N: 1, U: 1, P: 1})
        row = analyze_categories(data, KeywordStub(), ["politics"]).row("politics")
        assert row.proportions == {N: Fraction(1, 3), U: Fraction(1, 3), P: Fraction(1, 3)}
        assert sum(row.percentages.values()) == 100

    def test_empty_category_warned(self):
        with pytest.warns(CategoryWarning):
            table = analyze_categories(comments("sports", {P: 2}), KeywordStub(), ["politics", "sports"])
        assert table.categories == ["sports"]

    def test_two_class_model_rejected(self):
        with pytest.raises(ValueError, match="3-class"):
            analyze_categories(comments("sports", {P: 1}), ConstantStub(P, 2), ["sports"])

    def test_undeclared_category(self):
        with pytest.raises(ValueError, match="undeclared"):
            analyze_categories(comments("weather", {P: 1}), KeywordStub(), ["sports"])

    def test_empty_text_rejected(self):
        with pytest.raises(ValueError):
            CategorizedComment("  ", "sports")

    @given(st.lists(st.tuples(st.sampled_from(["politics", "sports"]), st.sampled_from([N, U, P])), min_size=1))
    def test_composition(self, pairs):
        # per-category counts are the restriction of the global prediction multiset
        words = {N: "খারাপ", U: "ঠিক", P: "ভালো"}
        data = [CategorizedComment(f"{words[l]} {i}", c) for i, (c, l) in enumerate(pairs)]
        with pytest.warns(CategoryWarning) if len({c for c, _ in pairs}) < 2 else contextlib.nullcontext():
            table = analyze_categories(data, KeywordStub(), ["politics", "sports"])
        for row in table.rows:
            expected = {l: sum(1 for c, x in pairs if c == row.category and x == l) for l in (N, U, P)}
            assert row.counts == expected
            assert sum(row.proportions.values()) == 1
            assert abs(sum(row.percentages.values()) - 100) <= 0.5


class TestRounding:
    def test_exact(self):
        assert round_percentages([6, 3, 1]) == [60, 30, 10]

    def test_half_up_overshoot_corrected(self):
        # 12.5 and 87.5 both round up to a 101 row; the tie goes to the earlier label
        assert round_percentages([1, 7]) == [13, 87]

    def test_thirds(self):
        assert round_percentages([1, 1, 1]) == [34, 33, 33]

    def test_tie_goes_to_earlier(self):
        assert round_percentages([1, 1, 6]) == [13, 12, 75]

    def test_half_up_kept_when_row_sums(self):
        # 0.5, 30.3, 69.2 -> 1, 30, 69 already sums to 100
        assert round_percentages([5, 303, 692]) == [1, 30, 69]

    @given(st.lists(st.integers(0, 50), min_size=3, max_size=3).filter(lambda c: sum(c) > 0))
    def test_rows_sum_to_100_and_stay_close(self, counts):
        pct = round_percentages(counts)
        assert sum(pct) == 100
        for c, p in zip(counts, pct):
            assert abs(p - Fraction(100 * c, sum(counts))) < 1


class TestIO:
    def test_load_case_insensitive(self, tmp_path):
        path = write_tsv(tmp_path / "c.tsv", [("Politics", "খুব ভালো"), ("SPORTS", "খারাপ খেলা")], ("category", "text"))
        loaded = load_categorized(path)
        assert [c.category for c in loaded] == ["politics", "sports"]

    def test_unknown_category(self, tmp_path):
        path = write_tsv(tmp_path / "c.tsv", [("weather", "বৃষ্টি")], ("category", "text"))
        with pytest.raises(ValueError, match="weather"):
            load_categorized(path)

    def test_bad_header(self, tmp_path):
        path = write_tsv(tmp_path / "c.tsv", [("sports", "খেলা")], ("cat", "text"))
        with pytest.raises(ValueError, match="header"):
            load_categorized(path)

    @pytest.mark.parametrize("fmt", ["text", "csv", "json"])
    def test_render(self, fmt):
        table = analyze_categories(comments("sports", {N: 6, U: 3, P: 1}), KeywordStub(), ["sports"])
        out = render_category_report(table, fmt)
        if fmt == "json":
            assert json.loads(out)["sports"]["percent"] == {"negative": 60, "neutral": 30, "positive": 10}
        elif fmt == "csv":
            assert out.splitlines()[1] == "sports,10,60,30,10"
        else:
            assert "60%" in out

    def test_render_empty(self):
        from bengali_sa.apply import CategorySentimentTable

        with pytest.raises(ValueError):
            render_category_report(CategorySentimentTable(()))
