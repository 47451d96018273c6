import random
import unicodedata
from pathlib import Path

import numpy as np
import pytest
import torch

from bengali_sa.corpus import LabeledComment, LabeledCorpus, SentimentLabel, SplitCorpus, TSV_HEADER

CONSONANTS = [chr(c) for c in range(0x0995, 0x09B9) if unicodedata.category(chr(c)) == "Lo"]
VOWEL_SIGNS = ["া", "ি", "ী", "ু", "ে", "ো"]
SAMPLE_SENTENCE = "আমি ভালো আছি"

_acceptance_results: dict = {}


def bengali_word(rng: random.Random, syllables: int = 2) -> str:
    return "".join(rng.choice(CONSONANTS) + rng.choice(VOWEL_SIGNS) for _ in range(syllables))


def write_tsv(path: Path, rows, header=TSV_HEADER) -> Path:
    lines = ["\t".join(header)] + ["\t".join(r) for r in rows]
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path


def make_corpus(labels, arity=3, topic="Sports", prefix="c", texts=None) -> LabeledCorpus:
    rng = random.Random(0)
    entries = []
    for i, label in enumerate(labels):
        text = texts[i] if texts else " ".join(bengali_word(rng) for _ in range(3))
        entries.append(LabeledComment(f"{prefix}{i}", text, topic, SentimentLabel(label)))
    return LabeledCorpus(tuple(entries), arity)


def separable_corpus(n: int = 30, arity: int = 2, seed: int = 0, prefix: str = "s") -> LabeledCorpus:
    """Each class draws its words from its own disjoint vocabulary."""
    rng = random.Random(seed)
    labels = [SentimentLabel.NEGATIVE, SentimentLabel.POSITIVE]
    if arity == 3:
        labels.insert(1, SentimentLabel.NEUTRAL)
    vocab = {}
    used = set()
    for label in labels:
        words = []
        while len(words) < 6:
            w = bengali_word(rng, 3)
            if w not in used:
                used.add(w)
                words.append(w)
        vocab[label] = words
    entries = []
    for i in range(n):
        label = labels[i % len(labels)]
        text = " ".join(rng.choice(vocab[label]) for _ in range(rng.randint(4, 8)))
        entries.append(LabeledComment(f"{prefix}{i}", text, "Sports", label))
    return LabeledCorpus(tuple(entries), arity)


def separable_splits(arity: int = 2, n_train: int = 30, seed: int = 0) -> SplitCorpus:
    train = separable_corpus(n_train, arity, seed, prefix="tr")
    valid = separable_corpus(9, arity, seed + 1, prefix="va")
    test = separable_corpus(9, arity, seed + 2, prefix="te")
    return SplitCorpus(train, valid, test)


@pytest.fixture(scope="session")
def tiny_bert_dir(tmp_path_factory) -> Path:
    """A randomly initialised two-layer BERT with a character-level Bengali vocabulary."""
    from transformers import BertConfig, BertModel, BertTokenizer

    out = tmp_path_factory.mktemp("tiny_bert")
    chars = [chr(c) for c in range(0x0980, 0x0A00) if unicodedata.category(chr(c)) != "Cn"]
    ascii_chars = [chr(c) for c in range(33, 127)]
    vocab = ["[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]"]
    vocab += chars + ["##" + c for c in chars] + ascii_chars + ["##" + c for c in ascii_chars] + ["।"]
    (out / "vocab.txt").write_text("\n".join(vocab) + "\n", encoding="utf-8")
    tokenizer = BertTokenizer(str(out / "vocab.txt"), do_lower_case=False)
    config = BertConfig(
        vocab_size=len(vocab),
        hidden_size=16,
        num_hidden_layers=2,
        num_attention_heads=2,
        intermediate_size=32,
        max_position_embeddings=160,
    )
    torch.manual_seed(0)
    BertModel(config).save_pretrained(out)
    tokenizer.save_pretrained(out)
    return out


@pytest.fixture(scope="session")
def contextual_backend(tiny_bert_dir):
    from bengali_sa.embed import ContextualBackend

    return ContextualBackend(str(tiny_bert_dir))


@pytest.fixture
def random_table():
    from bengali_sa.embed import StaticEmbeddingTable

    def make(d=8, words=("ক", "খ", "গ"), seed=0):
        rng = np.random.default_rng(seed)
        return StaticEmbeddingTable(list(words), rng.normal(size=(len(words), d)))

    return make


def pytest_runtest_logreport(report):
    marker = getattr(report, "acceptance", None)
    if marker is None:
        return
    if report.when == "call" or (report.when == "setup" and report.outcome != "passed"):
        # one criterion may span several tests; any failure marks it failed
        if _acceptance_results.get(marker) != "failed":
            _acceptance_results[marker] = report.outcome


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    mark = item.get_closest_marker("acceptance")
    if mark is not None:
        report.acceptance = (mark.args[0], mark.kwargs.get("title", item.name))


def pytest_terminal_summary(terminalreporter):
    if not _acceptance_results:
        return
    terminalreporter.section("acceptance criteria")
    for (number, title), outcome in sorted(_acceptance_results.items()):
        status = {"passed": "PASS", "failed": "FAIL", "skipped": "SKIP"}.get(outcome, outcome.upper())
        terminalreporter.write_line(f"[{status}] criterion {number}: {title}")
