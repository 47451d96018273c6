"""Tokenize-and-embed backends: contextual encoder, word-level and subword static tables."""

from __future__ import annotations

import enum
import hashlib
import json
import logging
import unicodedata
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import torch

from .corpus import LabeledCorpus

logger = logging.getLogger(__name__)

MAX_LEN = 128
PAD_ID = 0
UNK_ID = 1
PAD_TOKEN = "<pad>"
DEFAULT_CHECKPOINT = "bert-base-multilingual-cased"


class BackendKind(enum.Enum):
    CONTEXTUAL = "contextual"
    WORD_STATIC = "word_static"
    SUBWORD_STATIC = "subword_static"


class VectorFileError(ValueError):
    pass


@dataclass(frozen=True)
class TokenSequence:
    tokens: tuple[str, ...]
    ids: tuple[int, ...]
    mask: tuple[int, ...]
    max_len: int = MAX_LEN

    def __post_init__(self):
        if not len(self.tokens) == len(self.ids) == len(self.mask):
            raise ValueError("tokens, ids and mask must have equal length")
        if len(self.tokens) > self.max_len:
            raise ValueError(f"sequence of length {len(self.tokens)} exceeds max_len {self.max_len}")
        n = sum(self.mask)
        if tuple(self.mask) != (1,) * n + (0,) * (len(self.mask) - n):
            raise ValueError("mask must be a prefix of ones followed by zeros")

    def __len__(self) -> int:
        return len(self.tokens)

    @property
    def length(self) -> int:
        """Number of real (unmasked) positions."""
        return sum(self.mask)

    def padded(self) -> "TokenSequence":
        extra = self.max_len - len(self)
        return TokenSequence(
            self.tokens + (PAD_TOKEN,) * extra,
            self.ids + (PAD_ID,) * extra,
            self.mask + (0,) * extra,
            self.max_len,
        )


@dataclass(frozen=True)
class EmbeddedSequence:
    matrix: np.ndarray  # (L, d)
    mask: np.ndarray  # (L,)

    def __post_init__(self):
        if self.matrix.ndim != 2 or self.matrix.shape[0] != self.mask.shape[0]:
            raise ValueError("matrix must be L x d with one mask bit per row")
        if not np.all(np.isfinite(self.matrix)):
            raise ValueError("embedding contains non-finite values")

    @property
    def dimension(self) -> int:
        return self.matrix.shape[1]


def word_tokenize(text: str) -> list[str]:
    """Whitespace split, then each punctuation or symbol character becomes its own token."""
    tokens = []
    for chunk in text.split():
        current = []
        for ch in chunk:
            if unicodedata.category(ch)[0] in "PS":
                if current:
                    tokens.append("".join(current))
                    current = []
                tokens.append(ch)
            else:
                current.append(ch)
        if current:
            tokens.append("".join(current))
    return tokens


def char_ngrams(word: str, min_n: int, max_n: int) -> list[str]:
    """Character n-grams of ``<word>``, with repeats, shortest first."""
    marked = f"<{word}>"
    return [
        marked[i:i + n]
        for n in range(min_n, max_n + 1)
        for i in range(len(marked) - n + 1)
    ]


class StaticEmbeddingTable:
    """Context-free word vectors, optionally backed by character n-gram vectors.

    Unseen words resolve to the mean of their known n-gram vectors when the
    table has n-grams, and to the UNK vector otherwise. The UNK vector
    defaults to the mean word vector.
    """

    def __init__(
        self,
        words: Sequence[str],
        vectors: np.ndarray,
        ngrams: dict[str, np.ndarray] | None = None,
        ngram_range: tuple[int, int] = (3, 6),
        unk: np.ndarray | None = None,
    ):
        vectors = np.asarray(vectors, dtype=np.float32)
        if vectors.ndim != 2 or vectors.shape[0] != len(words):
            raise ValueError("vectors must be a (len(words), d) matrix")
        if vectors.shape[1] <= 0:
            raise ValueError("embedding dimension must be positive")
        if len(words) == 0:
            raise ValueError("a static table needs at least one word")
        self.words = list(words)
        self.index = {w: i for i, w in enumerate(self.words)}
        if len(self.index) != len(self.words):
            raise ValueError("duplicate words in table")
        self.vectors = vectors
        self.dimension = vectors.shape[1]
        self.ngram_range = tuple(ngram_range)
        self.ngrams: dict[str, np.ndarray] | None = None
        if ngrams is not None:
            self.ngrams = {g: np.asarray(v, dtype=np.float32) for g, v in ngrams.items()}
            if any(v.shape != (self.dimension,) for v in self.ngrams.values()):
                raise ValueError("n-gram vectors must share the word-vector dimension")
        self.unk = (
            np.asarray(unk, dtype=np.float32) if unk is not None else vectors.mean(axis=0)
        )
        if self.unk.shape != (self.dimension,):
            raise ValueError("UNK vector has the wrong dimension")
        self._composed: dict[str, np.ndarray] = {}

    @property
    def kind(self) -> BackendKind:
        return BackendKind.SUBWORD_STATIC if self.ngrams is not None else BackendKind.WORD_STATIC

    def __len__(self) -> int:
        return len(self.words)

    def __contains__(self, word: str) -> bool:
        return word in self.index

    def compose(self, word: str) -> np.ndarray | None:
        """Mean of the known n-gram vectors of ``word``, or None if none are known."""
        if self.ngrams is None:
            return None
        cached = self._composed.get(word)
        if cached is not None:
            return cached
        found = [self.ngrams[g] for g in char_ngrams(word, *self.ngram_range) if g in self.ngrams]
        if not found:
            return None
        vec = np.mean(np.stack(found), axis=0).astype(np.float32)
        self._composed[word] = vec
        return vec

    def lookup(self, word: str) -> np.ndarray:
        i = self.index.get(word)
        if i is not None:
            return self.vectors[i]
        composed = self.compose(word)
        return composed if composed is not None else self.unk

    def digest(self) -> str:
        h = hashlib.sha256()
        h.update(json.dumps([self.kind.value, self.ngram_range, self.words]).encode())
        h.update(self.vectors.tobytes())
        if self.ngrams is not None:
            for g in sorted(self.ngrams):
                h.update(g.encode())
                h.update(self.ngrams[g].tobytes())
        return h.hexdigest()

    def save(self, path: str | Path) -> None:
        """Write the word vectors file; subword tables add ``.ngrams`` and ``.meta.json`` sidecars."""
        path = Path(path)
        write_vector_file(path, self.words, self.vectors)
        meta = {"kind": self.kind.value, "dimension": self.dimension}
        if self.ngrams is not None:
            grams = sorted(self.ngrams)
            write_vector_file(
                path.with_name(path.name + ".ngrams"),
                grams,
                np.stack([self.ngrams[g] for g in grams]),
            )
            meta["ngram_range"] = list(self.ngram_range)
        path.with_name(path.name + ".meta.json").write_text(json.dumps(meta, indent=2))

    @classmethod
    def load(cls, path: str | Path, dimension: int | None = None) -> "StaticEmbeddingTable":
        path = Path(path)
        words, vectors = read_vector_file(path, dimension)
        meta_path = path.with_name(path.name + ".meta.json")
        meta = json.loads(meta_path.read_text()) if meta_path.exists() else {}
        ngrams = None
        ngram_range = tuple(meta.get("ngram_range", (3, 6)))
        if meta.get("kind") == BackendKind.SUBWORD_STATIC.value:
            grams, gram_vectors = read_vector_file(
                path.with_name(path.name + ".ngrams"), vectors.shape[1]
            )
            ngrams = dict(zip(grams, gram_vectors))
        return cls(words, vectors, ngrams=ngrams, ngram_range=ngram_range)


def write_vector_file(path: str | Path, words: Sequence[str], vectors: np.ndarray) -> None:
    vectors = np.asarray(vectors, dtype=np.float32)
    lines = [f"{len(words)} {vectors.shape[1]}"]
    for word, vec in zip(words, vectors):
        if not word or any(ch.isspace() for ch in word):
            raise VectorFileError(f"word {word!r} cannot be written to a vector file")
        lines.append(word + " " + " ".join(repr(float(x)) for x in vec))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_vector_file(
    path: str | Path, dimension: int | None = None
) -> tuple[list[str], np.ndarray]:
    """Parse ``vocab_size d`` header then ``word v1 .. vd`` lines."""
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"vector file not found: {path}")
    with path.open(encoding="utf-8") as fh:
        header = fh.readline().split()
        if len(header) != 2:
            raise VectorFileError(f"{path}: header must be 'vocab_size d'")
        size, d = int(header[0]), int(header[1])
        if dimension is not None and d != dimension:
            raise VectorFileError(f"{path}: file dimension {d} != expected {dimension}")
        words, rows = [], []
        for lineno, line in enumerate(fh, start=2):
            parts = line.rstrip("\n").split(" ")
            if parts == [""]:
                continue
            if len(parts) != d + 1:
                raise VectorFileError(f"{path}:{lineno}: expected {d} values, got {len(parts) - 1}")
            words.append(parts[0])
            rows.append([float(x) for x in parts[1:]])
    if len(words) != size:
        raise VectorFileError(f"{path}: header declares {size} words, found {len(words)}")
    return words, np.asarray(rows, dtype=np.float32).reshape(len(words), d)


@dataclass
class StaticTableConfig:
    kind: BackendKind = BackendKind.WORD_STATIC
    dimension: int = 300
    window: int = 5
    epochs: int = 5
    min_count: int = 1
    min_n: int = 3
    max_n: int = 6
    negative: int = 5
    bucket: int = 200_000
    seed: int = 0

    def __post_init__(self):
        self.kind = BackendKind(self.kind)
        if self.kind is BackendKind.CONTEXTUAL:
            raise ValueError("static table config needs a static backend kind")
        for name in ("dimension", "window", "epochs", "min_count", "bucket"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if not 1 <= self.min_n <= self.max_n:
            raise ValueError("n-gram range must satisfy 1 <= min_n <= max_n")


def _training_sentences(source) -> list[list[str]]:
    texts = source.texts if isinstance(source, LabeledCorpus) else list(source)
    return [tokens for tokens in (word_tokenize(t) if isinstance(t, str) else list(t) for t in texts) if tokens]


def acquire_static_table(source, cfg: StaticTableConfig) -> StaticEmbeddingTable:
    """Load a table from a vector file path, or train one on a corpus / iterable of texts.

    Training is skip-gram with negative sampling (gensim), single-threaded so
    a fixed seed gives identical vectors.
    """
    if isinstance(source, (str, Path)):
        table = StaticEmbeddingTable.load(source, cfg.dimension)
        if table.kind is not cfg.kind:
            raise VectorFileError(f"{source}: file holds a {table.kind.value} table, expected {cfg.kind.value}")
        return table

    sentences = _training_sentences(source)
    if not sentences:
        raise ValueError("cannot train a static table on an empty corpus")
    from gensim.models import FastText, Word2Vec
    from gensim.models.fasttext import compute_ngrams_bytes, ft_hash_bytes

    common = dict(
        vector_size=cfg.dimension,
        window=cfg.window,
        min_count=cfg.min_count,
        epochs=cfg.epochs,
        negative=cfg.negative,
        sg=1,
        workers=1,
        seed=cfg.seed,
    )
    if cfg.kind is BackendKind.WORD_STATIC:
        model = Word2Vec(sentences, **common)
        return StaticEmbeddingTable(list(model.wv.index_to_key), model.wv.vectors.copy())

    model = FastText(sentences, min_n=cfg.min_n, max_n=cfg.max_n, bucket=cfg.bucket, **common)
    wv = model.wv
    words = list(wv.index_to_key)
    ngrams: dict[str, np.ndarray] = {}
    for word in words:
        for gram in compute_ngrams_bytes(word, cfg.min_n, cfg.max_n):
            key = gram.decode("utf-8")
            if key not in ngrams:
                ngrams[key] = wv.vectors_ngrams[ft_hash_bytes(gram) % cfg.bucket].copy()
    vectors = np.stack([wv[w] for w in words])
    return StaticEmbeddingTable(words, vectors, ngrams=ngrams, ngram_range=(cfg.min_n, cfg.max_n))


class EmbeddingBackend:
    kind: BackendKind
    dimension: int
    max_len: int

    def tokenize(self, text: str) -> TokenSequence:
        raise NotImplementedError

    def embed(self, seq: TokenSequence) -> EmbeddedSequence:
        raise NotImplementedError

    @property
    def identifier(self) -> str:
        raise NotImplementedError

    def _check_text(self, text: str) -> None:
        if not text or not text.strip():
            raise ValueError("cannot tokenize empty text")


class StaticBackend(EmbeddingBackend):
    """Word-level or subword static backend over a ``StaticEmbeddingTable``.

    Ids are 0 for padding, 1 for out-of-vocabulary and ``2 + row`` otherwise.
    """

    def __init__(self, table: StaticEmbeddingTable, max_len: int = MAX_LEN):
        self.table = table
        self.kind = table.kind
        self.dimension = table.dimension
        self.max_len = max_len
        self._rows = np.vstack(
            [np.zeros((1, table.dimension), np.float32), table.unk[None, :], table.vectors]
        )

    @property
    def identifier(self) -> str:
        return f"{self.kind.value}:{self.table.digest()[:16]}"

    def tokenize(self, text: str) -> TokenSequence:
        self._check_text(text)
        tokens = word_tokenize(text)[: self.max_len]
        ids = tuple(self.table.index[t] + 2 if t in self.table.index else UNK_ID for t in tokens)
        return TokenSequence(tuple(tokens), ids, (1,) * len(tokens), self.max_len)

    def _matrix(self, seq: TokenSequence) -> np.ndarray:
        ids = np.asarray(seq.ids, dtype=np.int64)
        if ids.size and (ids.min() < 0 or ids.max() >= len(self._rows)):
            raise RuntimeError("token id outside the table; sequence came from another backend")
        mat = self._rows[ids].copy()
        if self.table.ngrams is not None:
            for pos, (tok, tid, m) in enumerate(zip(seq.tokens, seq.ids, seq.mask)):
                if tid == UNK_ID and m:
                    mat[pos] = self.table.lookup(tok)
        mat[np.asarray(seq.mask, dtype=bool) == 0] = 0.0
        return mat

    def embed(self, seq: TokenSequence) -> EmbeddedSequence:
        return EmbeddedSequence(self._matrix(seq), np.asarray(seq.mask, dtype=np.float32))

    def embed_batch(
        self, seqs: Sequence[TokenSequence], dtype: torch.dtype = torch.float32
    ) -> tuple[torch.Tensor, torch.Tensor]:
        length = max(len(s) for s in seqs)
        x = np.zeros((len(seqs), length, self.dimension), dtype=np.float32)
        mask = np.zeros((len(seqs), length), dtype=np.float32)
        for i, s in enumerate(seqs):
            x[i, : len(s)] = self._matrix(s)
            mask[i, : len(s)] = s.mask
        return torch.from_numpy(x).to(dtype), torch.from_numpy(mask).to(dtype)


class ContextualBackend(EmbeddingBackend):
    """Pre-trained transformer encoder with its own subword tokenizer.

    ``fine_tune`` is the default regime for models built on this backend;
    training configs may override it.
    """

    kind = BackendKind.CONTEXTUAL

    def __init__(
        self,
        checkpoint: str = DEFAULT_CHECKPOINT,
        max_len: int = MAX_LEN,
        fine_tune: bool = True,
        tokenizer=None,
        encoder: torch.nn.Module | None = None,
    ):
        if tokenizer is None or encoder is None:
            from transformers import AutoModel, AutoTokenizer

            tokenizer = tokenizer or AutoTokenizer.from_pretrained(checkpoint)
            encoder = encoder or AutoModel.from_pretrained(checkpoint)
        self.checkpoint = str(checkpoint)
        self.tokenizer = tokenizer
        self.encoder = encoder.eval()
        self.max_len = max_len
        self.fine_tune = fine_tune
        self.dimension = int(encoder.config.hidden_size)

    @property
    def identifier(self) -> str:
        return f"contextual:{self.checkpoint}"

    def tokenize(self, text: str) -> TokenSequence:
        self._check_text(text)
        ids = self.tokenizer(text, truncation=True, max_length=self.max_len)["input_ids"]
        tokens = self.tokenizer.convert_ids_to_tokens(ids)
        return TokenSequence(tuple(tokens), tuple(ids), (1,) * len(ids), self.max_len)

    def batch_ids(self, seqs: Sequence[TokenSequence]) -> tuple[torch.Tensor, torch.Tensor]:
        length = max(len(s) for s in seqs)
        pad_id = self.tokenizer.pad_token_id or 0
        ids = torch.full((len(seqs), length), pad_id, dtype=torch.long)
        mask = torch.zeros((len(seqs), length), dtype=torch.long)
        for i, s in enumerate(seqs):
            ids[i, : len(s)] = torch.tensor(s.ids)
            mask[i, : len(s)] = torch.tensor(s.mask)
        return ids, mask

    def encode(
        self, encoder: torch.nn.Module, ids: torch.Tensor, mask: torch.Tensor
    ) -> torch.Tensor:
        """Last hidden states with masked positions zeroed."""
        hidden = encoder(input_ids=ids, attention_mask=mask).last_hidden_state
        return hidden * mask.unsqueeze(-1).to(hidden.dtype)

    def embed(self, seq: TokenSequence) -> EmbeddedSequence:
        ids, mask = self.batch_ids([seq])
        was_training = self.encoder.training
        self.encoder.eval()
        with torch.no_grad():
            hidden = self.encode(self.encoder, ids, mask)[0]
        self.encoder.train(was_training)
        return EmbeddedSequence(hidden.float().numpy(), mask[0].float().numpy())


def make_static_backend(
    source, cfg: StaticTableConfig, max_len: int = MAX_LEN
) -> StaticBackend:
    return StaticBackend(acquire_static_table(source, cfg), max_len=max_len)


def tokenize(text: str, backend: EmbeddingBackend) -> TokenSequence:
    return backend.tokenize(text)


def embed(seq: TokenSequence, backend: EmbeddingBackend) -> EmbeddedSequence:
    return backend.embed(seq)


def tokenize_all(texts: Iterable[str], backend: EmbeddingBackend) -> list[TokenSequence]:
    return [backend.tokenize(t) for t in texts]
