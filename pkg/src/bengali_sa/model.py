"""Embedding -> recurrent/convolutional head -> concatenated features -> dense -> softmax."""

from __future__ import annotations

import copy
import enum
from dataclasses import asdict, dataclass, replace
from typing import Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from torch.nn.utils.rnn import pack_padded_sequence, pad_packed_sequence

from .corpus import SentimentLabel, labels_for_arity
from .embed import BackendKind, ContextualBackend, EmbeddedSequence, EmbeddingBackend, TokenSequence

INIT_SCHEME = "torch-default uniform fan-in (Linear/Conv1d U(+-1/sqrt(fan_in)), RNN U(+-1/sqrt(hidden)))"


class HeadKind(enum.Enum):
    GRU = "gru"
    LSTM = "lstm"
    CNN = "cnn"


class ModelConfigError(ValueError):
    pass


@dataclass(frozen=True)
class HeadConfig:
    """Head hyperparameters.

    For recurrent heads ``per_word_width`` is the width emitted per position
    summed over both directions, so each direction has ``per_word_width // 2``
    units. CNN heads use ``conv_layout`` "stacked" (one layer per kernel, fed
    into the next) or "parallel" (one branch per kernel, pooled and joined).
    """

    kind: HeadKind
    task_arity: int
    num_layers: int = 1
    per_word_width: int = 0
    dropout: float = 0.5
    kernel_sizes: tuple[int, ...] = ()
    filter_counts: tuple[int, ...] = ()
    conv_layout: str = "stacked"
    feature_mode: str = "concat"

    def __post_init__(self):
        object.__setattr__(self, "kind", HeadKind(self.kind))
        object.__setattr__(self, "kernel_sizes", tuple(self.kernel_sizes))
        object.__setattr__(self, "filter_counts", tuple(self.filter_counts))
        if self.task_arity not in (2, 3):
            raise ModelConfigError(f"task_arity must be 2 or 3, got {self.task_arity}")
        if not 0.0 <= self.dropout < 1.0:
            raise ModelConfigError("dropout must lie in [0, 1)")
        if self.kind is HeadKind.CNN:
            if not self.kernel_sizes or not self.filter_counts:
                raise ModelConfigError("CNN head needs kernel_sizes and filter_counts")
            if min(self.kernel_sizes) < 1 or min(self.filter_counts) < 1:
                raise ModelConfigError("kernel sizes and filter counts must be positive")
            if self.conv_layout == "stacked":
                if len(self.kernel_sizes) != len(self.filter_counts):
                    raise ModelConfigError("stacked CNN needs one filter count per kernel")
            elif self.conv_layout == "parallel":
                if len(self.filter_counts) not in (1, len(self.kernel_sizes)):
                    raise ModelConfigError("parallel CNN needs one shared or per-branch filter count")
            else:
                raise ModelConfigError(f"unknown conv_layout {self.conv_layout!r}")
        else:
            if self.num_layers < 1:
                raise ModelConfigError("recurrent head needs at least one layer")
            if self.per_word_width < 2 or self.per_word_width % 2:
                raise ModelConfigError("bidirectional per-word width must be a positive even number")
            if self.feature_mode not in ("concat", "final"):
                raise ModelConfigError(f"unknown feature_mode {self.feature_mode!r}")

    @property
    def hidden_size(self) -> int:
        return self.per_word_width // 2

    @property
    def branch_filters(self) -> tuple[int, ...]:
        if self.conv_layout == "parallel" and len(self.filter_counts) == 1:
            return self.filter_counts * len(self.kernel_sizes)
        return self.filter_counts

    def to_dict(self) -> dict:
        d = asdict(self)
        d["kind"] = self.kind.value
        d["kernel_sizes"] = list(self.kernel_sizes)
        d["filter_counts"] = list(self.filter_counts)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "HeadConfig":
        return cls(**d)


PRESET_HEADS = {
    (HeadKind.GRU, 2): HeadConfig(HeadKind.GRU, 2, num_layers=1, per_word_width=300, dropout=0.5),
    (HeadKind.GRU, 3): HeadConfig(HeadKind.GRU, 3, num_layers=2, per_word_width=350, dropout=0.5),
    # 100 units per direction per cell
    (HeadKind.LSTM, 2): HeadConfig(HeadKind.LSTM, 2, num_layers=3, per_word_width=200, dropout=0.5),
    (HeadKind.LSTM, 3): HeadConfig(HeadKind.LSTM, 3, num_layers=1, per_word_width=512, dropout=0.5),
    (HeadKind.CNN, 2): HeadConfig(
        HeadKind.CNN, 2, kernel_sizes=(3, 3), filter_counts=(64, 100), conv_layout="stacked"
    ),
    (HeadKind.CNN, 3): HeadConfig(
        HeadKind.CNN, 3, kernel_sizes=(1, 2, 3, 4), filter_counts=(200,), conv_layout="parallel"
    ),
}


def preset_head_config(kind: HeadKind | str, arity: int, **overrides) -> HeadConfig:
    cfg = PRESET_HEADS[(HeadKind(kind), arity)]
    return replace(cfg, **overrides) if overrides else cfg


class RecurrentHead(nn.Module):
    def __init__(self, input_dim: int, cfg: HeadConfig, max_len: int):
        super().__init__()
        rnn_cls = nn.GRU if cfg.kind is HeadKind.GRU else nn.LSTM
        self.rnn = rnn_cls(
            input_dim,
            cfg.hidden_size,
            num_layers=cfg.num_layers,
            bidirectional=True,
            batch_first=True,
            dropout=cfg.dropout if cfg.num_layers > 1 else 0.0,
        )
        self.max_len = max_len
        self.feature_mode = cfg.feature_mode
        self.per_word_width = cfg.per_word_width

    @property
    def feature_width(self) -> int:
        if self.feature_mode == "concat":
            return self.max_len * self.per_word_width
        return self.per_word_width

    def forward(self, x: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
        lengths = mask.sum(dim=1).long().cpu()
        packed = pack_padded_sequence(x, lengths, batch_first=True, enforce_sorted=False)
        out, state = self.rnn(packed)
        if self.feature_mode == "final":
            h_n = state[0] if isinstance(state, tuple) else state
            # last layer, forward and backward directions
            return torch.cat([h_n[-2], h_n[-1]], dim=-1)
        out, _ = pad_packed_sequence(out, batch_first=True, total_length=self.max_len)
        return out.reshape(out.shape[0], -1)


class ConvHead(nn.Module):
    """Stacked layers end in global max pooling; parallel branches pool then concatenate.

    Positions past each sequence's length are zeroed after every convolution,
    so outputs match those of the unpadded sequence with zero boundaries.
    """

    def __init__(self, input_dim: int, cfg: HeadConfig):
        super().__init__()
        self.layout = cfg.conv_layout
        self.kernel_sizes = cfg.kernel_sizes
        if self.layout == "stacked":
            dims = (input_dim,) + cfg.filter_counts
            self.convs = nn.ModuleList(
                nn.Conv1d(dims[i], dims[i + 1], k, padding="same")
                for i, k in enumerate(cfg.kernel_sizes)
            )
            self.feature_width = cfg.filter_counts[-1]
        else:
            self.convs = nn.ModuleList(
                nn.Conv1d(input_dim, f, k) for k, f in zip(cfg.kernel_sizes, cfg.branch_filters)
            )
            self.feature_width = sum(cfg.branch_filters)

    def forward(self, x: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
        h = x.transpose(1, 2)
        m = mask.unsqueeze(1)
        if self.layout == "stacked":
            for conv in self.convs:
                h = F.relu(conv(h)) * m
            # ReLU outputs are >= 0, so zeroed padding never wins the max
            return h.max(dim=2).values
        pooled = [
            (F.relu(conv(F.pad(h, (0, k - 1)))) * m).max(dim=2).values
            for conv, k in zip(self.convs, self.kernel_sizes)
        ]
        return torch.cat(pooled, dim=1)


class ClassifierModel(nn.Module):
    def __init__(
        self,
        backend: EmbeddingBackend,
        head_cfg: HeadConfig,
        num_classes: int,
        max_len: int | None = None,
        fine_tune_encoder: bool | None = None,
    ):
        super().__init__()
        if head_cfg.task_arity != num_classes:
            raise ModelConfigError(
                f"head configured for {head_cfg.task_arity} classes, model asked for {num_classes}"
            )
        if not isinstance(backend.dimension, int) or backend.dimension <= 0:
            raise ModelConfigError(f"backend dimension must be a positive integer, got {backend.dimension!r}")
        self.backend = backend
        self.head_cfg = head_cfg
        self.num_classes = num_classes
        self.max_len = max_len or backend.max_len
        if self.max_len > backend.max_len:
            raise ModelConfigError("model max_len exceeds the backend's max_len")
        self.dimension = backend.dimension
        self.encoder = None
        self.fine_tune_encoder = False
        if isinstance(backend, ContextualBackend):
            self.encoder = copy.deepcopy(backend.encoder)
            self.set_fine_tune(backend.fine_tune if fine_tune_encoder is None else fine_tune_encoder)
        if head_cfg.kind is HeadKind.CNN:
            self.head = ConvHead(self.dimension, head_cfg)
        else:
            self.head = RecurrentHead(self.dimension, head_cfg, self.max_len)
        self.dropout = nn.Dropout(head_cfg.dropout)
        self.dense = nn.Linear(self.head.feature_width, num_classes)

    @property
    def labels(self) -> tuple[SentimentLabel, ...]:
        return labels_for_arity(self.num_classes)

    @property
    def dtype(self) -> torch.dtype:
        return self.dense.weight.dtype

    def set_fine_tune(self, flag: bool) -> None:
        if self.encoder is None:
            return
        self.fine_tune_encoder = bool(flag)
        for p in self.encoder.parameters():
            p.requires_grad_(self.fine_tune_encoder)

    def train(self, mode: bool = True):
        super().train(mode)
        if self.encoder is not None and not self.fine_tune_encoder:
            self.encoder.eval()
        return self

    def _validate(self, x: torch.Tensor, mask: torch.Tensor) -> None:
        if x.dim() != 3:
            raise ValueError(f"expected a (batch, length, d) input, got shape {tuple(x.shape)}")
        if x.shape[2] != self.dimension:
            raise ValueError(f"input dimension {x.shape[2]} != backend dimension {self.dimension}")
        if x.shape[1] > self.max_len:
            raise ValueError(f"sequence length {x.shape[1]} exceeds max_len {self.max_len}")
        if mask.shape != x.shape[:2]:
            raise ValueError("mask shape must match (batch, length)")
        if not torch.isfinite(x).all():
            raise ValueError("input contains non-finite values")
        if (mask.sum(dim=1) < 1).any():
            raise ValueError("every sequence needs at least one unmasked position")

    def logits(self, x: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
        self._validate(x, mask)
        mask = mask.to(x.dtype)
        extra = self.max_len - x.shape[1]
        if extra:
            x = F.pad(x, (0, 0, 0, extra))
            mask = F.pad(mask, (0, extra))
        x = x * mask.unsqueeze(-1)
        features = self.head(x, mask)
        return self.dense(self.dropout(features))

    def forward(self, x: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
        return torch.softmax(self.logits(x, mask), dim=-1)

    def encode(self, seqs: Sequence[TokenSequence]) -> tuple[torch.Tensor, torch.Tensor]:
        """Embed token sequences; the contextual encoder runs with grad only when fine-tuning in train mode."""
        if self.encoder is not None:
            ids, mask = self.backend.batch_ids(seqs)
            with torch.set_grad_enabled(torch.is_grad_enabled() and self.fine_tune_encoder and self.training):
                hidden = self.backend.encode(self.encoder, ids, mask)
            return hidden.to(self.dtype), mask.to(self.dtype)
        return self.backend.embed_batch(seqs, dtype=self.dtype)

    def tokenize(self, texts: Sequence[str]) -> list[TokenSequence]:
        return [self.backend.tokenize(t) for t in texts]

    @torch.no_grad()
    def predict_proba(self, texts: Sequence[str], batch_size: int = 64) -> np.ndarray:
        was_training = self.training
        self.eval()
        out = []
        try:
            seqs = self.tokenize(texts)
            for i in range(0, len(seqs), batch_size):
                x, mask = self.encode(seqs[i:i + batch_size])
                out.append(self(x, mask).cpu().numpy())
        finally:
            self.train(was_training)
        return np.concatenate(out) if out else np.zeros((0, self.num_classes))

    def predict_labels(self, texts: Sequence[str]) -> list[SentimentLabel]:
        return [decide(p, self.num_classes) for p in self.predict_proba(texts)]

    def parameter_manifest(self) -> dict:
        params = {}
        components = {"encoder": 0, "head": 0, "dense": 0}
        trainable = 0
        for name, p in self.named_parameters():
            params[name] = {"shape": list(p.shape), "count": p.numel(), "trainable": p.requires_grad}
            components[name.split(".")[0]] += p.numel()
            trainable += p.numel() if p.requires_grad else 0
        manifest = {
            "backend": self.backend.identifier,
            "backend_kind": self.backend.kind.value,
            "dimension": self.dimension,
            "max_len": self.max_len,
            "num_classes": self.num_classes,
            "head": self.head_cfg.to_dict(),
            "feature_width": self.head.feature_width,
            "components": components,
            "total": sum(components.values()),
            "trainable": trainable,
            "parameters": params,
            "init": INIT_SCHEME,
        }
        if self.backend.kind is not BackendKind.CONTEXTUAL:
            table = self.backend.table
            manifest["static_table"] = {
                "words": len(table),
                "ngrams": len(table.ngrams or {}),
                "dimension": table.dimension,
                "trainable": False,
            }
        return manifest


def build_model(
    backend: EmbeddingBackend,
    head_cfg: HeadConfig,
    num_classes: int,
    seed: int = 0,
    max_len: int | None = None,
    fine_tune_encoder: bool | None = None,
) -> ClassifierModel:
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        return ClassifierModel(backend, head_cfg, num_classes, max_len, fine_tune_encoder)


def stack_embedded(batch: Sequence[EmbeddedSequence]) -> tuple[torch.Tensor, torch.Tensor]:
    length = max(e.matrix.shape[0] for e in batch)
    d = batch[0].dimension
    x = np.zeros((len(batch), length, d), dtype=np.float64)
    mask = np.zeros((len(batch), length), dtype=np.float64)
    for i, e in enumerate(batch):
        if e.dimension != d:
            raise ValueError("batch mixes embedding dimensions")
        x[i, : e.matrix.shape[0]] = e.matrix
        mask[i, : e.mask.shape[0]] = e.mask
    return torch.from_numpy(x), torch.from_numpy(mask)


@torch.no_grad()
def forward(model: ClassifierModel, batch: Sequence[EmbeddedSequence]) -> np.ndarray:
    """Class probabilities, one row per embedded sequence, in eval mode."""
    x, mask = stack_embedded(batch)
    was_training = model.training
    model.eval()
    try:
        return model(x.to(model.dtype), mask.to(model.dtype)).cpu().numpy()
    finally:
        model.train(was_training)


def decide(probabilities: Sequence[float], num_classes: int) -> SentimentLabel:
    """Argmax with ties going to the lowest class code."""
    probs = np.asarray(probabilities)
    if probs.shape != (num_classes,):
        raise ValueError(f"expected {num_classes} probabilities, got shape {probs.shape}")
    return labels_for_arity(num_classes)[int(np.argmax(probs))]


def predict(model: ClassifierModel, text: str) -> SentimentLabel:
    return model.predict_labels([text])[0]
