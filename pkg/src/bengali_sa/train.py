"""Adam + L2 training with validation early stopping, checkpoints and run manifests."""

from __future__ import annotations

import contextlib
import copy
import hashlib
import io
import json
import logging
import math
import platform
import sys
import warnings
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Iterator, Mapping, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .corpus import LabeledCorpus, SplitCorpus, class_index
from .embed import BackendKind, ContextualBackend, EmbeddingBackend, StaticBackend, StaticEmbeddingTable
from .model import ClassifierModel, HeadConfig, ModelConfigError

logger = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "bengali_sa.checkpoint"
CHECKPOINT_VERSION = 1
DEFAULT_LR = {BackendKind.CONTEXTUAL: 2e-5, BackendKind.WORD_STATIC: 1e-3, BackendKind.SUBWORD_STATIC: 1e-3}


class TrainConfigError(ValueError):
    pass


class TrainingDivergedError(RuntimeError):
    pass


class CheckpointError(RuntimeError):
    pass


class CheckpointDigestWarning(UserWarning):
    pass


@dataclass
class TrainConfig:
    learning_rate: float | None = None  # None -> per-backend default
    batch_size: int = 32
    max_epochs: int = 20
    patience: int | None = 3  # None disables early stopping
    l2_coefficient: float = 0.01
    seed: int = 0
    fine_tune_encoder: bool = True
    deterministic: bool = True

    def __post_init__(self):
        if self.learning_rate is not None and not self.learning_rate > 0:
            raise TrainConfigError(f"learning_rate must be positive, got {self.learning_rate}")
        if self.batch_size < 1:
            raise TrainConfigError("batch_size must be a positive integer")
        if self.max_epochs < 1:
            raise TrainConfigError("max_epochs must be a positive integer")
        if self.patience is not None and not 0 <= self.patience <= self.max_epochs:
            raise TrainConfigError("patience must lie in [0, max_epochs]")
        if self.l2_coefficient < 0:
            raise TrainConfigError("l2_coefficient must be non-negative")

    def resolved(self, kind: BackendKind) -> "TrainConfig":
        if self.learning_rate is not None:
            return self
        return TrainConfig(**{**asdict(self), "learning_rate": DEFAULT_LR[kind]})

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: Mapping) -> "TrainConfig":
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise TrainConfigError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class TrainingHistory:
    train_loss: list[float] = field(default_factory=list)
    train_accuracy: list[float] = field(default_factory=list)
    valid_accuracy: list[float] = field(default_factory=list)
    best_epoch: int = 0  # zero-based

    @property
    def epochs(self) -> int:
        return len(self.train_loss)

    def to_dict(self) -> dict:
        return asdict(self)


@contextlib.contextmanager
def deterministic_mode(enabled: bool = True) -> Iterator[None]:
    """Single-threaded deterministic kernels for the duration of the block."""
    if not enabled:
        yield
        return
    threads = torch.get_num_threads()
    previous = torch.are_deterministic_algorithms_enabled()
    torch.set_num_threads(1)
    torch.use_deterministic_algorithms(True)
    try:
        yield
    finally:
        torch.use_deterministic_algorithms(previous)
        torch.set_num_threads(threads)


def l2_parameters(model: ClassifierModel) -> list[torch.nn.Parameter]:
    """Trainable non-bias parameters; a frozen encoder contributes nothing."""
    return [p for name, p in model.named_parameters() if p.requires_grad and "bias" not in name]


def l2_penalty(model: ClassifierModel) -> torch.Tensor:
    params = l2_parameters(model)
    if not params:
        return torch.zeros((), dtype=model.dtype)
    return sum((p * p).sum() for p in params)


def training_loss(
    model: ClassifierModel,
    x: torch.Tensor,
    mask: torch.Tensor,
    targets: torch.Tensor,
    l2_coefficient: float,
) -> torch.Tensor:
    loss = F.cross_entropy(model.logits(x, mask), targets)
    if l2_coefficient:
        loss = loss + l2_coefficient * l2_penalty(model)
    return loss


def _targets(corpus: LabeledCorpus, arity: int) -> torch.Tensor:
    return torch.tensor([class_index(l, arity) for l in corpus.labels], dtype=torch.long)


@torch.no_grad()
def _accuracy(model: ClassifierModel, seqs, targets: torch.Tensor, batch_size: int) -> float:
    model.eval()
    correct = 0
    for i in range(0, len(seqs), batch_size):
        x, mask = model.encode(seqs[i:i + batch_size])
        pred = model.logits(x, mask).argmax(dim=-1)
        correct += int((pred == targets[i:i + batch_size]).sum())
    return correct / len(seqs)


def train(
    model: ClassifierModel, splits: SplitCorpus, cfg: TrainConfig
) -> tuple[ClassifierModel, TrainingHistory]:
    """Fit ``model`` on ``splits.train`` and keep the best-validation-accuracy epoch.

    Training stops once ``cfg.patience`` epochs have passed without
    improvement, so at most ``best_epoch + 1 + patience`` epochs run and
    ``patience=0`` trains a single epoch. With an empty
    validation split early stopping must be disabled (``patience=None``);
    the last epoch is then kept.
    """
    if splits.task_arity != model.num_classes:
        raise ModelConfigError(
            f"{splits.task_arity}-class splits cannot train a {model.num_classes}-class model"
        )
    if len(splits.train) == 0:
        raise ValueError("train split is empty")
    if len(splits.valid) == 0 and cfg.patience is not None:
        raise ValueError("validation split is empty; set patience=None to train without it")
    cfg = cfg.resolved(model.backend.kind)
    model.set_fine_tune(cfg.fine_tune_encoder)

    history = TrainingHistory()
    with deterministic_mode(cfg.deterministic), torch.random.fork_rng(devices=[]):
        torch.manual_seed(cfg.seed)
        generator = torch.Generator().manual_seed(cfg.seed)
        train_seqs = model.tokenize(splits.train.texts)
        train_y = _targets(splits.train, model.num_classes)
        valid_seqs = model.tokenize(splits.valid.texts) if len(splits.valid) else []
        valid_y = _targets(splits.valid, model.num_classes) if len(splits.valid) else None
        optimizer = torch.optim.Adam(
            [p for p in model.parameters() if p.requires_grad], lr=cfg.learning_rate
        )

        best_acc = -math.inf
        best_state = None
        since_best = 0
        for epoch in range(cfg.max_epochs):
            model.train()
            order = torch.randperm(len(train_seqs), generator=generator)
            total, seen = 0.0, 0
            for start in range(0, len(order), cfg.batch_size):
                idx = order[start:start + cfg.batch_size]
                x, mask = model.encode([train_seqs[i] for i in idx])
                loss = training_loss(model, x, mask, train_y[idx], cfg.l2_coefficient)
                if not torch.isfinite(loss):
                    raise TrainingDivergedError(
                        f"non-finite loss {loss.item()} at epoch {epoch}, batch starting {start}; "
                        f"try a lower learning rate (current {cfg.learning_rate})"
                    )
                optimizer.zero_grad()
                loss.backward()
                optimizer.step()
                total += loss.item() * len(idx)
                seen += len(idx)
            history.train_loss.append(total / seen)
            history.train_accuracy.append(_accuracy(model, train_seqs, train_y, cfg.batch_size))
            if valid_seqs:
                acc = _accuracy(model, valid_seqs, valid_y, cfg.batch_size)
            else:
                acc = math.nan
            history.valid_accuracy.append(acc)
            logger.info(
                "epoch %d loss %.4f train_acc %.4f valid_acc %.4f",
                epoch, history.train_loss[-1], history.train_accuracy[-1], acc,
            )

            improved = valid_seqs and acc > best_acc
            if improved or not valid_seqs:
                best_acc = acc
                history.best_epoch = epoch
                best_state = copy.deepcopy(model.state_dict())
                since_best = 0
            else:
                since_best += 1
            if valid_seqs and cfg.patience is not None and since_best >= cfg.patience:
                break

    model.load_state_dict(best_state)
    model.eval()
    return model, history


def file_digest(path: str | Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def environment_descriptor() -> dict:
    import gensim
    import transformers

    return {
        "python": sys.version.split()[0],
        "platform": platform.platform(),
        "torch": torch.__version__,
        "numpy": np.__version__,
        "gensim": gensim.__version__,
        "transformers": transformers.__version__,
    }


def run_manifest(
    model: ClassifierModel,
    cfg: TrainConfig,
    data_paths: Mapping[str, str | Path] | None = None,
    history: TrainingHistory | None = None,
    **extra,
) -> dict:
    data_paths = data_paths or {}
    return {
        "train_config": cfg.resolved(model.backend.kind).to_dict(),
        "seed": cfg.seed,
        "backend": model.backend.identifier,
        "head": model.head_cfg.to_dict(),
        "num_classes": model.num_classes,
        "data": {k: {"path": str(p), "sha256": file_digest(p)} for k, p in data_paths.items()},
        "environment": environment_descriptor(),
        "parameters": {k: v for k, v in model.parameter_manifest().items() if k != "parameters"},
        "history": history.to_dict() if history else None,
        **extra,
    }


def _backend_descriptor(backend: EmbeddingBackend) -> dict:
    desc = {
        "kind": backend.kind.value,
        "identifier": backend.identifier,
        "dimension": backend.dimension,
        "max_len": backend.max_len,
    }
    if isinstance(backend, ContextualBackend):
        desc["checkpoint"] = backend.checkpoint
    return desc


def _static_payload(table: StaticEmbeddingTable) -> dict:
    payload = {
        "words": list(table.words),
        "vectors": torch.from_numpy(table.vectors.copy()),
        "unk": torch.from_numpy(table.unk.copy()),
        "ngram_range": list(table.ngram_range),
        "ngrams": None,
        "ngram_vectors": None,
    }
    if table.ngrams is not None:
        grams = sorted(table.ngrams)
        payload["ngrams"] = grams
        payload["ngram_vectors"] = torch.from_numpy(np.stack([table.ngrams[g] for g in grams]))
    return payload


def _config_digest(payload: Mapping) -> str:
    keyed = {k: payload[k] for k in ("backend", "head", "num_classes", "max_len", "train_config", "seed", "data_digests")}
    return hashlib.sha256(json.dumps(keyed, sort_keys=True).encode()).hexdigest()


def save_checkpoint(
    model: ClassifierModel,
    path: str | Path,
    cfg: TrainConfig | None = None,
    data_digests: Mapping[str, str] | None = None,
    history: TrainingHistory | None = None,
) -> None:
    """Self-describing checkpoint: parameters, configs, backend identity and data digests.

    Static tables are embedded so the checkpoint reloads on its own; a frozen
    contextual encoder is left out and reloaded from its pre-trained source.
    """
    state = model.state_dict()
    if model.encoder is not None and not model.fine_tune_encoder:
        state = {k: v for k, v in state.items() if not k.startswith("encoder.")}
    payload = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "backend": _backend_descriptor(model.backend),
        "head": model.head_cfg.to_dict(),
        "num_classes": model.num_classes,
        "max_len": model.max_len,
        "fine_tune_encoder": model.fine_tune_encoder,
        "train_config": cfg.resolved(model.backend.kind).to_dict() if cfg else None,
        "seed": cfg.seed if cfg else None,
        "data_digests": dict(data_digests or {}),
        "history": history.to_dict() if history else None,
        "static_table": _static_payload(model.backend.table) if isinstance(model.backend, StaticBackend) else None,
        "state_dict": state,
    }
    payload["config_digest"] = _config_digest(payload)
    # saving through a buffer keeps the archive's internal name independent of ``path``
    buf = io.BytesIO()
    torch.save(payload, buf)
    Path(path).write_bytes(buf.getvalue())


def read_checkpoint(path: str | Path) -> dict:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    try:
        payload = torch.load(path, map_location="cpu", weights_only=True)
    except Exception as exc:
        raise CheckpointError(f"{path}: unreadable checkpoint ({exc})") from exc
    if not isinstance(payload, dict) or payload.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError(f"{path}: not a {CHECKPOINT_FORMAT} file")
    if payload.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {payload.get('version')}")
    return payload


def _restore_backend(payload: Mapping) -> EmbeddingBackend:
    desc = payload["backend"]
    if desc["kind"] == BackendKind.CONTEXTUAL.value:
        return ContextualBackend(desc["checkpoint"], max_len=desc["max_len"])
    st = payload["static_table"]
    ngrams = None
    if st["ngrams"] is not None:
        ngrams = dict(zip(st["ngrams"], st["ngram_vectors"].numpy()))
    table = StaticEmbeddingTable(
        st["words"], st["vectors"].numpy(), ngrams=ngrams,
        ngram_range=tuple(st["ngram_range"]), unk=st["unk"].numpy(),
    )
    return StaticBackend(table, max_len=desc["max_len"])


def load_checkpoint(
    path: str | Path,
    backend: EmbeddingBackend | None = None,
    on_digest_mismatch: str = "warn",
) -> ClassifierModel:
    """Rebuild a model from ``path``.

    A supplied ``backend`` must carry the identifier recorded at save time.
    If the recorded configuration no longer matches its digest the load
    warns, or raises with ``on_digest_mismatch="error"``.
    """
    payload = read_checkpoint(path)
    if _config_digest(payload) != payload.get("config_digest"):
        msg = f"{path}: configuration digest mismatch; the checkpoint metadata was modified"
        if on_digest_mismatch == "error":
            raise CheckpointError(msg)
        warnings.warn(msg, CheckpointDigestWarning)
    expected = payload["backend"]["identifier"]
    if backend is None:
        backend = _restore_backend(payload)
    if backend.identifier != expected:
        raise CheckpointError(
            f"{path}: checkpoint was trained with backend {expected}, got {backend.identifier}"
        )
    model = ClassifierModel(
        backend,
        HeadConfig.from_dict(payload["head"]),
        payload["num_classes"],
        max_len=payload["max_len"],
        fine_tune_encoder=payload["fine_tune_encoder"],
    )
    encoder_omitted = model.encoder is not None and not payload["fine_tune_encoder"]
    missing, unexpected = model.load_state_dict(payload["state_dict"], strict=not encoder_omitted)
    if encoder_omitted and (unexpected or any(not k.startswith("encoder.") for k in missing)):
        raise CheckpointError(f"{path}: parameter names do not match the model")
    model.eval()
    model.checkpoint_meta = {k: v for k, v in payload.items() if k not in ("state_dict", "static_table")}
    return model


def verify_data_digests(
    model_or_meta, paths: Mapping[str, str | Path], on_mismatch: str = "warn"
) -> list[str]:
    """Compare data files against digests recorded in a checkpoint; returns mismatching keys."""
    meta = getattr(model_or_meta, "checkpoint_meta", model_or_meta)
    recorded = meta.get("data_digests") or {}
    bad = [k for k, p in paths.items() if k in recorded and recorded[k] != file_digest(p)]
    if bad:
        msg = f"data files differ from those used in training: {', '.join(bad)}"
        if on_mismatch == "error":
            raise CheckpointError(msg)
        warnings.warn(msg, CheckpointDigestWarning)
    return bad


def corpus_digests(paths: Mapping[str, str | Path]) -> dict[str, str]:
    return {k: file_digest(p) for k, p in paths.items()}

