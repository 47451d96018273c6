import numpy as np
import pytest
import torch
from hypothesis import given
from hypothesis import strategies as st

from bengali_sa.corpus import LabeledCorpus, SplitCorpus
from bengali_sa.embed import BackendKind, StaticBackend, StaticTableConfig, acquire_static_table
from bengali_sa.model import ModelConfigError, build_model, preset_head_config
from bengali_sa.train import (
    CheckpointDigestWarning,
    CheckpointError,
    TrainConfig,
    TrainConfigError,
    TrainingDivergedError,
    file_digest,
    l2_parameters,
    load_checkpoint,
    read_checkpoint,
    run_manifest,
    save_checkpoint,
    train,
    verify_data_digests,
)

from conftest import SAMPLE_SENTENCE, separable_splits, write_tsv

PROBE = [SAMPLE_SENTENCE, "খুব খারাপ লাগল", "একদম নতুন শব্দ"]


@pytest.fixture(scope="module")
def splits2():
    return separable_splits(arity=2, n_train=24)


@pytest.fixture(scope="module")
def word_backend(splits2):
    cfg = StaticTableConfig(BackendKind.WORD_STATIC, dimension=8, epochs=2)
    return StaticBackend(acquire_static_table(splits2.train, cfg))


@pytest.fixture(scope="module")
def subword_backend(splits2):
    cfg = StaticTableConfig(BackendKind.SUBWORD_STATIC, dimension=8, epochs=2, bucket=2000)
    return StaticBackend(acquire_static_table(splits2.train, cfg))


def small_model(backend, kind="gru", arity=2, seed=0):
    extra = {} if kind == "cnn" else {"per_word_width": 4}
    return build_model(backend, preset_head_config(kind, arity, **extra), arity, seed=seed)


def quick_cfg(**kw):
    base = dict(learning_rate=1e-2, batch_size=8, max_epochs=3, patience=3, seed=0)
    base.update(kw)
    if base["patience"] is not None:
        base["patience"] = min(base["patience"], base["max_epochs"])
    return TrainConfig(**base)


class TestTrainConfig:
    def test_defaults(self):
        cfg = TrainConfig()
        assert (cfg.batch_size, cfg.max_epochs, cfg.patience, cfg.l2_coefficient) == (32, 20, 3, 0.01)
        assert cfg.fine_tune_encoder is True
        assert cfg.resolved(BackendKind.CONTEXTUAL).learning_rate == 2e-5
        assert cfg.resolved(BackendKind.WORD_STATIC).learning_rate == 1e-3

    @pytest.mark.parametrize(
        "kw",
        [
            dict(learning_rate=-1e-3),
            dict(learning_rate=0.0),
            dict(batch_size=0),
            dict(max_epochs=0),
            dict(patience=-1),
            dict(patience=5, max_epochs=4),
            dict(l2_coefficient=-0.1),
        ],
    )
    def test_invalid(self, kw):
        with pytest.raises(TrainConfigError):
            TrainConfig(**kw)

    def test_from_dict_rejects_unknown(self):
        with pytest.raises(TrainConfigError):
            TrainConfig.from_dict({"momentum": 0.9})

    def test_roundtrip(self):
        cfg = TrainConfig(learning_rate=0.1, patience=None)
        assert TrainConfig.from_dict(cfg.to_dict()) == cfg


class TestTrain:
    def test_patience_zero_one_epoch(self, splits2, word_backend):
        _, hist = train(small_model(word_backend), splits2, quick_cfg(patience=0, max_epochs=1))
        assert hist.epochs == 1 and hist.best_epoch == 0

    def test_history_invariants(self, splits2, word_backend):
        cfg = quick_cfg(max_epochs=8, patience=1, learning_rate=1e-3)
        _, hist = train(small_model(word_backend), splits2, cfg)
        assert hist.epochs <= cfg.max_epochs
        assert hist.epochs <= hist.best_epoch + 1 + cfg.patience
        assert hist.valid_accuracy[hist.best_epoch] == max(hist.valid_accuracy)
        assert hist.valid_accuracy.index(max(hist.valid_accuracy)) == hist.best_epoch
        assert all(np.isfinite(hist.train_loss))

    def test_best_state_restored(self, splits2, word_backend):
        model, hist = train(small_model(word_backend), splits2, quick_cfg(max_epochs=4))
        from bengali_sa.evaluation import evaluate

        assert evaluate(model, splits2.valid).accuracy == pytest.approx(hist.valid_accuracy[hist.best_epoch])

    def test_deterministic_history_and_checkpoint(self, tmp_path, splits2, subword_backend):
        paths = []
        hists = []
        for run in range(2):
            model, hist = train(small_model(subword_backend, "lstm"), splits2, quick_cfg())
            paths.append(tmp_path / f"run{run}.pt")
            save_checkpoint(model, paths[-1], quick_cfg(), history=hist)
            hists.append(hist)
        assert hists[0] == hists[1]
        assert paths[0].read_bytes() == paths[1].read_bytes()

    def test_global_rng_untouched(self, splits2, word_backend):
        torch.manual_seed(123)
        expected = torch.rand(3)
        torch.manual_seed(123)
        train(small_model(word_backend), splits2, quick_cfg(max_epochs=1))
        assert torch.equal(torch.rand(3), expected)

    def test_arity_mismatch(self, word_backend):
        with pytest.raises(ModelConfigError):
            train(small_model(word_backend, arity=3), separable_splits(arity=2), quick_cfg())

    def test_empty_valid_needs_patience_none(self, splits2, word_backend):
        empty = LabeledCorpus((), 2)
        no_valid = SplitCorpus(splits2.train, empty, splits2.test)
        with pytest.raises(ValueError, match="validation"):
            train(small_model(word_backend), no_valid, quick_cfg())
        _, hist = train(small_model(word_backend), no_valid, quick_cfg(patience=None, max_epochs=2))
        assert hist.epochs == 2 and hist.best_epoch == 1

    def test_divergence_aborts(self, splits2, word_backend):
        model = small_model(word_backend)
        with torch.no_grad():
            model.dense.bias.fill_(float("nan"))
        with pytest.raises(TrainingDivergedError, match="non-finite"):
            train(model, splits2, quick_cfg())

    def test_l2_shrinks_weights(self, splits2, word_backend):
        def norm(l2):
            model, _ = train(
                small_model(word_backend, "cnn"), splits2,
                quick_cfg(l2_coefficient=l2, max_epochs=5, patience=None, learning_rate=1e-2),
            )
            return float(sum((p.detach() ** 2).sum() for p in l2_parameters(model)))

        assert norm(1e3) < norm(0.0)

    def test_l2_excludes_bias_and_frozen_encoder(self, contextual_backend):
        model = build_model(contextual_backend, preset_head_config("gru", 2, per_word_width=4), 2, fine_tune_encoder=False)
        names = {id(p) for p in l2_parameters(model)}
        assert all(id(p) not in names for n, p in model.named_parameters() if "bias" in n)
        assert all(id(p) not in names for p in model.encoder.parameters())

    def test_contextual_fine_tune_updates_encoder(self, contextual_backend, splits2):
        model = build_model(contextual_backend, preset_head_config("gru", 2, per_word_width=4), 2)
        before = [p.detach().clone() for p in model.encoder.parameters()]
        shared = [p.detach().clone() for p in contextual_backend.encoder.parameters()]
        train(model, splits2, quick_cfg(max_epochs=1, learning_rate=1e-3))
        assert any(not torch.equal(a, b) for a, b in zip(before, model.encoder.parameters()))
        # the model trains its own copy; the backend's encoder is untouched
        assert all(torch.equal(a, b) for a, b in zip(shared, contextual_backend.encoder.parameters()))

    def test_contextual_frozen_keeps_encoder(self, contextual_backend, splits2):
        model = build_model(contextual_backend, preset_head_config("cnn", 2), 2)
        before = [p.detach().clone() for p in model.encoder.parameters()]
        train(model, splits2, quick_cfg(max_epochs=1, fine_tune_encoder=False))
        assert all(torch.equal(a, b) for a, b in zip(before, model.encoder.parameters()))


class TestCheckpoint:
    @pytest.mark.parametrize("kind", ["gru", "lstm", "cnn"])
    def test_roundtrip_static(self, tmp_path, subword_backend, kind):
        model = small_model(subword_backend, kind, seed=4)
        before = model.predict_proba(PROBE)
        save_checkpoint(model, tmp_path / "m.pt", quick_cfg())
        loaded = load_checkpoint(tmp_path / "m.pt")
        assert np.abs(loaded.predict_proba(PROBE) - before).max() < 1e-6
        assert loaded.checkpoint_meta["train_config"]["learning_rate"] == 1e-2

    @pytest.mark.parametrize("fine_tune", [True, False])
    def test_roundtrip_contextual(self, tmp_path, contextual_backend, fine_tune):
        model = build_model(
            contextual_backend, preset_head_config("gru", 3, per_word_width=4), 3, fine_tune_encoder=fine_tune
        )
        if fine_tune:
            with torch.no_grad():
                next(model.encoder.parameters()).add_(0.05)
        before = model.predict_proba(PROBE)
        save_checkpoint(model, tmp_path / "m.pt")
        loaded = load_checkpoint(tmp_path / "m.pt")
        assert np.abs(loaded.predict_proba(PROBE) - before).max() < 1e-6
        has_encoder = any(k.startswith("encoder.") for k in read_checkpoint(tmp_path / "m.pt")["state_dict"])
        assert has_encoder is fine_tune

    def test_backend_mismatch(self, tmp_path, word_backend, subword_backend):
        save_checkpoint(small_model(word_backend), tmp_path / "m.pt")
        with pytest.raises(CheckpointError, match="backend"):
            load_checkpoint(tmp_path / "m.pt", backend=subword_backend)

    def test_tamper_warns(self, tmp_path, word_backend):
        save_checkpoint(small_model(word_backend), tmp_path / "m.pt", quick_cfg())
        payload = torch.load(tmp_path / "m.pt", weights_only=True)
        payload["train_config"]["learning_rate"] = 0.5
        torch.save(payload, tmp_path / "m.pt")
        with pytest.warns(CheckpointDigestWarning):
            load_checkpoint(tmp_path / "m.pt")
        with pytest.raises(CheckpointError):
            load_checkpoint(tmp_path / "m.pt", on_digest_mismatch="error")

    def test_corrupt(self, tmp_path):
        (tmp_path / "m.pt").write_bytes(b"not a checkpoint")
        with pytest.raises(CheckpointError):
            load_checkpoint(tmp_path / "m.pt")

    def test_wrong_format(self, tmp_path):
        torch.save({"format": "other"}, tmp_path / "m.pt")
        with pytest.raises(CheckpointError):
            load_checkpoint(tmp_path / "m.pt")

    def test_missing(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            load_checkpoint(tmp_path / "none.pt")

    def test_data_digests(self, tmp_path, word_backend):
        data = write_tsv(tmp_path / "train.tsv", [("1", "Sports", "আমি ভালো", "positive")])
        save_checkpoint(small_model(word_backend), tmp_path / "m.pt", data_digests={"train": file_digest(data)})
        model = load_checkpoint(tmp_path / "m.pt")
        assert verify_data_digests(model, {"train": data}) == []
        data.write_text(data.read_text(encoding="utf-8") + "2\tSports\tনা\tnegative\n", encoding="utf-8")
        with pytest.warns(CheckpointDigestWarning):
            assert verify_data_digests(model, {"train": data}) == ["train"]

    def test_run_manifest(self, tmp_path, word_backend):
        data = write_tsv(tmp_path / "train.tsv", [("1", "Sports", "আমি ভালো", "positive")])
        man = run_manifest(small_model(word_backend), TrainConfig(), {"train": data})
        assert man["train_config"]["learning_rate"] == 1e-3
        assert man["data"]["train"]["sha256"] == file_digest(data)
        assert {"torch", "python", "numpy"} <= set(man["environment"])
        assert man["parameters"]["total"] > 0


@given(st.integers(0, 5), st.integers(1, 8))
def test_patience_bound_config(patience, max_epochs):
    if patience > max_epochs:
        with pytest.raises(TrainConfigError):
            TrainConfig(patience=patience, max_epochs=max_epochs)
    else:
        assert TrainConfig(patience=patience, max_epochs=max_epochs).patience == patience
