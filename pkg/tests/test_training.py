import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from flowmoe.checkpoint import FORMAT_VERSION, load_checkpoint, save_checkpoint
from flowmoe.errors import (
    CheckpointIntegrityError,
    CheckpointVersionError,
    ConfigError,
    TrainingDivergedError,
)
from flowmoe.metrics import EvalReport, weighted_mean
from flowmoe.model import ModelConfig, build_model
from flowmoe.pipeline import EncodedDataset
from flowmoe.synthetic import make_blobs
from flowmoe.tensor import RngState, Tensor
from flowmoe.training import (
    TrainConfig,
    evaluate,
    expert_utilization,
    fit,
    history_to_json,
    model_config_for,
    total_loss,
    train,
)

TINY = dict(batch_size=64, max_epochs=3, n_experts=4, top_k=2,
            cnn_filters=(4, 4, 4, 8), expert_hidden=4)


def tiny_blob_split(n=540, seed=0):
    data = make_blobs(n, seed=seed)
    cut = int(n * 2 / 3)
    train_set = EncodedDataset(x=data.x[:cut], y=data.y[:cut],
                               class_names=data.class_names)
    test_set = EncodedDataset(x=data.x[cut:], y=data.y[cut:],
                              class_names=data.class_names)
    return train_set, test_set


class TestTotalLoss:
    def test_alpha_zero_is_pure_cross_entropy(self, rng):
        logits = Tensor(rng.normal((4, 9)))
        gates = Tensor(np.abs(rng.normal((4, 3))))
        loss, parts = total_loss(logits, [0, 1, 2, 3], gates=gates, alpha=0.0)
        assert parts["total"] == pytest.approx(parts["cross_entropy"], abs=1e-15)

    def test_uniform_statistics_add_nothing(self, rng):
        logits = Tensor(rng.normal((4, 9)))
        gates = Tensor(np.full((4, 8), 1 / 8))
        load_p = Tensor(np.full((4, 8), 0.25))
        loss, parts = total_loss(logits, [0, 1, 2, 3], gates=gates,
                                 load_p=load_p, alpha=0.1)
        assert parts["importance"] <= 1e-30
        assert parts["load"] <= 1e-30
        assert parts["total"] == pytest.approx(parts["cross_entropy"], abs=1e-12)

    def test_hand_derived_combination(self):
        # CE = ln(1 + e^c) = 1 for c = ln(e - 1); CV^2 of [a, 1-a] is
        # (2a - 1)^2, which is 0.5 for a = (1 + sqrt(0.5)) / 2.
        c = math.log(math.e - 1)
        a = 0.5 + math.sqrt(0.125)
        logits = Tensor(np.array([[0.0, c]]))
        gates = Tensor(np.array([[a, 1 - a]]))
        load_p = Tensor(np.array([[a, 1 - a]]))
        loss, parts = total_loss(logits, [0], gates=gates, load_p=load_p, alpha=0.1)
        assert parts["cross_entropy"] == pytest.approx(1.0, abs=1e-12)
        assert parts["importance"] == pytest.approx(0.5, abs=1e-9)
        assert parts["load"] == pytest.approx(0.5, abs=1e-9)
        assert parts["total"] == pytest.approx(1.1, abs=1e-9)

    def test_components_sum(self, rng):
        logits = Tensor(rng.normal((3, 9)))
        gates = Tensor(np.abs(rng.normal((3, 4))) + 0.1)
        load_p = Tensor(np.abs(rng.normal((3, 4))) + 0.1)
        loss, parts = total_loss(logits, [1, 2, 3], gates=gates, load_p=load_p,
                                 alpha=0.37)
        expected = parts["cross_entropy"] + 0.37 * (parts["importance"] + parts["load"])
        assert parts["total"] == pytest.approx(expected, rel=1e-12)
        assert float(loss.data) == parts["total"]


class TestTrain:
    def test_loss_decreases_and_accuracy_rises(self):
        train_set, _ = tiny_blob_split()
        config = TrainConfig(seed=3, max_epochs=5, **{k: v for k, v in TINY.items()
                                                      if k != "max_epochs"})
        model, history = fit(train_set, config)
        assert history[4]["total"] < history[0]["total"]
        assert history[4]["accuracy"] > history[0]["accuracy"]

    def test_same_seed_identical_parameters(self):
        train_set, _ = tiny_blob_split()
        config = TrainConfig(seed=11, **TINY)
        model_a, _ = fit(train_set, config)
        model_b, _ = fit(train_set, config)
        state_a, state_b = model_a.state_dict(), model_b.state_dict()
        assert state_a.keys() == state_b.keys()
        for key in state_a:
            np.testing.assert_array_equal(state_a[key], state_b[key])

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")  # nan propagates by design
    def test_nan_input_aborts_with_diagnostic(self):
        train_set, _ = tiny_blob_split(n=180)
        train_set.x[3, 0, 0] = np.nan
        config = TrainConfig(seed=0, **TINY)
        with pytest.raises(TrainingDivergedError, match="cross_entropy.*epoch 1"):
            fit(train_set, config)

    def test_empty_training_set_rejected(self):
        empty = EncodedDataset(x=np.zeros((0, 6, 13)), y=np.zeros(0, dtype=np.int64),
                               class_names=("a",))
        with pytest.raises(ConfigError):
            fit(empty, TrainConfig(seed=0, **TINY))

    def test_importance_loss_trends_down(self):
        # Start from a router that heavily favors expert 0, so the balancing
        # term has something to optimize away (a zero-initialized router is
        # already balanced and sits at the gate-noise floor).
        train_set, _ = tiny_blob_split(n=720, seed=5)
        config = TrainConfig(seed=2, batch_size=64, max_epochs=6, n_experts=8,
                             top_k=2, cnn_filters=(4, 4, 4, 8), expert_hidden=4,
                             alpha=0.5)
        rng = RngState(config.seed)
        model = build_model(model_config_for(config), rng)
        model.head.router.w_gate.data[:, 0] = 1.5
        _, history = train(model, train_set, config, rng)
        assert history[-1]["importance"] < history[0]["importance"]

    def test_full_scale_defaults(self):
        config = TrainConfig()
        assert config.batch_size == 1024
        assert config.max_epochs == 40
        assert config.alpha == 0.1
        assert config.n_experts == 128
        assert config.top_k == 32

    def test_degenerate_config_is_pure_cross_entropy(self):
        # alpha=0, noise off, k=n: a plain CNN + dense-mixture classifier;
        # training is well-defined and the loss is exactly cross-entropy
        train_set, _ = tiny_blob_split(n=180)
        config = TrainConfig(seed=0, batch_size=64, max_epochs=2, n_experts=4,
                             top_k=4, cnn_filters=(4, 4, 4, 8), expert_hidden=4,
                             alpha=0.0, noise_enabled=False)
        _, history = fit(train_set, config)
        for epoch in history:
            assert epoch["total"] == pytest.approx(epoch["cross_entropy"], abs=1e-15)
            assert epoch["load"] == 0.0

    def test_disable_flags_map_to_variants(self):
        assert model_config_for(TrainConfig()).variant == "cnn_moe"
        assert model_config_for(TrainConfig(disable_moe=True)).variant == "cnn_dense"
        assert model_config_for(TrainConfig(disable_cnn=True)).variant == "dense"
        zeroed = model_config_for(TrainConfig(disable_balancing_losses=True))
        assert zeroed.w_importance == 0.0 and zeroed.w_load == 0.0


class TestEvaluate:
    def test_all_correct(self):
        train_set, test_set = tiny_blob_split()
        config = TrainConfig(seed=3, max_epochs=5, batch_size=64, n_experts=4,
                             top_k=2, cnn_filters=(4, 4, 4, 8), expert_hidden=4)
        model, _ = fit(train_set, config)
        report = evaluate(model, test_set)
        assert 0.0 <= report.accuracy <= 1.0
        # structural identity rather than a performance bar:
        assert report.accuracy == pytest.approx(
            np.trace(report.confusion) / report.confusion.sum())

    def test_perfect_predictions(self):
        y = np.array([0, 1, 2, 0, 1, 2])
        report = EvalReport.from_predictions(y, y, ["a", "b", "c"])
        assert report.accuracy == 1.0
        assert np.all(report.f1 == 1.0)
        assert report.weighted_f1 == 1.0

    def test_hand_confusion_case(self):
        # class A: TP=8, FN=1, FP=2, TN=9
        y_true = np.array([0] * 9 + [1] * 11)
        y_pred = np.array([0] * 8 + [1] + [0] * 2 + [1] * 9)
        report = EvalReport.from_predictions(y_true, y_pred, ["A", "B"])
        assert report.precision[0] == pytest.approx(0.8)
        assert report.recall[0] == pytest.approx(8 / 9)
        assert report.f1[0] == pytest.approx(0.8421, abs=1e-4)

    def test_weighted_f1_formula(self):
        assert weighted_mean([1.0, 0.5], [90, 10]) == pytest.approx(0.95)

    def test_zero_predictions_flagged(self):
        report = EvalReport.from_predictions([0, 1], [0, 0], ["a", "b"])
        assert report.precision[1] == 0.0
        assert "b" in report.zero_division_classes

    @given(st.lists(st.tuples(st.integers(0, 3), st.integers(0, 3)),
                    min_size=1, max_size=60))
    @settings(max_examples=50, deadline=None)
    def test_metric_invariants(self, pairs):
        y_true = np.array([p[0] for p in pairs])
        y_pred = np.array([p[1] for p in pairs])
        report = EvalReport.from_predictions(y_true, y_pred, list("abcd"))
        assert report.accuracy == pytest.approx(
            np.trace(report.confusion) / report.confusion.sum())
        present = report.support > 0
        if present.any():
            assert report.f1[present].min() - 1e-12 <= report.weighted_f1 \
                <= report.f1[present].max() + 1e-12

    def test_empty_set_rejected(self, rng):
        model = build_model(ModelConfig(variant="dense"), rng)
        empty = EncodedDataset(x=np.zeros((0, 6, 13)), y=np.zeros(0, dtype=np.int64),
                               class_names=("a",))
        with pytest.raises(ConfigError):
            evaluate(model, empty)

    def test_report_json_roundtrip(self):
        report = EvalReport.from_predictions([0, 1, 1], [0, 1, 0], ["a", "b"])
        text = report.to_json()
        again = EvalReport.from_json(text)
        assert again.to_json() == text


class TestCheckpoint:
    def _trained(self, tmp_path, seed=7):
        train_set, test_set = tiny_blob_split(n=360)
        config = TrainConfig(seed=seed, **TINY)
        model, history = fit(train_set, config)
        path = tmp_path / "model.ckpt"
        save_checkpoint(path, model, config, metadata={"epochs_run": len(history)})
        return model, config, path, test_set

    def test_roundtrip_bit_exact_eval(self, tmp_path):
        model, config, path, test_set = self._trained(tmp_path)
        before = evaluate(model, test_set)
        loaded = load_checkpoint(path)
        after = evaluate(loaded.model, test_set)
        np.testing.assert_array_equal(before.confusion, after.confusion)
        x = Tensor(test_set.x[:8])
        logits_before, _ = model.eval()(x)
        logits_after, _ = loaded.model(x)
        np.testing.assert_array_equal(logits_before.data, logits_after.data)

    def test_truncated_file_rejected(self, tmp_path):
        _, _, path, _ = self._trained(tmp_path)
        blob = path.read_bytes()
        path.write_bytes(blob[: len(blob) // 2])
        with pytest.raises(CheckpointIntegrityError):
            load_checkpoint(path)

    def test_version_mismatch_rejected(self, tmp_path):
        _, _, path, _ = self._trained(tmp_path)
        blob = bytearray(path.read_bytes())
        payload = bytes(blob[:-32])
        import hashlib
        import struct
        bumped = payload[:8] + struct.pack("<I", FORMAT_VERSION + 1) + payload[12:]
        path.write_bytes(bumped + hashlib.sha256(bumped).digest())
        with pytest.raises(CheckpointVersionError):
            load_checkpoint(path)

    def test_default_config_recorded(self, tmp_path):
        config = TrainConfig()
        model = build_model(model_config_for(config), RngState(0))
        path = tmp_path / "default.ckpt"
        save_checkpoint(path, model, config)
        loaded = load_checkpoint(path)
        assert loaded.train_config.n_experts == 128
        assert loaded.train_config.top_k == 32
        assert loaded.model_config.n_experts == 128

    def test_same_seed_identical_bytes(self, tmp_path):
        train_set, _ = tiny_blob_split(n=360)
        config = TrainConfig(seed=5, **TINY)
        model_a, history_a = fit(train_set, config)
        model_b, history_b = fit(train_set, config)
        pa, pb = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
        save_checkpoint(pa, model_a, config, metadata={"epochs_run": len(history_a)})
        save_checkpoint(pb, model_b, config, metadata={"epochs_run": len(history_b)})
        assert pa.read_bytes() == pb.read_bytes()


class TestUtilization:
    def test_selection_counts_sum(self):
        train_set, test_set = tiny_blob_split(n=180)
        config = TrainConfig(seed=1, max_epochs=1, **{k: v for k, v in TINY.items()
                                                      if k != "max_epochs"})
        model, _ = fit(train_set, config)
        summary = expert_utilization(model, test_set)
        assert sum(summary["selection_counts"]) == summary["top_k"] * summary["samples"]
        assert len(summary["importance"]) == config.n_experts

    def test_k_equals_n_is_uniform(self, rng):
        config = ModelConfig(variant="cnn_moe", cnn_filters=(4, 4, 4, 8),
                             n_experts=4, top_k=4, expert_hidden=4)
        model = build_model(config, rng)
        data = make_blobs(60, seed=2)
        summary = expert_utilization(model, data)
        # zero-initialized router: clean scores are all zero, gates uniform
        assert summary["importance_cv_sq"] == pytest.approx(0.0, abs=1e-20)
        assert summary["load_cv_sq"] == pytest.approx(0.0, abs=1e-20)

    def test_requires_expert_head(self, rng):
        model = build_model(ModelConfig(variant="dense"), rng)
        with pytest.raises(ConfigError):
            expert_utilization(model, make_blobs(10, seed=0))


class TestHistory:
    def test_json_roundtrip(self):
        train_set, _ = tiny_blob_split(n=180)
        config = TrainConfig(seed=1, max_epochs=2, **{k: v for k, v in TINY.items()
                                                      if k != "max_epochs"})
        _, history = fit(train_set, config)
        text = history_to_json(history, config)
        import json
        parsed = json.loads(text)
        assert len(parsed["epochs"]) == 2
        assert parsed["config"]["n_experts"] == config.n_experts
        assert {"total", "cross_entropy", "importance", "load", "accuracy",
                "epoch"} <= set(parsed["epochs"][0])
