import json
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dgcf.builders import synthetic_dataset
from dgcf.dataset import Dataset, stratified_indices
from dgcf.errors import InvalidConfig, ShapeMismatch, TooFewSamples
from dgcf.training import (
    AdamState,
    ExperimentResult,
    ModelConfig,
    adam_step,
    build_model,
    evaluate,
    run_repetitions,
    stratified_split,
    _seeds,
    train,
)


def labels_only(labels):
    labels = np.asarray(labels)
    ds = synthetic_dataset(4, 1, int(labels.max()) + 1, 2, k=1)
    return Dataset(ds.graph, ds.table, np.zeros((labels.size, 4, 1)), labels, ds.n_classes)


@pytest.fixture(scope="module")
def separable():
    return synthetic_dataset(8, 2, 2, 20, noise_std=0.0, seed=0, k=3, test_fraction=0.25)


class TestStratifiedSplit:
    def test_three_of_ten(self):
        ds = labels_only(np.repeat([0, 1, 2], 10))
        kept, held = stratified_split(ds, 0.3, seed=0)
        assert np.bincount(ds.labels[held]).tolist() == [3, 3, 3]
        assert sorted(np.concatenate([kept, held]).tolist()) == list(range(30))

    def test_clamp_small_class(self):
        ds = labels_only([0, 0, 1, 1, 1, 1, 1, 1, 1, 1])
        _, held = stratified_split(ds, 0.3, seed=0)
        assert np.bincount(ds.labels[held]).tolist() == [1, 2]
        _, held = stratified_split(labels_only([0, 0, 1, 1]), 0.9, seed=0)
        assert len(held) == 2

    def test_too_few(self):
        with pytest.raises(TooFewSamples) as info:
            stratified_split(labels_only([0, 0, 1]), 0.3, seed=0)
        assert info.value.cls == 1

    def test_bad_fraction(self):
        with pytest.raises(InvalidConfig):
            stratified_split(labels_only([0, 0, 1, 1]), 1.0, seed=0)

    @settings(max_examples=50, deadline=None)
    @given(st.lists(st.integers(2, 30), min_size=1, max_size=5), st.floats(0.05, 0.95), st.integers(0, 1000))
    def test_proportions_and_determinism(self, sizes, fraction, seed):
        ds = labels_only(np.repeat(np.arange(len(sizes)), sizes))
        kept, held = stratified_split(ds, fraction, seed)
        counts = np.bincount(ds.labels[held], minlength=len(sizes))
        for n_c, h in zip(sizes, counts):
            assert 1 <= h <= n_c - 1
            assert abs(h - fraction * n_c) <= 1
        again = stratified_split(ds, fraction, seed)
        assert np.array_equal(again[0], kept) and np.array_equal(again[1], held)


class TestAdam:
    def test_zero_gradient_fixed_point(self):
        p = {"w": np.array([1.5, -2.0])}
        new, state = adam_step(p, {"w": np.zeros(2)}, AdamState())
        np.testing.assert_array_equal(new["w"], p["w"])
        assert state.step == 1

    def test_one_step_by_hand(self):
        lr, b1, b2, eps = 1e-3, 0.9, 0.999, 1e-8
        m_hat = (1 - b1) * 1.0 / (1 - b1)
        v_hat = (1 - b2) * 1.0 / (1 - b2)
        expected = -lr * m_hat / (np.sqrt(v_hat) + eps)
        new, _ = adam_step({"x": np.array(0.0)}, {"x": np.array(1.0)}, AdamState())
        assert new["x"] == pytest.approx(expected, abs=1e-15)
        assert new["x"] == pytest.approx(-1e-3, rel=1e-7)

    def test_weight_decay_shrinks(self):
        p = {"w": np.array([2.0, -3.0, 0.5])}
        state = AdamState()
        for _ in range(5):
            new, state = adam_step(p, {"w": np.zeros(3)}, state, weight_decay=0.1)
            assert np.all(np.abs(new["w"]) < np.abs(p["w"]))
            p = new

    def test_matches_reference_loop(self):
        # scalar textbook Adam over several steps
        rng = np.random.default_rng(0)
        grads = rng.normal(size=6)
        x, m, v = 0.3, 0.0, 0.0
        state, p = AdamState(), {"x": np.array(0.3)}
        for t, g in enumerate(grads, 1):
            g_eff = g + 0.01 * x
            m = 0.9 * m + 0.1 * g_eff
            v = 0.999 * v + 0.001 * g_eff ** 2
            x = x - 1e-2 * (m / (1 - 0.9 ** t)) / ((v / (1 - 0.999 ** t)) ** 0.5 + 1e-8)
            p, state = adam_step(p, {"x": np.array(g)}, state, lr=1e-2, weight_decay=0.01)
        assert float(p["x"]) == pytest.approx(x, abs=1e-14)

    def test_shape_mismatch(self):
        with pytest.raises(ShapeMismatch):
            adam_step({"w": np.zeros(2)}, {"w": np.zeros(3)}, AdamState())


class TestModelConfig:
    @pytest.mark.parametrize("field,value", [("max_epochs", 0), ("val_fraction", 1.0), ("patience", 0),
                                             ("layer_spec", "C4-X2"), ("k", 0)])
    def test_invalid(self, field, value):
        with pytest.raises(InvalidConfig):
            ModelConfig(**{field: value})

    def test_dynamic_needs_generator(self):
        with pytest.raises(InvalidConfig):
            ModelConfig(layer_spec="DC2-Pooling", fgn_hidden_layers=())

    def test_json_round_trip(self):
        cfg = ModelConfig(layer_spec="DC2-FC8", fgn_hidden_layers=(5, 3), weight_decay=0.01, seed=4)
        assert ModelConfig.from_json(json.loads(json.dumps(cfg.to_json()))) == cfg
        with pytest.raises(InvalidConfig):
            ModelConfig.from_json({"bogus": 1})


class TestTrain:
    def test_separable_smoke(self, separable):
        # noise-free data never stops improving in loss, so a small min_delta
        # is what lets the plateau trigger early stopping
        cfg = ModelConfig(layer_spec="C4-Pooling", k=3, max_epochs=200, learning_rate=1e-2, min_delta=1e-3)
        result = train(separable, cfg)
        assert result.epochs_run < 200
        assert max(h.val_accuracy for h in result.history) == 1.0
        assert result.test_accuracy == 1.0

    def test_determinism(self, separable):
        cfg = ModelConfig(layer_spec="DC2-Pooling", k=3, fgn_hidden_layers=(6,), max_epochs=15, seed=3)
        a, b = train(separable, cfg), train(separable, cfg)
        assert a.to_json() == b.to_json()
        for name, value in a.checkpoint.items():
            np.testing.assert_array_equal(value, b.checkpoint[name])

    def test_early_stopping_contract(self, separable):
        cfg = ModelConfig(layer_spec="C2-FC4", k=3, max_epochs=60, patience=3, seed=1)
        result = train(separable, cfg)
        losses = [h.val_loss for h in result.history]
        assert result.epochs_to_convergence == int(np.argmin(losses)) + 1
        assert result.best_val_loss == min(losses)
        assert result.epochs_to_convergence <= cfg.max_epochs
        if result.epochs_run < cfg.max_epochs:
            assert result.epochs_run == result.epochs_to_convergence + cfg.patience

        # the restored checkpoint reproduces the best validation loss
        model = build_model(cfg, separable.with_k(3), np.random.default_rng(0))
        model.load_state(result.checkpoint)
        pool = separable.train_indices
        _, va = stratified_indices(separable.labels[pool], cfg.val_fraction, _seeds(cfg.seed)[1])
        loss, _, _ = evaluate(model, separable.with_k(3), pool[va])
        assert loss == pytest.approx(result.best_val_loss, rel=1e-12)

    def test_filter_dumps(self, separable):
        cfg = ModelConfig(layer_spec="DC2-Pooling", k=3, fgn_hidden_layers=(4,), max_epochs=5,
                          patience=50, record_filters=True)
        result = train(separable, cfg)
        assert [d["epoch"] for d in result.filter_dumps] == [1, 2, 3, 4, 5, "final"]
        stats = result.filter_dumps[-1]["classes"]
        assert set(stats) == {0, 1}
        static = train(separable, replace(cfg, layer_spec="C2-Pooling"))
        assert static.filter_dumps[-1]["filters"].shape == (2, 3, 2)

    def test_history_csv(self, separable, tmp_path):
        result = train(separable, ModelConfig(layer_spec="C2-Pooling", k=3, max_epochs=4, patience=50))
        result.write_history_csv(tmp_path / "h.csv")
        lines = (tmp_path / "h.csv").read_text().splitlines()
        assert lines[0] == "epoch,train_loss,val_loss,val_acc"
        assert len(lines) == 5
        assert float(lines[2].split(",")[2]) == result.history[1].val_loss


class TestRepetitions:
    def test_single(self, separable):
        exp = run_repetitions(ModelConfig(layer_spec="C2-Pooling", k=3, max_epochs=3), separable, 1, base_seed=5)
        assert len(exp.runs) == 1 and exp.runs[0].seed == 5

    def test_aggregation_and_determinism(self, separable, tmp_path):
        cfg = ModelConfig(layer_spec="C2-Pooling", k=3, max_epochs=6, learning_rate=5e-3)
        exp = run_repetitions(cfg, separable, 10, base_seed=2)
        assert [r.seed for r in exp.runs] == list(range(2, 12))
        accs = [r.test_accuracy for r in exp.runs]
        s = exp.summary()
        assert s["n"] == 10
        assert s["accuracy_mean"] == pytest.approx(sum(accs) / 10, abs=1e-15)
        mean = sum(accs) / 10
        assert s["accuracy_std"] == pytest.approx((sum((a - mean) ** 2 for a in accs) / 9) ** 0.5, abs=1e-12)
        again = run_repetitions(cfg, separable, 10, base_seed=2)
        assert again.to_json() == exp.to_json()
        exp.save(tmp_path / "r.json")
        assert ExperimentResult.load(tmp_path / "r.json").to_json() == exp.to_json()

    def test_invalid(self, separable):
        with pytest.raises(InvalidConfig):
            run_repetitions(ModelConfig(), separable, 0)
