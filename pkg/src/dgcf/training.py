"""Adam, stratified splits, early-stopped training and seeded repetitions."""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Mapping

import numpy as np

from .dataset import Dataset, stratified_indices
from .dynamic import class_filter_stats
from .errors import InvalidConfig, NonFiniteLoss, ShapeMismatch
from .layers import Activation, LayerParams, softmax_cross_entropy
from .model import GraphClassifier, parse_layer_spec

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class ModelConfig:
    layer_spec: str = "C4-Pooling"
    k: int = 4
    activation: Activation = Activation.RELU
    fgn_hidden_layers: tuple[int, ...] = (200,)
    fgn_activation: Activation = Activation.RELU
    learning_rate: float = 1e-3
    weight_decay: float = 0.0
    adam_betas: tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8
    max_epochs: int = 200
    patience: int = 10
    min_delta: float = 0.0
    val_fraction: float = 0.3
    batch_size: int = 16
    seed: int = 0
    conv_bias: bool = False
    constant_generator: bool = False
    record_filters: bool = False

    def __post_init__(self):
        object.__setattr__(self, "activation", Activation(self.activation))
        object.__setattr__(self, "fgn_activation", Activation(self.fgn_activation))
        object.__setattr__(self, "fgn_hidden_layers", tuple(int(h) for h in self.fgn_hidden_layers))
        object.__setattr__(self, "adam_betas", tuple(float(b) for b in self.adam_betas))
        self.validate()

    def validate(self) -> None:
        tokens = parse_layer_spec(self.layer_spec)
        if any(t.kind == "dconv" for t in tokens) and not self.fgn_hidden_layers:
            raise InvalidConfig(f"{self.layer_spec}: dynamic layers need fgn_hidden_layers")
        if self.k < 1:
            raise InvalidConfig(f"k must be >= 1, got {self.k}")
        if self.max_epochs < 1:
            raise InvalidConfig(f"max_epochs must be >= 1, got {self.max_epochs}")
        if self.patience < 1:
            raise InvalidConfig(f"patience must be >= 1, got {self.patience}")
        if not 0.0 < self.val_fraction < 1.0:
            raise InvalidConfig(f"val_fraction must be in (0, 1), got {self.val_fraction}")
        if self.batch_size < 1:
            raise InvalidConfig(f"batch_size must be >= 1, got {self.batch_size}")
        if self.learning_rate <= 0 or self.weight_decay < 0 or self.adam_eps <= 0:
            raise InvalidConfig("learning_rate and adam_eps must be > 0, weight_decay >= 0")
        b1, b2 = self.adam_betas
        if not (0 <= b1 < 1 and 0 <= b2 < 1):
            raise InvalidConfig(f"adam_betas must lie in [0, 1), got {self.adam_betas}")

    def to_json(self) -> dict:
        d = asdict(self)
        d["activation"] = self.activation.value
        d["fgn_activation"] = self.fgn_activation.value
        d["fgn_hidden_layers"] = list(self.fgn_hidden_layers)
        d["adam_betas"] = list(self.adam_betas)
        return d

    @classmethod
    def from_json(cls, obj: Mapping) -> ModelConfig:
        known = cls.__dataclass_fields__
        unknown = set(obj) - set(known)
        if unknown:
            raise InvalidConfig(f"unknown model config keys: {sorted(unknown)}")
        return cls(**obj)


# --- splitting ----------------------------------------------------------------


def stratified_split(dataset: Dataset, fraction: float, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Class-proportional (kept, held-out) split over the whole dataset."""
    return stratified_indices(dataset.labels, fraction, seed)


# --- optimiser ----------------------------------------------------------------


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0


def adam_step(
    params: Mapping[str, np.ndarray],
    grads: Mapping[str, np.ndarray],
    state: AdamState,
    lr: float = 1e-3,
    betas: tuple[float, float] = (0.9, 0.999),
    eps: float = 1e-8,
    weight_decay: float = 0.0,
) -> tuple[dict[str, np.ndarray], AdamState]:
    """One bias-corrected Adam update; weight decay enters as an L2 gradient term."""
    b1, b2 = betas
    t = state.step + 1
    new_params, m_new, v_new = {}, {}, {}
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ShapeMismatch(f"gradient for {name} has shape {g.shape}, parameter {p.shape}")
        if weight_decay:
            g = g + weight_decay * p
        m = b1 * state.m.get(name, 0.0) + (1 - b1) * g
        v = b2 * state.v.get(name, 0.0) + (1 - b2) * g * g
        m_hat = m / (1 - b1 ** t)
        v_hat = v / (1 - b2 ** t)
        new_params[name] = p - lr * m_hat / (np.sqrt(v_hat) + eps)
        m_new[name] = m
        v_new[name] = v
    return new_params, AdamState(m_new, v_new, t)


# --- training -----------------------------------------------------------------


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_loss: float
    val_accuracy: float


@dataclass
class TrainResult:
    best_val_loss: float
    test_accuracy: float
    epochs_to_convergence: int
    history: list[EpochRecord]
    checkpoint: LayerParams
    seed: int
    filter_dumps: list[dict] = field(default_factory=list)

    @property
    def epochs_run(self) -> int:
        return len(self.history)

    def to_json(self) -> dict:
        return {
            "seed": self.seed,
            "best_val_loss": self.best_val_loss,
            "test_accuracy": self.test_accuracy,
            "epochs_to_convergence": self.epochs_to_convergence,
            "epochs_run": self.epochs_run,
            "history": [asdict(h) for h in self.history],
        }

    @classmethod
    def from_json(cls, obj: Mapping, checkpoint: LayerParams | None = None) -> TrainResult:
        return cls(
            best_val_loss=float(obj["best_val_loss"]),
            test_accuracy=float(obj["test_accuracy"]),
            epochs_to_convergence=int(obj["epochs_to_convergence"]),
            history=[EpochRecord(**h) for h in obj["history"]],
            checkpoint=checkpoint if checkpoint is not None else LayerParams(),
            seed=int(obj["seed"]),
        )

    def write_history_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["epoch", "train_loss", "val_loss", "val_acc"])
            for h in self.history:
                w.writerow([h.epoch, repr(h.train_loss), repr(h.val_loss), repr(h.val_accuracy)])


def build_model(config: ModelConfig, dataset: Dataset, rng: np.random.Generator) -> GraphClassifier:
    return GraphClassifier.build(
        config.layer_spec,
        dataset.table,
        dataset.feature_dim,
        dataset.n_classes,
        rng,
        activation=config.activation,
        fgn_hidden_layers=config.fgn_hidden_layers,
        fgn_activation=config.fgn_activation,
        conv_bias=config.conv_bias,
        constant_generator=config.constant_generator,
    )


def evaluate(model: GraphClassifier, dataset: Dataset, indices: np.ndarray, chunk: int = 256) -> tuple[float, float, np.ndarray]:
    """Mean loss, accuracy and predictions over ``indices``."""
    if len(indices) == 0:
        return float("nan"), float("nan"), np.zeros(0, np.int64)
    total = 0.0
    preds = []
    for start in range(0, len(indices), chunk):
        idx = indices[start:start + chunk]
        logits = model.logits(dataset.features[idx])
        loss, _ = softmax_cross_entropy(logits, dataset.labels[idx])
        total += loss * len(idx)
        preds.append(np.argmax(logits, axis=1))
    preds = np.concatenate(preds)
    acc = float(np.mean(preds == dataset.labels[indices]))
    return total / len(indices), acc, preds


def _filter_dump(model: GraphClassifier, dataset: Dataset, indices: np.ndarray, preds: np.ndarray, epoch) -> dict:
    conv = model.first_conv
    if not model.is_dynamic:
        return {"epoch": epoch, "filters": conv.params["F"].copy()}
    filters = model.generated_filters(dataset.features[indices])
    labels = dataset.labels[indices]
    stats = class_filter_stats(filters, labels, preds == labels, dataset.n_classes)
    return {"epoch": epoch, "classes": stats}


def _seeds(seed: int) -> tuple[int, int, np.random.Generator]:
    init_ss, split_ss, shuffle_ss = np.random.SeedSequence(seed).spawn(3)
    return (
        int(init_ss.generate_state(1)[0]),
        int(split_ss.generate_state(1)[0]),
        np.random.default_rng(shuffle_ss),
    )


def train(dataset: Dataset, config: ModelConfig, model: GraphClassifier | None = None) -> TrainResult:
    """Early-stopped training on the non-test part of ``dataset``.

    The non-test samples are split into train/validation; the parameters with
    the lowest validation loss are restored at the end and scored on the
    designated test split (or, if the dataset has none, on validation).
    """
    config.validate()
    dataset = dataset.with_k(config.k)
    init_seed, split_seed, shuffle_rng = _seeds(config.seed)
    if model is None:
        model = build_model(config, dataset, np.random.default_rng(init_seed))

    pool = dataset.train_indices
    tr, va = stratified_indices(dataset.labels[pool], config.val_fraction, split_seed)
    train_idx, val_idx = pool[tr], pool[va]
    test_idx = dataset.test_indices
    if len(test_idx) == 0:
        log.warning("dataset has no designated test split; reporting validation accuracy")
        test_idx = val_idx

    names = [n for n, _ in model.named_params()]
    adam = AdamState()
    history: list[EpochRecord] = []
    dumps: list[dict] = []
    best_loss, best_epoch, best_state, wait = np.inf, 0, model.state(), 0
    for epoch in range(1, config.max_epochs + 1):
        order = shuffle_rng.permutation(train_idx)
        running = 0.0
        for start in range(0, len(order), config.batch_size):
            idx = order[start:start + config.batch_size]
            logits, caches = model.forward(dataset.features[idx])
            loss, dlogits = softmax_cross_entropy(logits, dataset.labels[idx])
            if not np.isfinite(loss):
                raise NonFiniteLoss(f"loss became {loss} at epoch {epoch}, batch starting {start}")
            running += loss * len(idx)
            grads = model.backward(dlogits, caches)
            params = dict(model.named_params())
            new, adam = adam_step(params, grads, adam, config.learning_rate, config.adam_betas,
                                  config.adam_eps, config.weight_decay)
            for n in names:
                model.set_param(n, new[n])
        val_loss, val_acc, _ = evaluate(model, dataset, val_idx)
        if not np.isfinite(val_loss):
            raise NonFiniteLoss(f"validation loss became {val_loss} at epoch {epoch}")
        history.append(EpochRecord(epoch, running / len(train_idx), val_loss, val_acc))
        if config.record_filters:
            _, _, tr_preds = evaluate(model, dataset, train_idx)
            dumps.append(_filter_dump(model, dataset, train_idx, tr_preds, epoch))
        if val_loss < best_loss - config.min_delta:
            best_loss, best_epoch, best_state, wait = val_loss, epoch, model.state(), 0
        else:
            wait += 1
            if wait >= config.patience:
                break

    model.load_state(best_state)
    _, test_acc, _ = evaluate(model, dataset, test_idx)
    if config.record_filters:
        _, _, tr_preds = evaluate(model, dataset, train_idx)
        dumps.append(_filter_dump(model, dataset, train_idx, tr_preds, "final"))
    return TrainResult(float(best_loss), test_acc, best_epoch, history, best_state, config.seed, dumps)


@dataclass
class ExperimentResult:
    config: ModelConfig
    runs: list[TrainResult]

    @property
    def accuracies(self) -> np.ndarray:
        return np.array([r.test_accuracy for r in self.runs])

    @property
    def epochs(self) -> np.ndarray:
        return np.array([r.epochs_to_convergence for r in self.runs], dtype=float)

    def summary(self) -> dict:
        acc, ep = self.accuracies, self.epochs
        return {
            "n": len(self.runs),
            "accuracy_mean": float(acc.mean()),
            "accuracy_std": float(acc.std(ddof=1)) if len(acc) > 1 else 0.0,
            "epochs_mean": float(ep.mean()),
            "epochs_std": float(ep.std(ddof=1)) if len(ep) > 1 else 0.0,
        }

    def to_json(self) -> dict:
        return {"config": self.config.to_json(), "runs": [r.to_json() for r in self.runs]}

    @classmethod
    def from_json(cls, obj: Mapping) -> ExperimentResult:
        return cls(ModelConfig.from_json(obj["config"]), [TrainResult.from_json(r) for r in obj["runs"]])

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=1) + "\n")

    @classmethod
    def load(cls, path: str | Path) -> ExperimentResult:
        return cls.from_json(json.loads(Path(path).read_text()))


def run_repetitions(config: ModelConfig, dataset: Dataset, repetitions: int = 10, base_seed: int = 0) -> ExperimentResult:
    """Train ``repetitions`` independent models, repetition ``r`` seeded with ``base_seed + r``."""
    if repetitions < 1:
        raise InvalidConfig(f"repetitions must be >= 1, got {repetitions}")
    runs = [train(dataset, replace(config, seed=base_seed + r)) for r in range(repetitions)]
    return ExperimentResult(replace(config, seed=base_seed), runs)
