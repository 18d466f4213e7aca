"""From-scratch fully connected regression network.

Default architecture: 7 -> 128 -> 256 -> 512 -> 32 -> 1, ReLU on every
layer including the output (which conveniently pins predictions at >= 0),
dropout 0. Trained with mini-batch adaptive-moment SGD on mean squared
error, feature standardization fitted on the training split only, and
early stopping that restores the best validation weights. Bit-reproducible
given the seed and a fixed thread count.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field

import numpy as np

from .data_pipeline import FeatureVector

INPUT_WIDTH = 7
DEFAULT_WIDTHS = (128, 256, 512, 32, 1)
MODEL_FORMAT = "mlp-v1"


class TrainingDivergedError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 50
    batch_size: int = 256
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    validation_fraction: float = 0.1
    patience: int = 10
    seed: int = 42
    layer_widths: tuple[int, ...] = DEFAULT_WIDTHS
    dropout: tuple[float, ...] | None = None  # per layer, default all zero
    target_kind: str = "count"  # "count" or "revenue"; metadata for reports

    def __post_init__(self):
        if self.epochs <= 0 or self.batch_size <= 0 or self.learning_rate <= 0:
            raise ValueError("epochs, batch_size, learning_rate must be positive")
        if not 0.0 < self.validation_fraction <= 0.5:
            raise ValueError("validation_fraction must lie in (0, 0.5]")
        if self.layer_widths[-1] != 1:
            raise ValueError("the last layer must have width 1")
        if self.dropout is not None and len(self.dropout) != len(self.layer_widths):
            raise ValueError("dropout rates must match layer count")
        if self.target_kind not in ("count", "revenue"):
            raise ValueError("target_kind must be 'count' or 'revenue'")

    @property
    def dropout_rates(self) -> tuple[float, ...]:
        return self.dropout if self.dropout is not None else (0.0,) * len(self.layer_widths)


@dataclass
class Layer:
    weights: np.ndarray  # (fan_in, fan_out)
    bias: np.ndarray     # (fan_out,)
    activation: str = "relu"
    dropout: float = 0.0


@dataclass
class MlpModel:
    layers: list[Layer]
    scaler_mean: np.ndarray
    scaler_std: np.ndarray
    seed: int
    input_width: int = INPUT_WIDTH
    threads: int = field(default_factory=lambda: int(
        os.environ.get("OMP_NUM_THREADS", os.cpu_count() or 1)))

    def widths(self) -> tuple[int, ...]:
        return tuple(layer.weights.shape[1] for layer in self.layers)


def _relu(a: np.ndarray) -> np.ndarray:
    return np.maximum(a, 0.0)


def init_model(config: TrainConfig, rng: np.random.Generator,
               scaler_mean: np.ndarray, scaler_std: np.ndarray,
               input_width: int = INPUT_WIDTH) -> MlpModel:
    """He-scaled normal initialization, biases zero."""
    layers = []
    fan_in = input_width
    for width, rate in zip(config.layer_widths, config.dropout_rates):
        scale = math.sqrt(2.0 / fan_in)
        layers.append(Layer(
            weights=rng.normal(0.0, scale, size=(fan_in, width)),
            bias=np.zeros(width),
            activation="relu",
            dropout=float(rate),
        ))
        fan_in = width
    return MlpModel(
        layers=layers,
        scaler_mean=np.asarray(scaler_mean, dtype=float),
        scaler_std=np.asarray(scaler_std, dtype=float),
        seed=config.seed,
        input_width=input_width,
    )


def _check_width(model: MlpModel, X: np.ndarray) -> None:
    if X.ndim != 2 or X.shape[1] != model.input_width:
        raise ValueError(
            f"expected feature rows of width {model.input_width}, "
            f"got shape {X.shape}"
        )


def _forward_pass(model: MlpModel, X: np.ndarray,
                  dropout_masks: list[np.ndarray] | None = None):
    """Returns (activations per layer, pre-activations per layer)."""
    hidden = (X - model.scaler_mean) / model.scaler_std
    activations = [hidden]
    pre_activations = []
    for index, layer in enumerate(model.layers):
        a = hidden @ layer.weights + layer.bias
        pre_activations.append(a)
        hidden = _relu(a)
        if dropout_masks is not None and layer.dropout > 0.0:
            hidden = hidden * dropout_masks[index]
        activations.append(hidden)
    return activations, pre_activations


def forward(model: MlpModel, features) -> float:
    """Single-row forward pass; accepts a FeatureVector or a length-7 array."""
    if isinstance(features, FeatureVector):
        row = np.array(features.as_tuple())
    else:
        row = np.asarray(features, dtype=float)
    X = row.reshape(1, -1)
    _check_width(model, X)
    activations, _ = _forward_pass(model, X)
    return float(activations[-1][0, 0])


def predict(model: MlpModel, X) -> np.ndarray:
    """Row-wise forward pass, order preserved."""
    X = np.asarray(X, dtype=float)
    _check_width(model, X)
    activations, _ = _forward_pass(model, X)
    return activations[-1][:, 0]


def loss_and_gradient(model: MlpModel, X: np.ndarray, y: np.ndarray,
                      dropout_masks: list[np.ndarray] | None = None):
    """Mean squared error and its reverse-mode gradients.

    ReLU subgradient at exactly zero is taken as zero.
    """
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    if X.shape[0] == 0:
        raise ValueError("batch must be non-empty")
    _check_width(model, X)
    bad = ~(np.isfinite(X).all(axis=1) & np.isfinite(y))
    if bad.any():
        raise ValueError(f"non-finite input or target at batch row {int(bad.argmax())}")

    activations, pre_activations = _forward_pass(model, X, dropout_masks)
    predictions = activations[-1][:, 0]
    residual = predictions - y
    n = X.shape[0]
    loss = float(np.mean(residual ** 2))

    grads = []
    delta = (2.0 / n) * residual[:, None]
    for index in range(len(model.layers) - 1, -1, -1):
        layer = model.layers[index]
        if dropout_masks is not None and layer.dropout > 0.0:
            delta = delta * dropout_masks[index]
        delta = delta * (pre_activations[index] > 0.0)
        grads.append((activations[index].T @ delta, delta.sum(axis=0)))
        if index > 0:
            delta = delta @ layer.weights.T
    grads.reverse()
    return loss, grads


@dataclass
class TrainHistory:
    train_mse: list[float] = field(default_factory=list)
    val_mse: list[float] = field(default_factory=list)
    best_epoch: int = -1
    stopped_early: bool = False


def train(X, y, config: TrainConfig = TrainConfig()) -> tuple[MlpModel, TrainHistory]:
    """Fit the network; deterministic given (data, seed, thread count)."""
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    if X.ndim != 2 or X.shape[0] != y.shape[0]:
        raise ValueError("features and targets must align row-wise")
    if X.shape[0] < 10:
        raise ValueError("need at least 10 rows to train")
    if not (np.isfinite(X).all() and np.isfinite(y).all()):
        bad = int(np.flatnonzero(~(np.isfinite(X).all(axis=1) & np.isfinite(y)))[0])
        raise ValueError(f"non-finite input or target at row {bad}")

    rng = np.random.default_rng(config.seed)
    n = X.shape[0]
    order = rng.permutation(n)
    n_val = max(1, int(round(config.validation_fraction * n)))
    val_idx, train_idx = order[:n_val], order[n_val:]

    mean = X[train_idx].mean(axis=0)
    std = X[train_idx].std(axis=0)
    std = np.where(std > 0.0, std, 1.0)
    model = init_model(config, rng, mean, std, input_width=X.shape[1])

    moments1 = [(np.zeros_like(l.weights), np.zeros_like(l.bias)) for l in model.layers]
    moments2 = [(np.zeros_like(l.weights), np.zeros_like(l.bias)) for l in model.layers]
    step = 0
    history = TrainHistory()
    best_val = np.inf
    best_weights = None
    stale_epochs = 0

    X_train, y_train = X[train_idx], y[train_idx]
    X_val, y_val = X[val_idx], y[val_idx]
    use_dropout = any(rate > 0.0 for rate in config.dropout_rates)

    for epoch in range(config.epochs):
        batch_order = rng.permutation(len(train_idx))
        epoch_losses = []
        for start in range(0, len(batch_order), config.batch_size):
            rows = batch_order[start:start + config.batch_size]
            masks = None
            if use_dropout:
                masks = [
                    (rng.random((len(rows), layer.weights.shape[1]))
                     >= layer.dropout) / max(1.0 - layer.dropout, 1e-12)
                    for layer in model.layers
                ]
            loss, grads = loss_and_gradient(model, X_train[rows], y_train[rows], masks)
            if not math.isfinite(loss):
                raise TrainingDivergedError(
                    f"loss diverged at epoch {epoch}; try a lower learning rate"
                )
            epoch_losses.append(loss)
            step += 1
            bias_fix1 = 1.0 - config.beta1 ** step
            bias_fix2 = 1.0 - config.beta2 ** step
            for layer, (gw, gb), m1, m2 in zip(model.layers, grads, moments1, moments2):
                for value, grad, first, second in (
                    (layer.weights, gw, m1[0], m2[0]),
                    (layer.bias, gb, m1[1], m2[1]),
                ):
                    first *= config.beta1
                    first += (1.0 - config.beta1) * grad
                    second *= config.beta2
                    second += (1.0 - config.beta2) * grad ** 2
                    value -= config.learning_rate * (first / bias_fix1) / (
                        np.sqrt(second / bias_fix2) + config.epsilon
                    )

        val_pred = predict(model, X_val)
        val_mse = float(np.mean((val_pred - y_val) ** 2))
        history.train_mse.append(float(np.mean(epoch_losses)))
        history.val_mse.append(val_mse)
        if val_mse < best_val:
            best_val = val_mse
            history.best_epoch = epoch
            best_weights = [(l.weights.copy(), l.bias.copy()) for l in model.layers]
            stale_epochs = 0
        else:
            stale_epochs += 1
            if stale_epochs >= config.patience:
                history.stopped_early = True
                break

    if best_weights is not None:
        for layer, (w, b) in zip(model.layers, best_weights):
            layer.weights = w
            layer.bias = b
    return model, history


# ---------------------------------------------------------------------------
# persistence


def save_model(model: MlpModel, config: TrainConfig, path) -> None:
    document = {
        "format": MODEL_FORMAT,
        "input_width": model.input_width,
        "seed": model.seed,
        "threads": model.threads,
        "scaler_mean": model.scaler_mean.tolist(),
        "scaler_std": model.scaler_std.tolist(),
        "layers": [
            {
                "weights": layer.weights.tolist(),  # row-major: (fan_in, fan_out)
                "bias": layer.bias.tolist(),
                "activation": layer.activation,
                "dropout": layer.dropout,
            }
            for layer in model.layers
        ],
        "train_config": {
            "epochs": config.epochs,
            "batch_size": config.batch_size,
            "learning_rate": config.learning_rate,
            "beta1": config.beta1,
            "beta2": config.beta2,
            "epsilon": config.epsilon,
            "validation_fraction": config.validation_fraction,
            "patience": config.patience,
            "seed": config.seed,
            "layer_widths": list(config.layer_widths),
            "target_kind": config.target_kind,
        },
    }
    with open(path, "w", encoding="utf-8") as handle:
        json.dump(document, handle, sort_keys=True)
        handle.write("\n")


def load_model(path) -> tuple[MlpModel, TrainConfig]:
    with open(path, "r", encoding="utf-8") as handle:
        document = json.load(handle)
    if document.get("format") != MODEL_FORMAT:
        raise ValueError(f"{path} is not a {MODEL_FORMAT} document")
    layers = [
        Layer(
            weights=np.array(entry["weights"], dtype=float),
            bias=np.array(entry["bias"], dtype=float),
            activation=entry["activation"],
            dropout=entry["dropout"],
        )
        for entry in document["layers"]
    ]
    cfg = document["train_config"]
    config = TrainConfig(
        epochs=cfg["epochs"], batch_size=cfg["batch_size"],
        learning_rate=cfg["learning_rate"], beta1=cfg["beta1"],
        beta2=cfg["beta2"], epsilon=cfg["epsilon"],
        validation_fraction=cfg["validation_fraction"],
        patience=cfg["patience"], seed=cfg["seed"],
        layer_widths=tuple(cfg["layer_widths"]),
        target_kind=cfg["target_kind"],
    )
    model = MlpModel(
        layers=layers,
        scaler_mean=np.array(document["scaler_mean"], dtype=float),
        scaler_std=np.array(document["scaler_std"], dtype=float),
        seed=document["seed"],
        input_width=document["input_width"],
        threads=document["threads"],
    )
    return model, config
