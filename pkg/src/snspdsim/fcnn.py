"""Fully connected binary classifier written directly in numpy.

Hidden layers use the logistic sigmoid, the output layer a softmax over two
classes, trained on mean cross-entropy with plain mini-batch gradient
descent. Weights are stored as ``(fan_in, fan_out)`` matrices so a batch
propagates as ``a @ W + b``. All arithmetic is float64.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field

import numpy as np

from .rng import substream

FORMAT_VERSION = 1
EPS = 1e-12


class TrainingDivergedError(RuntimeError):
    def __init__(self, epoch: int):
        super().__init__(f"training diverged: loss became NaN at epoch {epoch}")
        self.epoch = epoch


class ModelFormatError(ValueError):
    pass


@dataclass
class FcnnModel:
    layer_sizes: list[int]
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    input_mean: np.ndarray
    input_std: np.ndarray
    train_seed: int = 0
    calibration: dict | None = None

    def __post_init__(self):
        validate_shapes(self.layer_sizes, self.weights, self.biases, self.input_mean, self.input_std)

    @classmethod
    def zeros(cls, layer_sizes) -> "FcnnModel":
        sizes = list(layer_sizes)
        return cls(sizes,
                   [np.zeros((a, b)) for a, b in zip(sizes, sizes[1:])],
                   [np.zeros(b) for b in sizes[1:]],
                   np.zeros(sizes[0]), np.ones(sizes[0]))

    @classmethod
    def initialize(cls, layer_sizes, seed: int, init_scale: float | None = None) -> "FcnnModel":
        """Uniform(-s, s) weights with s = 1/sqrt(fan_in) unless ``init_scale`` is given; zero biases."""
        sizes = list(layer_sizes)
        rng = substream(seed, "init")
        weights = []
        for a, b in zip(sizes, sizes[1:]):
            s = 1.0 / math.sqrt(a) if init_scale is None else init_scale
            weights.append(rng.uniform(-s, s, size=(a, b)))
        return cls(sizes, weights, [np.zeros(b) for b in sizes[1:]],
                   np.zeros(sizes[0]), np.ones(sizes[0]), train_seed=int(seed))

    def copy(self) -> "FcnnModel":
        return FcnnModel(list(self.layer_sizes), [w.copy() for w in self.weights],
                         [b.copy() for b in self.biases], self.input_mean.copy(), self.input_std.copy(),
                         self.train_seed, None if self.calibration is None else dict(self.calibration))

    @property
    def n_inputs(self) -> int:
        return self.layer_sizes[0]

    def params(self) -> list[np.ndarray]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out


def validate_shapes(sizes, weights, biases, mean, std):
    if len(sizes) < 2 or any(int(s) <= 0 for s in sizes):
        raise ValueError("need at least two layers of positive size")
    if len(weights) != len(sizes) - 1 or len(biases) != len(sizes) - 1:
        raise ValueError("number of weight/bias arrays does not match the architecture")
    for i, (a, b) in enumerate(zip(sizes, sizes[1:])):
        if np.shape(weights[i]) != (a, b):
            raise ValueError(f"layer {i} weight shape {np.shape(weights[i])} != {(a, b)}")
        if np.shape(biases[i]) != (b,):
            raise ValueError(f"layer {i} bias shape {np.shape(biases[i])} != {(b,)}")
    if np.shape(mean) != (sizes[0],) or np.shape(std) != (sizes[0],):
        raise ValueError("input normalization does not match the input size")
    if np.any(np.asarray(std) <= 0):
        raise ValueError("input normalization std entries must be positive")


@dataclass
class LabeledDataset:
    inputs: np.ndarray
    labels: np.ndarray
    class_names: tuple[str, str] = ("class0", "class1")
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.inputs = np.atleast_2d(np.asarray(self.inputs, dtype=float))
        self.labels = np.atleast_2d(np.asarray(self.labels, dtype=float))
        if self.inputs.shape[0] != self.labels.shape[0]:
            raise ValueError("inputs and labels have different row counts")
        if self.labels.size and not np.allclose(self.labels.sum(axis=1), 1.0):
            raise ValueError("label rows must be one-hot")

    def __len__(self):
        return self.inputs.shape[0]

    @property
    def targets(self) -> np.ndarray:
        return np.argmax(self.labels, axis=1)

    def subset(self, index) -> "LabeledDataset":
        return LabeledDataset(self.inputs[index], self.labels[index], self.class_names, dict(self.meta))

    @classmethod
    def from_targets(cls, inputs, targets, class_names=("class0", "class1"), meta=None) -> "LabeledDataset":
        targets = np.asarray(targets, dtype=int)
        return cls(inputs, one_hot(targets, 2), tuple(class_names), dict(meta or {}))


def one_hot(targets, n_classes: int = 2) -> np.ndarray:
    targets = np.asarray(targets, dtype=int)
    out = np.zeros((targets.size, n_classes))
    out[np.arange(targets.size), targets] = 1.0
    return out


def sigmoid(z):
    # Split by sign so neither branch overflows.
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def softmax(z):
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def _check_input(model: FcnnModel, x: np.ndarray):
    if x.shape[-1] != model.n_inputs:
        raise ValueError(f"expected {model.n_inputs} input features, got {x.shape[-1]}")


def _forward_cache(model: FcnnModel, x: np.ndarray):
    acts = [(x - model.input_mean) / model.input_std]
    last = len(model.weights) - 1
    for i, (w, b) in enumerate(zip(model.weights, model.biases)):
        z = acts[-1] @ w + b
        acts.append(softmax(z) if i == last else sigmoid(z))
    return acts


def forward(model: FcnnModel, x) -> np.ndarray:
    """Class probabilities for one input vector or a batch of rows."""
    x = np.asarray(x, dtype=float)
    _check_input(model, x)
    return _forward_cache(model, np.atleast_2d(x))[-1].reshape(x.shape[:-1] + (model.layer_sizes[-1],))


def hidden_activations(model: FcnnModel, x) -> np.ndarray:
    """Activations of the last hidden layer, one row per input row."""
    x = np.atleast_2d(np.asarray(x, dtype=float))
    _check_input(model, x)
    return _forward_cache(model, x)[-2]


def cross_entropy(scores, label) -> float:
    """-sum(y * ln(max(s, 1e-12))), averaged over rows when given a batch."""
    s = np.atleast_2d(np.asarray(scores, dtype=float))
    y = np.atleast_2d(np.asarray(label, dtype=float))
    return float(np.mean(-np.sum(y * np.log(np.maximum(s, EPS)), axis=1)))


def backward(model: FcnnModel, x, label):
    """Gradients of the mean cross-entropy over the rows of ``x``.

    Returns ``(weight_grads, bias_grads)`` aligned with the model's layers.
    The softmax and loss are differentiated together, so the output delta is
    ``s - y``; the epsilon clamp in :func:`cross_entropy` is ignored.
    """
    x = np.atleast_2d(np.asarray(x, dtype=float))
    y = np.atleast_2d(np.asarray(label, dtype=float))
    _check_input(model, x)
    acts = _forward_cache(model, x)
    n = x.shape[0]
    delta = (acts[-1] - y) / n
    gw = [None] * len(model.weights)
    gb = [None] * len(model.biases)
    for i in range(len(model.weights) - 1, -1, -1):
        gw[i] = acts[i].T @ delta
        gb[i] = delta.sum(axis=0)
        if i > 0:
            a = acts[i]
            delta = (delta @ model.weights[i].T) * a * (1.0 - a)
    return gw, gb


def loss(model: FcnnModel, x, label) -> float:
    return cross_entropy(forward(model, np.atleast_2d(x)), label)


@dataclass
class TrainResult:
    model: FcnnModel
    loss_curve: list[float]


def input_normalization(inputs: np.ndarray):
    """Per-feature mean and std; constant features get std 1."""
    mean = inputs.mean(axis=0)
    std = inputs.std(axis=0)
    std = np.where(std > 0, std, 1.0)
    return mean, std


def train(dataset: LabeledDataset, layer_sizes=None, lr: float = 0.05, epochs: int = 200,
          batch_size: int = 32, init_scale: float | None = None, seed: int = 0) -> TrainResult:
    """Mini-batch gradient descent on mean cross-entropy.

    Batches are drawn from a fresh permutation each epoch. The returned loss
    curve holds, per epoch, the mean over samples of the loss each sample had
    when its batch was evaluated.
    """
    if len(dataset) == 0:
        raise ValueError("empty dataset")
    if lr < 0:
        raise ValueError("learning rate must be non-negative")
    sizes = list(layer_sizes) if layer_sizes is not None else [dataset.inputs.shape[1], 128, 64, 32, 2]
    if sizes[0] != dataset.inputs.shape[1]:
        raise ValueError(f"architecture expects {sizes[0]} inputs, dataset has {dataset.inputs.shape[1]}")
    model = FcnnModel.initialize(sizes, seed, init_scale)
    model.input_mean, model.input_std = input_normalization(dataset.inputs)
    x = (dataset.inputs - model.input_mean) / model.input_std
    y = dataset.labels
    # Normalization is folded into x once; the model keeps it for inference.
    unit = FcnnModel(sizes, model.weights, model.biases, np.zeros(sizes[0]), np.ones(sizes[0]))
    order_rng = substream(seed, "batches")
    n = len(dataset)
    curve = []
    sample_loss = np.empty(n)
    for epoch in range(epochs):
        perm = order_rng.permutation(n)
        for start in range(0, n, batch_size):
            idx = perm[start:start + batch_size]
            acts = _forward_cache(unit, x[idx])
            sample_loss[idx] = -np.sum(y[idx] * np.log(np.maximum(acts[-1], EPS)), axis=1)
            if lr == 0:
                continue
            delta = (acts[-1] - y[idx]) / idx.size
            for i in range(len(unit.weights) - 1, -1, -1):
                gw = acts[i].T @ delta
                gb = delta.sum(axis=0)
                if i > 0:
                    a = acts[i]
                    delta = (delta @ unit.weights[i].T) * a * (1.0 - a)
                unit.weights[i] -= lr * gw
                unit.biases[i] -= lr * gb
        epoch_loss = float(sample_loss.mean())  # fixed summation order
        if math.isnan(epoch_loss):
            raise TrainingDivergedError(epoch)
        curve.append(epoch_loss)
    return TrainResult(model, curve)


def predict(model: FcnnModel, x):
    """Class index and its probability; ties go to class 0. Batches give arrays."""
    s = forward(model, x)
    idx = np.argmax(s, axis=-1)  # first maximum wins
    prob = np.take_along_axis(s, np.expand_dims(idx, -1), axis=-1)[..., 0]
    if np.ndim(idx) == 0:
        return int(idx), float(prob)
    return idx, prob


@dataclass
class Evaluation:
    accuracy: float
    confusion: np.ndarray  # rows: true class, columns: predicted class
    precision: list[float]
    recall: list[float]

    def to_dict(self) -> dict:
        return {"accuracy": self.accuracy, "confusion": self.confusion.tolist(),
                "precision": self.precision, "recall": self.recall}


def evaluate_predictions(targets, predicted, n_classes: int = 2) -> Evaluation:
    targets = np.asarray(targets, dtype=int)
    predicted = np.asarray(predicted, dtype=int)
    if targets.size == 0:
        raise ValueError("empty dataset")
    confusion = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(confusion, (targets, predicted), 1)
    col = confusion.sum(axis=0)
    row = confusion.sum(axis=1)
    diag = np.diag(confusion)
    precision = [float(diag[k] / col[k]) if col[k] else 0.0 for k in range(n_classes)]
    recall = [float(diag[k] / row[k]) if row[k] else 0.0 for k in range(n_classes)]
    return Evaluation(float(np.mean(targets == predicted)), confusion, precision, recall)


def evaluate(model: FcnnModel, dataset: LabeledDataset) -> Evaluation:
    pred, _ = predict(model, dataset.inputs)
    return evaluate_predictions(dataset.targets, pred, model.layer_sizes[-1])


def model_to_dict(model: FcnnModel) -> dict:
    d = {
        "format_version": FORMAT_VERSION,
        "arch": [int(s) for s in model.layer_sizes],
        "weights": [w.tolist() for w in model.weights],
        "biases": [b.tolist() for b in model.biases],
        "input_norm": {"means": model.input_mean.tolist(), "stds": model.input_std.tolist()},
        "train_seed": int(model.train_seed),
    }
    if model.calibration is not None:
        d["calibration"] = model.calibration
    return d


def model_from_dict(d: dict) -> FcnnModel:
    try:
        if d["format_version"] != FORMAT_VERSION:
            raise ModelFormatError(f"unsupported format_version {d['format_version']!r}")
        sizes = [int(s) for s in d["arch"]]
        weights = [np.array(w, dtype=float).reshape(len(w), -1) if len(w) else np.zeros((0, 0))
                   for w in d["weights"]]
        biases = [np.array(b, dtype=float) for b in d["biases"]]
        mean = np.array(d["input_norm"]["means"], dtype=float)
        std = np.array(d["input_norm"]["stds"], dtype=float)
        seed = int(d["train_seed"])
    except (KeyError, TypeError, ValueError) as exc:
        if isinstance(exc, ModelFormatError):
            raise
        raise ModelFormatError(f"malformed model: {exc}") from exc
    try:
        return FcnnModel(sizes, weights, biases, mean, std, seed, d.get("calibration"))
    except ValueError as exc:
        raise ModelFormatError(f"shape validation failed: {exc}") from exc


def save_model(model: FcnnModel, path) -> None:
    # json writes floats with repr(), which round-trips float64 exactly.
    with open(path, "w") as fh:
        json.dump(model_to_dict(model), fh)
        fh.write("\n")


def load_model(path) -> FcnnModel:
    with open(path) as fh:
        text = fh.read()
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ModelFormatError(f"{path}: parse error at line {exc.lineno}, column {exc.colno} "
                               f"(offset {exc.pos}): {exc.msg}") from exc
    return model_from_dict(data)


def export_penultimate_features(model: FcnnModel, dataset: LabeledDataset, path) -> np.ndarray:
    """Write last-hidden-layer activations plus the label, one row per sample."""
    acts = hidden_activations(model, dataset.inputs)
    labels = dataset.targets
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["label"] + [f"h{i}" for i in range(acts.shape[1])])
        for lab, row in zip(labels.tolist(), acts):
            w.writerow([lab] + [repr(float(v)) for v in row])
    return acts


def stratified_split(targets, test_fraction: float = 0.2, seed: int = 0):
    """Boolean train mask with ``test_fraction`` of every class held out."""
    targets = np.asarray(targets, dtype=int)
    rng = substream(seed, "split")
    train_mask = np.ones(targets.size, dtype=bool)
    for k in np.unique(targets):
        idx = np.flatnonzero(targets == k)
        n_test = int(round(test_fraction * idx.size))
        train_mask[rng.permutation(idx)[:n_test]] = False
    return train_mask
