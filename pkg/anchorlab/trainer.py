#!/usr/bin/env python3
"""
Trainer
A small deterministic MLP feature extractor with an anchored or learnable
linear prototype classifier, trained by SGD with momentum, weight decay and
cosine annealing
"""

import copy
import csv
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.special import softmax

from .analysis import min_prototype_angle, sample_margins
from .config import to_json
from .datasets import LabeledDataset
from .errors import (
    AnchoringError,
    ConfigError,
    DimMismatch,
    FormatError,
    IncompatibleSpec,
    ShapeError,
)
from .losses import MARGIN_VARIANTS, NSL, LossSpec, classifier_logits, evaluate, l2_normalize
from .prototypes import PrototypeSet, cosine_lr

logger = logging.getLogger(__name__)

RELU = "ReLU"
TANH = "Tanh"
ACTIVATIONS = (RELU, TANH)
LEARNABLE = "Learnable"
ANCHORED = "Anchored"

# Default Many/Few thresholds on training-class counts
DEFAULT_GROUP_THRESHOLDS = (100, 20)

METRICS_HEADER = [
    "epoch",
    "train_loss",
    "train_acc",
    "eval_acc",
    "min_sample_margin",
    "mean_feature_norm",
    "mean_prototype_norm",
    "min_prototype_angle_deg",
    "learning_rate",
    "per_class_acc",
]

CHECKPOINT_FORMAT = "anchorlab-checkpoint-v1"


@dataclass(frozen=True, eq=False)
class ModelConfig:
    """
    MLP feature extractor and classifier layout

    Hidden layers use the activation; the last layer projects linearly to
    feature_dim, so hidden_dims=() is a linear model. An anchored classifier
    copies the given prototypes; a learnable one is drawn from classifier_seed.
    """

    input_dim: int
    feature_dim: int
    num_classes: int = 0
    hidden_dims: Tuple[int, ...] = (128, 128)
    activation: str = RELU
    classifier: str = LEARNABLE
    prototypes: Optional[PrototypeSet] = None
    classifier_seed: int = 0

    def __post_init__(self) -> None:
        object.__setattr__(self, "hidden_dims", tuple(int(h) for h in self.hidden_dims))
        if self.classifier == ANCHORED and self.prototypes is not None and not self.num_classes:
            object.__setattr__(self, "num_classes", self.prototypes.k)

    @property
    def k(self) -> int:
        return self.num_classes

    @property
    def anchored(self) -> bool:
        return self.classifier == ANCHORED

    def validate(self) -> None:
        if self.input_dim < 1 or self.feature_dim < 1 or any(h < 1 for h in self.hidden_dims):
            raise DimMismatch("all layer dimensions must be at least 1")
        if self.activation not in ACTIVATIONS:
            raise ConfigError(f"activation must be one of {ACTIVATIONS}")
        if self.classifier not in (LEARNABLE, ANCHORED):
            raise ConfigError(f"classifier must be '{LEARNABLE}' or '{ANCHORED}'")
        if self.anchored:
            if self.prototypes is None:
                raise ConfigError("an anchored classifier needs a PrototypeSet")
            if self.prototypes.d != self.feature_dim:
                raise DimMismatch(
                    f"prototype dimension {self.prototypes.d} != feature_dim {self.feature_dim}"
                )
            if self.num_classes != self.prototypes.k:
                raise DimMismatch(
                    f"num_classes {self.num_classes} != prototype count {self.prototypes.k}"
                )
        elif self.num_classes < 2:
            raise ConfigError("a learnable classifier needs num_classes >= 2")

    def to_dict(self) -> Dict[str, Any]:
        data: Dict[str, Any] = {
            "input_dim": self.input_dim,
            "feature_dim": self.feature_dim,
            "num_classes": self.num_classes,
            "hidden_dims": list(self.hidden_dims),
            "activation": self.activation,
            "classifier": self.classifier,
            "classifier_seed": self.classifier_seed,
        }
        if self.prototypes is not None:
            data["prototypes"] = self.prototypes.metadata()
        return data

    @classmethod
    def from_dict(
        cls, data: Dict[str, Any], prototypes: Optional[PrototypeSet] = None
    ) -> "ModelConfig":
        fields = {key: value for key, value in data.items() if key != "prototypes"}
        unknown = set(fields) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"Unknown ModelConfig fields: {sorted(unknown)}")
        return cls(prototypes=prototypes, **fields)


@dataclass(frozen=True)
class OptimConfig:
    learning_rate: float = 0.05
    momentum: float = 0.9
    weight_decay: float = 5e-4
    epochs: int = 100
    batch_size: int = 128
    cosine_annealing: bool = True
    t_max: Optional[int] = None
    seed: int = 0
    log_every: int = 10

    def validate(self) -> None:
        if self.learning_rate <= 0:
            raise ConfigError("learning_rate must be positive")
        if not 0 <= self.momentum < 1:
            raise ConfigError("momentum must lie in [0, 1)")
        if self.weight_decay < 0:
            raise ConfigError("weight_decay cannot be negative")
        if self.epochs < 0:
            raise ConfigError("epochs cannot be negative")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be at least 1")
        if self.t_max is not None and self.t_max < 1:
            raise ConfigError("t_max must be at least 1")

    @property
    def period(self) -> int:
        return self.t_max if self.t_max is not None else max(self.epochs, 1)

    def learning_rate_at(self, epoch: int) -> float:
        if not self.cosine_annealing:
            return self.learning_rate
        return cosine_lr(self.learning_rate, epoch, self.period)

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "OptimConfig":
        unknown = set(data) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"Unknown OptimConfig fields: {sorted(unknown)}")
        cfg = cls(**data)
        cfg.validate()
        return cfg


@dataclass(eq=False)
class TrainState:
    """
    Parameters, momentum buffers, epoch counter and RNG of one training run

    An anchored classifier is a read-only array; nothing writes to it.
    """

    weights: List[np.ndarray]
    biases: List[np.ndarray]
    classifier: np.ndarray
    anchored: bool
    activation: str
    rng: np.random.Generator
    epoch: int = 0
    weight_buffers: List[Optional[np.ndarray]] = field(default_factory=list)
    bias_buffers: List[Optional[np.ndarray]] = field(default_factory=list)
    classifier_buffer: Optional[np.ndarray] = None
    train_class_counts: Optional[np.ndarray] = None

    @property
    def k(self) -> int:
        return int(self.classifier.shape[0])

    @property
    def input_dim(self) -> int:
        return int(self.weights[0].shape[0])

    def copy(self) -> "TrainState":
        clone = copy.deepcopy(self)
        if self.anchored:
            clone.classifier = self.classifier
        return clone

    def parameters(self) -> List[Tuple[str, np.ndarray]]:
        """Named tensors in checkpoint order: W1, b1, ..., Wn, bn, classifier"""
        named: List[Tuple[str, np.ndarray]] = []
        for i, (W, b) in enumerate(zip(self.weights, self.biases), start=1):
            named.append((f"W{i}", W))
            named.append((f"b{i}", b))
        named.append(("classifier", self.classifier))
        return named

    def buffers(self) -> List[Tuple[str, np.ndarray]]:
        named: List[Tuple[str, np.ndarray]] = []
        for i, (bw, bb) in enumerate(zip(self.weight_buffers, self.bias_buffers), start=1):
            if bw is not None and bb is not None:
                named.append((f"buf:W{i}", bw))
                named.append((f"buf:b{i}", bb))
        if self.classifier_buffer is not None:
            named.append(("buf:classifier", self.classifier_buffer))
        return named


@dataclass(frozen=True)
class EpochMetrics:
    epoch: int
    train_loss: float
    train_acc: float
    eval_acc: float
    per_class_acc: Tuple[float, ...]
    min_sample_margin: float
    mean_feature_norm: float
    mean_prototype_norm: float
    min_prototype_angle_deg: float
    learning_rate: float

    def to_row(self) -> List[str]:
        values = [
            str(self.epoch),
            repr(self.train_loss),
            repr(self.train_acc),
            repr(self.eval_acc),
            repr(self.min_sample_margin),
            repr(self.mean_feature_norm),
            repr(self.mean_prototype_norm),
            repr(self.min_prototype_angle_deg),
            repr(self.learning_rate),
            ";".join(repr(a) for a in self.per_class_acc),
        ]
        return values

    def to_dict(self) -> Dict[str, Any]:
        data = asdict(self)
        data["per_class_acc"] = list(self.per_class_acc)
        return data


@dataclass(frozen=True)
class GroupedAccuracy:
    many_acc: float
    medium_acc: float
    few_acc: float
    overall: float
    many_min: int
    few_max: int
    groups: Dict[str, List[int]]
    excluded_classes: List[int]

    def to_dict(self) -> Dict[str, Any]:
        return {
            "kind": "grouped_accuracy",
            "many_acc": self.many_acc,
            "medium_acc": self.medium_acc,
            "few_acc": self.few_acc,
            "overall": self.overall,
            "thresholds": {"many_min": self.many_min, "few_max": self.few_max},
            "groups": self.groups,
            "excluded_classes": self.excluded_classes,
        }


def _activate(activation: str, values: np.ndarray) -> np.ndarray:
    if activation == RELU:
        return np.maximum(values, 0.0)
    return np.tanh(values)


def _activation_grad(activation: str, outputs: np.ndarray) -> np.ndarray:
    if activation == RELU:
        return (outputs > 0).astype(np.float64)
    return 1.0 - outputs**2


def init_model(cfg: ModelConfig, seed: int = 0) -> TrainState:
    """
    Fan-in scaled random initialization

    Hidden weights use N(0, 2/fan_in) for ReLU and N(0, 1/fan_in) for Tanh;
    the feature projection uses N(0, 1/fan_in); biases start at zero.

    Raises:
        DimMismatch: If the anchored prototypes do not fit feature_dim
    """
    cfg.validate()
    init_seq, run_seq = np.random.SeedSequence(seed).spawn(2)
    rng = np.random.default_rng(init_seq)
    dims = [cfg.input_dim, *cfg.hidden_dims, cfg.feature_dim]
    weights: List[np.ndarray] = []
    biases: List[np.ndarray] = []
    for layer, (fan_in, fan_out) in enumerate(zip(dims[:-1], dims[1:])):
        hidden = layer < len(dims) - 2
        gain = 2.0 if hidden and cfg.activation == RELU else 1.0
        weights.append(rng.standard_normal((fan_in, fan_out)) * math.sqrt(gain / fan_in))
        biases.append(np.zeros(fan_out))

    if cfg.anchored:
        assert cfg.prototypes is not None
        classifier = np.array(cfg.prototypes.vectors, dtype=np.float64)
        classifier.setflags(write=False)
    else:
        cls_rng = np.random.default_rng(cfg.classifier_seed)
        classifier = cls_rng.standard_normal((cfg.num_classes, cfg.feature_dim))
        classifier *= math.sqrt(1.0 / cfg.feature_dim)

    return TrainState(
        weights=weights,
        biases=biases,
        classifier=classifier,
        anchored=cfg.anchored,
        activation=cfg.activation,
        rng=np.random.default_rng(run_seq),
        weight_buffers=[None] * len(weights),
        bias_buffers=[None] * len(biases),
    )


def _forward(state: TrainState, inputs: np.ndarray) -> List[np.ndarray]:
    """Layer outputs; entry 0 is the input and the last entry the features"""
    outputs = [inputs]
    last = len(state.weights) - 1
    for layer, (W, b) in enumerate(zip(state.weights, state.biases)):
        pre = outputs[-1] @ W + b
        outputs.append(pre if layer == last else _activate(state.activation, pre))
    return outputs


def _backward(
    state: TrainState, outputs: List[np.ndarray], grad_features: np.ndarray
) -> Tuple[List[np.ndarray], List[np.ndarray]]:
    grad_w: List[np.ndarray] = [np.empty(0)] * len(state.weights)
    grad_b: List[np.ndarray] = [np.empty(0)] * len(state.biases)
    grad = grad_features
    for layer in reversed(range(len(state.weights))):
        grad_w[layer] = outputs[layer].T @ grad
        grad_b[layer] = grad.sum(axis=0)
        if layer > 0:
            grad = (grad @ state.weights[layer].T) * _activation_grad(
                state.activation, outputs[layer]
            )
    return grad_w, grad_b


def _sgd_step(
    param: np.ndarray,
    grad: np.ndarray,
    buffer: Optional[np.ndarray],
    opt: OptimConfig,
    lr: float,
) -> np.ndarray:
    """In-place SGD with coupled weight decay and momentum; returns the new buffer"""
    step = grad + opt.weight_decay * param
    buffer = step.copy() if buffer is None else opt.momentum * buffer + step
    param -= lr * buffer
    return buffer


def _check_inputs(state: TrainState, inputs: np.ndarray) -> np.ndarray:
    inputs = np.asarray(inputs, dtype=np.float64)
    if inputs.ndim != 2 or inputs.shape[1] != state.input_dim:
        raise ShapeError(f"inputs of shape {inputs.shape} do not fit input_dim {state.input_dim}")
    return inputs


def extract_features(state: TrainState, inputs: np.ndarray) -> np.ndarray:
    """z = phi(x) for every input row"""
    return _forward(state, _check_inputs(state, inputs))[-1]


def predict(
    state: TrainState, inputs: np.ndarray, loss: LossSpec
) -> Tuple[np.ndarray, np.ndarray]:
    """
    Predicted classes and softmax probabilities of s W^T z

    Returns:
        (n class indices, n x k probabilities)
    """
    logits = classifier_logits(loss, extract_features(state, inputs), state.classifier)
    return logits.argmax(axis=1), softmax(logits, axis=1)


def _target_labels(dataset: LabeledDataset) -> np.ndarray:
    return dataset.clean_labels if dataset.clean_labels is not None else dataset.labels


def per_class_accuracy(predictions: np.ndarray, labels: np.ndarray, k: int) -> np.ndarray:
    """Accuracy per class; NaN for classes without samples"""
    totals = np.bincount(labels, minlength=k).astype(np.float64)
    hits = np.bincount(labels[predictions == labels], minlength=k).astype(np.float64)
    return np.divide(hits, totals, out=np.full(k, np.nan), where=totals > 0)


def check_compatible(state: TrainState, dataset: LabeledDataset, loss: LossSpec) -> None:
    """
    Raises:
        IncompatibleSpec: If the loss spec does not fit the classifier mode
        ShapeError: If the dataset does not fit the model input
    """
    if loss.variant == NSL and not loss.anchored:
        err = AnchoringError("NSL needs anchored prototypes")
        raise IncompatibleSpec(f"NSL cannot train a learnable classifier: {err}") from err
    if loss.anchored != state.anchored:
        mode = ANCHORED if state.anchored else LEARNABLE
        raise IncompatibleSpec(
            f"loss spec anchored={loss.anchored} does not match a {mode} classifier"
        )
    if loss.variant in MARGIN_VARIANTS and len(loss.margins or ()) != state.k:
        raise IncompatibleSpec(f"{loss.variant} needs {state.k} margins")
    if dataset.k != state.k:
        raise IncompatibleSpec(f"dataset has k={dataset.k}, classifier has {state.k} classes")
    if dataset.m != state.input_dim:
        raise ShapeError(f"dataset dimension {dataset.m} != model input_dim {state.input_dim}")


def _epoch_metrics(
    state: TrainState,
    dataset: LabeledDataset,
    eval_set: LabeledDataset,
    loss: LossSpec,
    train_loss: float,
    lr: float,
) -> EpochMetrics:
    features = extract_features(state, dataset.features)
    logits = classifier_logits(loss, features, state.classifier)
    train_acc = float(np.mean(logits.argmax(axis=1) == dataset.labels))

    unit = l2_normalize(features)[0] if loss.feature_normalize else features
    protos = (
        l2_normalize(state.classifier, "prototype")[0]
        if loss.prototype_normalize
        else state.classifier
    )
    margins = sample_margins(unit, dataset.labels, protos, loss.scale)

    eval_pred, _ = predict(state, eval_set.features, loss)
    eval_labels = _target_labels(eval_set)
    per_class = per_class_accuracy(eval_pred, eval_labels, state.k)

    return EpochMetrics(
        epoch=state.epoch,
        train_loss=train_loss,
        train_acc=train_acc,
        eval_acc=float(np.mean(eval_pred == eval_labels)),
        per_class_acc=tuple(float(a) for a in per_class),
        min_sample_margin=margins.min_margin,
        mean_feature_norm=float(np.linalg.norm(features, axis=1).mean()),
        mean_prototype_norm=float(np.linalg.norm(state.classifier, axis=1).mean()),
        min_prototype_angle_deg=min_prototype_angle(state.classifier),
        learning_rate=lr,
    )


def train(
    state: TrainState,
    dataset: LabeledDataset,
    loss: LossSpec,
    opt: OptimConfig,
    eval_set: Optional[LabeledDataset] = None,
) -> Tuple[TrainState, List[EpochMetrics]]:
    """
    Mini-batch SGD over shuffled epochs

    Weight decay is applied to every learnable tensor; an anchored classifier
    is never touched. The learning rate follows lr (1 + cos(pi t / T_max)) / 2
    per epoch when cosine annealing is on. eval_set defaults to the training
    data and is scored against clean labels when it has them. A fresh state
    shuffles with opt.seed; a resumed one continues its stored RNG.

    Returns:
        The trained copy of state and one EpochMetrics per epoch

    Raises:
        IncompatibleSpec: If the loss spec does not fit the classifier mode
    """
    opt.validate()
    check_compatible(state, dataset, loss)
    eval_set = eval_set if eval_set is not None else dataset
    if eval_set.m != state.input_dim:
        raise ShapeError(f"eval dimension {eval_set.m} != model input_dim {state.input_dim}")

    state = state.copy()
    metrics: List[EpochMetrics] = []
    if opt.epochs == 0:
        return state, metrics

    if state.epoch == 0:
        state.rng = np.random.default_rng(opt.seed)
    state.train_class_counts = dataset.class_counts()
    n = dataset.n
    for _ in range(opt.epochs):
        lr = opt.learning_rate_at(state.epoch)
        order = state.rng.permutation(n)
        loss_total = 0.0
        for start in range(0, n, opt.batch_size):
            batch = order[start : start + opt.batch_size]
            outputs = _forward(state, dataset.features[batch])
            out = evaluate(loss, outputs[-1], dataset.labels[batch], state.classifier)
            loss_total += out.loss * batch.size

            grad_w, grad_b = _backward(state, outputs, out.grad_features)
            for i in range(len(state.weights)):
                state.weight_buffers[i] = _sgd_step(
                    state.weights[i], grad_w[i], state.weight_buffers[i], opt, lr
                )
                state.bias_buffers[i] = _sgd_step(
                    state.biases[i], grad_b[i], state.bias_buffers[i], opt, lr
                )
            if not state.anchored:
                state.classifier_buffer = _sgd_step(
                    state.classifier, out.grad_prototypes, state.classifier_buffer, opt, lr
                )

        state.epoch += 1
        record = _epoch_metrics(state, dataset, eval_set, loss, loss_total / n, lr)
        metrics.append(record)
        if state.epoch % opt.log_every == 0:
            logger.info(
                "epoch %d loss %.4f train_acc %.4f eval_acc %.4f margin %.4f",
                record.epoch,
                record.train_loss,
                record.train_acc,
                record.eval_acc,
                record.min_sample_margin,
            )
    return state, metrics


def evaluate_grouped(
    state: TrainState,
    dataset: LabeledDataset,
    loss: LossSpec,
    group_thresholds: Tuple[int, int] = DEFAULT_GROUP_THRESHOLDS,
    train_counts: Optional[Sequence[int]] = None,
) -> GroupedAccuracy:
    """
    Mean per-class accuracy of the Many, Medium and Few groups

    A class is Many when its training count exceeds many_min, Few when it is
    below few_max, Medium otherwise. Classes without samples in dataset are
    left out of every mean and listed in excluded_classes. Empty groups
    report NaN.
    """
    many_min, few_max = group_thresholds
    counts = train_counts if train_counts is not None else state.train_class_counts
    if counts is None:
        raise ConfigError("training class counts are unknown; pass train_counts")
    counts = np.asarray(counts)
    if counts.shape != (state.k,):
        raise ShapeError(f"expected {state.k} training counts, got {counts.shape}")

    predictions, _ = predict(state, dataset.features, loss)
    accuracy = per_class_accuracy(predictions, _target_labels(dataset), state.k)
    excluded = [int(c) for c in np.flatnonzero(np.isnan(accuracy))]

    groups: Dict[str, List[int]] = {"many": [], "medium": [], "few": []}
    for cls, count in enumerate(counts):
        if count > many_min:
            groups["many"].append(cls)
        elif count < few_max:
            groups["few"].append(cls)
        else:
            groups["medium"].append(cls)

    def group_mean(members: List[int]) -> float:
        scored = [accuracy[c] for c in members if c not in excluded]
        return float(np.mean(scored)) if scored else math.nan

    included = [c for c in range(state.k) if c not in excluded]
    return GroupedAccuracy(
        many_acc=group_mean(groups["many"]),
        medium_acc=group_mean(groups["medium"]),
        few_acc=group_mean(groups["few"]),
        overall=group_mean(included),
        many_min=many_min,
        few_max=few_max,
        groups=groups,
        excluded_classes=excluded,
    )


def metrics_to_csv(metrics: Sequence[EpochMetrics], path: Union[str, Path]) -> Path:
    """Write the metrics stream with the fixed METRICS_HEADER"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as handle:
        writer = csv.writer(handle, lineterminator="\n")
        writer.writerow(METRICS_HEADER)
        for record in metrics:
            writer.writerow(record.to_row())
    return path


def save_checkpoint(
    state: TrainState, path: Union[str, Path], configs: Optional[Dict[str, Any]] = None
) -> Tuple[Path, Path]:
    """
    Write <path>.ckpt.json and <path>.ckpt.bin

    The blob concatenates little-endian float64 tensors in the order listed
    under "tensors" in the header: W1, b1, ..., Wn, bn, classifier, then any
    momentum buffers.
    """
    base = Path(path)
    base.parent.mkdir(parents=True, exist_ok=True)
    json_path = base.with_name(base.name + ".ckpt.json")
    bin_path = base.with_name(base.name + ".ckpt.bin")

    tensors = state.parameters() + state.buffers()
    header = {
        "format": CHECKPOINT_FORMAT,
        "configs": configs or {},
        "epoch": state.epoch,
        "anchored": state.anchored,
        "activation": state.activation,
        "rng_state": state.rng.bit_generator.state,
        "train_class_counts": (
            state.train_class_counts.tolist() if state.train_class_counts is not None else None
        ),
        "tensors": [{"name": name, "shape": list(t.shape)} for name, t in tensors],
    }
    json_path.write_text(to_json(header))
    with open(bin_path, "wb") as handle:
        for _, tensor in tensors:
            handle.write(np.ascontiguousarray(tensor, dtype="<f8").tobytes())
    logger.info("Wrote checkpoint %s", json_path)
    return json_path, bin_path


def load_checkpoint(path: Union[str, Path]) -> Tuple[TrainState, Dict[str, Any]]:
    """Read a checkpoint written by save_checkpoint; returns (state, configs)"""
    base = Path(path)
    for suffix in (".ckpt.json", ".ckpt.bin"):
        if base.name.endswith(suffix):
            base = base.with_name(base.name[: -len(suffix)])
    json_path = base.with_name(base.name + ".ckpt.json")
    bin_path = base.with_name(base.name + ".ckpt.bin")
    try:
        header = json.loads(json_path.read_text())
        blob = bin_path.read_bytes()
    except OSError as e:
        raise FormatError(f"cannot read checkpoint {base}: {e}", offset=0) from e
    except json.JSONDecodeError as e:
        raise FormatError(f"invalid checkpoint header {json_path}: {e}", offset=e.pos) from e
    if not isinstance(header, dict) or header.get("format") != CHECKPOINT_FORMAT:
        raise FormatError(f"{json_path} is not an anchorlab checkpoint", offset=0)
    try:
        return _restore_state(header, blob, bin_path)
    except FormatError:
        raise
    except (KeyError, TypeError, ValueError, AttributeError) as e:
        raise FormatError(f"incomplete checkpoint header {json_path}: {e!r}", offset=0) from e


def _restore_state(
    header: Dict[str, Any], blob: bytes, bin_path: Path
) -> Tuple[TrainState, Dict[str, Any]]:
    tensors: Dict[str, np.ndarray] = {}
    offset = 0
    for entry in header["tensors"]:
        shape = tuple(entry["shape"])
        size = int(np.prod(shape)) * 8
        if offset + size > len(blob):
            raise FormatError(f"{bin_path} is truncated at tensor {entry['name']}", offset=len(blob))
        tensors[entry["name"]] = np.frombuffer(blob, dtype="<f8", count=size // 8, offset=offset).reshape(shape).copy()
        offset += size
    if offset != len(blob):
        raise FormatError(f"{bin_path} has trailing bytes", offset=offset)

    layers = sum(1 for name in tensors if name.startswith("W"))
    weights = [tensors[f"W{i}"] for i in range(1, layers + 1)]
    biases = [tensors[f"b{i}"] for i in range(1, layers + 1)]
    classifier = tensors["classifier"]
    anchored = bool(header["anchored"])
    if anchored:
        classifier.setflags(write=False)
    rng = np.random.default_rng()
    rng.bit_generator.state = header["rng_state"]
    counts = header.get("train_class_counts")
    state = TrainState(
        weights=weights,
        biases=biases,
        classifier=classifier,
        anchored=anchored,
        activation=header["activation"],
        rng=rng,
        epoch=int(header["epoch"]),
        weight_buffers=[tensors.get(f"buf:W{i}") for i in range(1, layers + 1)],
        bias_buffers=[tensors.get(f"buf:b{i}") for i in range(1, layers + 1)],
        classifier_buffer=tensors.get("buf:classifier"),
        train_class_counts=np.asarray(counts) if counts is not None else None,
    )
    return state, header.get("configs", {})


class Trainer:
    """
    Training run with history and printable summaries

    Wraps init_model/train so a run can be fitted once and then summarized,
    tabulated or written out.
    """

    def __init__(
        self,
        model_cfg: ModelConfig,
        optim_cfg: OptimConfig,
        loss_spec: LossSpec,
        seed: int = 0,
    ):
        self.model_cfg = model_cfg
        self.optim_cfg = optim_cfg
        self.loss_spec = loss_spec
        self.seed = seed
        self.state = init_model(model_cfg, seed)
        self.history: List[EpochMetrics] = []
        self.results: Dict[str, float] = {}

    def fit(
        self, dataset: LabeledDataset, eval_set: Optional[LabeledDataset] = None
    ) -> Dict[str, float]:
        """Train for optim_cfg.epochs and return the final-epoch figures"""
        self.state, metrics = train(self.state, dataset, self.loss_spec, self.optim_cfg, eval_set)
        self.history.extend(metrics)
        if self.history:
            last = self.history[-1]
            self.results = {
                "epochs": float(last.epoch),
                "train_loss": last.train_loss,
                "train_acc": last.train_acc,
                "eval_acc": last.eval_acc,
                "peak_eval_acc": max(m.eval_acc for m in self.history),
                "min_sample_margin": last.min_sample_margin,
                "mean_feature_norm": last.mean_feature_norm,
                "min_prototype_angle_deg": last.min_prototype_angle_deg,
            }
        return self.results

    def configs(self) -> Dict[str, Any]:
        return {
            "model": self.model_cfg.to_dict(),
            "optim": self.optim_cfg.to_dict(),
            "loss": self.loss_spec.to_dict(),
            "seed": self.seed,
        }

    def get_summary(self) -> str:
        """Return formatted summary of the last fit"""
        if not self.results:
            return "No training performed yet."

        return f"""
Training Results
================
Epochs:            {int(self.results['epochs'])}
Final Train Loss:  {self.results['train_loss']:.4f}
Train Accuracy:    {self.results['train_acc']:.4f}
Eval Accuracy:     {self.results['eval_acc']:.4f} (peak {self.results['peak_eval_acc']:.4f})
Min Sample Margin: {self.results['min_sample_margin']:.4f}
Mean Feature Norm: {self.results['mean_feature_norm']:.4f}
Min Proto Angle:   {self.results['min_prototype_angle_deg']:.2f} deg
"""

    def get_epoch_table(self) -> List[Dict[str, Any]]:
        """Return the epoch history as a list of dictionaries"""
        return [record.to_dict() for record in self.history]

    def print_epoch_breakdown(self) -> None:
        """Print formatted per-epoch table"""
        if not self.history:
            print("No epoch breakdown available.")
            return

        print("\nEpoch Breakdown")
        print("=" * 72)
        print(f"{'Epoch':<7} {'Loss':<10} {'Train Acc':<10} {'Eval Acc':<10} {'Margin':<10} {'LR':<10}")
        print("-" * 72)
        for record in self.history:
            print(
                f"{record.epoch:<7} "
                f"{record.train_loss:<10.4f} "
                f"{record.train_acc:<10.4f} "
                f"{record.eval_acc:<10.4f} "
                f"{record.min_sample_margin:<10.4f} "
                f"{record.learning_rate:<10.2e}"
            )
