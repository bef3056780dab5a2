"""
Loss functions
Softmax, margin, LDAM, NSL, GCE and focal losses over a linear prototype
classifier, with analytic gradients for features and prototypes
"""

import logging
from dataclasses import dataclass
from typing import Any, Dict, Optional, Sequence, Tuple

import numpy as np
from scipy.special import log_softmax

from .errors import (
    AnchoringError,
    ConfigError,
    CountError,
    LabelError,
    NormalizationError,
    RateError,
    ShapeError,
)
from .prototypes import PrototypeLike, as_matrix

logger = logging.getLogger(__name__)

SOFTMAX = "Softmax"
MARGIN_SOFTMAX = "MarginSoftmax"
LDAM = "LDAM"
NSL = "NSL"
GCE = "GCE"
FOCAL = "Focal"
VARIANTS = (SOFTMAX, MARGIN_SOFTMAX, LDAM, NSL, GCE, FOCAL)
MARGIN_VARIANTS = (MARGIN_SOFTMAX, LDAM)


@dataclass(frozen=True)
class LossSpec:
    """
    Which loss to evaluate and how the classifier is wired

    scale is the inverse temperature s. margins belong to MarginSoftmax/LDAM,
    q to GCE and focal_gamma to Focal. feature_normalize l2-normalizes
    features before the classifier; prototype_normalize does the same for
    prototypes (the unanchored normalized baseline); anchored freezes the
    prototypes.
    """

    variant: str = SOFTMAX
    scale: float = 1.0
    margins: Optional[Tuple[float, ...]] = None
    q: Optional[float] = None
    focal_gamma: Optional[float] = None
    feature_normalize: bool = False
    anchored: bool = False
    prototype_normalize: bool = False

    def __post_init__(self) -> None:
        if self.margins is not None:
            object.__setattr__(self, "margins", tuple(float(a) for a in self.margins))
        self.validate()

    def validate(self) -> None:
        if self.variant not in VARIANTS:
            raise ConfigError(f"Unknown loss variant '{self.variant}', expected one of {VARIANTS}")
        if not self.scale > 0:
            raise ConfigError("scale must be positive")
        if (self.margins is not None) != (self.variant in MARGIN_VARIANTS):
            raise ConfigError(f"margins are required for, and only for, {MARGIN_VARIANTS}")
        if self.margins is not None and not np.all(np.isfinite(self.margins)):
            raise ConfigError("margins must be finite")
        if (self.q is not None) != (self.variant == GCE):
            raise ConfigError("q is required for, and only for, GCE")
        if self.q is not None and not 0 < self.q <= 1:
            raise ConfigError("q must lie in (0, 1]")
        if (self.focal_gamma is not None) != (self.variant == FOCAL):
            raise ConfigError("focal_gamma is required for, and only for, Focal")
        if self.focal_gamma is not None and self.focal_gamma < 0:
            raise ConfigError("focal_gamma cannot be negative")

    def to_dict(self) -> Dict[str, Any]:
        return {
            "variant": self.variant,
            "scale": self.scale,
            "margins": list(self.margins) if self.margins is not None else None,
            "q": self.q,
            "focal_gamma": self.focal_gamma,
            "feature_normalize": self.feature_normalize,
            "anchored": self.anchored,
            "prototype_normalize": self.prototype_normalize,
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "LossSpec":
        if "variant" not in data:
            raise ConfigError("LossSpec JSON needs a 'variant' field")
        unknown = set(data) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"Unknown LossSpec fields: {sorted(unknown)}")
        margins = data.get("margins")
        return cls(
            variant=data["variant"],
            scale=float(data.get("scale", 1.0)),
            margins=tuple(margins) if margins is not None else None,
            q=data.get("q"),
            focal_gamma=data.get("focal_gamma"),
            feature_normalize=bool(data.get("feature_normalize", False)),
            anchored=bool(data.get("anchored", False)),
            prototype_normalize=bool(data.get("prototype_normalize", False)),
        )


@dataclass
class LossOutput:
    loss: float
    grad_features: np.ndarray
    grad_prototypes: np.ndarray
    per_sample: np.ndarray


@dataclass(frozen=True)
class GradCheckReport:
    max_rel_error: float
    feature_rel_error: float
    prototype_rel_error: float
    prototype_grad_max_abs: float
    anchored: bool

    def to_dict(self) -> Dict[str, Any]:
        return {
            "kind": "grad_check",
            "max_rel_error": self.max_rel_error,
            "feature_rel_error": self.feature_rel_error,
            "prototype_rel_error": self.prototype_rel_error,
            "prototype_grad_max_abs": self.prototype_grad_max_abs,
            "anchored": self.anchored,
        }


def _check_inputs(
    features: np.ndarray, labels: np.ndarray, W: np.ndarray
) -> Tuple[np.ndarray, np.ndarray]:
    features = np.asarray(features, dtype=np.float64)
    if features.ndim != 2:
        raise ShapeError(f"features must be n x d, got shape {features.shape}")
    if features.shape[1] != W.shape[1]:
        raise ShapeError(
            f"feature dimension {features.shape[1]} does not match prototype "
            f"dimension {W.shape[1]}"
        )
    labels = np.asarray(labels)
    if labels.shape != (features.shape[0],):
        raise ShapeError(f"expected {features.shape[0]} labels, got shape {labels.shape}")
    if labels.size and not np.issubdtype(labels.dtype, np.integer):
        raise LabelError("labels must be integer class indices")
    k = W.shape[0]
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        bad = labels[(labels < 0) | (labels >= k)][0]
        raise LabelError(f"label {int(bad)} outside [0, {k})")
    return features, labels.astype(np.int64)


def l2_normalize(matrix: np.ndarray, what: str = "feature") -> Tuple[np.ndarray, np.ndarray]:
    """Row-wise l2 normalization; zero rows raise NormalizationError"""
    norms = np.linalg.norm(matrix, axis=1, keepdims=True)
    if np.any(norms == 0):
        row = int(np.flatnonzero(norms[:, 0] == 0)[0])
        raise NormalizationError(f"cannot l2-normalize zero {what} vector at row {row}", row=row)
    return matrix / norms, norms


def _normalize_backward(grad: np.ndarray, unit: np.ndarray, norms: np.ndarray) -> np.ndarray:
    return (grad - unit * np.sum(grad * unit, axis=1, keepdims=True)) / norms


def classifier_logits(
    spec: LossSpec, features: np.ndarray, protos: PrototypeLike
) -> np.ndarray:
    """s * W^T z with the spec's normalization applied, one row per sample"""
    W = as_matrix(protos)
    features = np.asarray(features, dtype=np.float64)
    if features.ndim != 2 or features.shape[1] != W.shape[1]:
        raise ShapeError(f"features of shape {features.shape} do not fit prototypes {W.shape}")
    u = l2_normalize(features)[0] if spec.feature_normalize else features
    v = l2_normalize(W, "prototype")[0] if spec.prototype_normalize else W
    return spec.scale * (u @ v.T)


def _margin_offsets(spec: LossSpec, labels: np.ndarray, k: int) -> np.ndarray:
    margins = np.asarray(spec.margins, dtype=np.float64)
    if margins.shape != (k,):
        raise ShapeError(f"expected {k} margins, got {margins.shape[0]}")
    offsets = np.zeros((labels.shape[0], k))
    offsets[np.arange(labels.shape[0]), labels] = margins[labels]
    return offsets


def _per_sample(
    spec: LossSpec, logits: np.ndarray, labels: np.ndarray
) -> Tuple[np.ndarray, np.ndarray]:
    """Per-sample losses and their gradients with respect to the logits"""
    n, k = logits.shape
    rows = np.arange(n)
    onehot = np.zeros((n, k))
    onehot[rows, labels] = 1.0

    if spec.variant == NSL:
        return -logits[rows, labels], -onehot

    if spec.variant in MARGIN_VARIANTS:
        logits = logits + _margin_offsets(spec, labels, k)

    log_probs = log_softmax(logits, axis=1)
    probs = np.exp(log_probs)
    log_py = log_probs[rows, labels]

    if spec.variant in (SOFTMAX, MARGIN_SOFTMAX, LDAM):
        return -log_py, probs - onehot

    p_y = probs[rows, labels]
    if spec.variant == GCE:
        q = float(spec.q)  # type: ignore[arg-type]
        p_q = np.exp(q * log_py)
        return (1.0 - p_q) / q, -p_q[:, None] * (onehot - probs)

    gamma = float(spec.focal_gamma)  # type: ignore[arg-type]
    one_minus = -np.expm1(log_py)
    weight = one_minus**gamma
    losses = -weight * log_py
    # d loss / d p_y times p_y
    dl_dp_times_p = -weight
    if gamma > 0:
        safe = np.where(one_minus > 0, one_minus, 1.0)
        focus = np.where(one_minus > 0, gamma * safe ** (gamma - 1.0) * p_y * log_py, 0.0)
        dl_dp_times_p = dl_dp_times_p + focus
    return losses, dl_dp_times_p[:, None] * (onehot - probs)


def evaluate(
    spec: LossSpec,
    features: np.ndarray,
    labels: np.ndarray,
    protos: PrototypeLike,
    require_anchor: bool = True,
) -> LossOutput:
    """
    Evaluate any loss variant with analytic gradients

    Args:
        spec: Loss specification
        features: n x d feature matrix
        labels: n class indices
        protos: PrototypeSet or k x d prototype matrix
        require_anchor: Reject NSL on unanchored prototypes

    Returns:
        LossOutput with the batch-mean loss, per-sample losses and gradients

    Raises:
        ShapeError: On dimension mismatch
        LabelError: On out-of-range labels
        AnchoringError: NSL with unanchored prototypes
        NormalizationError: Zero vector under l2 normalization
    """
    W = as_matrix(protos)
    features, labels = _check_inputs(features, labels, W)
    if require_anchor and spec.variant == NSL and not spec.anchored:
        raise AnchoringError(
            "NSL needs anchored prototypes; training them jointly collapses to a trivial solution"
        )

    if spec.feature_normalize:
        u, z_norms = l2_normalize(features)
    else:
        u, z_norms = features, None
    if spec.prototype_normalize:
        v, w_norms = l2_normalize(W, "prototype")
    else:
        v, w_norms = W, None

    n = features.shape[0]
    losses, grad_logits = _per_sample(spec, spec.scale * (u @ v.T), labels)
    loss = float(np.mean(losses)) if n else 0.0

    grad_cos = spec.scale * grad_logits / max(n, 1)
    grad_u = grad_cos @ v
    grad_features = grad_u if z_norms is None else _normalize_backward(grad_u, u, z_norms)

    if spec.anchored:
        grad_prototypes = np.zeros_like(W)
    else:
        grad_v = grad_cos.T @ u
        grad_prototypes = grad_v if w_norms is None else _normalize_backward(grad_v, v, w_norms)

    return LossOutput(
        loss=loss,
        grad_features=grad_features,
        grad_prototypes=grad_prototypes,
        per_sample=losses,
    )


def _require_variant(spec: LossSpec, allowed: Sequence[str]) -> None:
    if spec.variant not in allowed:
        raise ConfigError(f"expected a {'/'.join(allowed)} spec, got {spec.variant}")


def softmax_loss(
    features: np.ndarray, labels: np.ndarray, protos: PrototypeLike, spec: LossSpec
) -> LossOutput:
    """Cross-entropy, mean of -log softmax(s W^T z)[y]"""
    _require_variant(spec, (SOFTMAX,))
    return evaluate(spec, features, labels, protos)


def margin_loss(
    features: np.ndarray, labels: np.ndarray, protos: PrototypeLike, spec: LossSpec
) -> LossOutput:
    """Softmax loss with a per-class margin added to the true-class logit"""
    _require_variant(spec, MARGIN_VARIANTS)
    return evaluate(spec, features, labels, protos)


def nsl_loss(
    features: np.ndarray, labels: np.ndarray, protos: PrototypeLike, spec: LossSpec
) -> LossOutput:
    """Negative-signed sample logit, mean of -s w_y^T z"""
    _require_variant(spec, (NSL,))
    return evaluate(spec, features, labels, protos)


def gce_loss(
    features: np.ndarray, labels: np.ndarray, protos: PrototypeLike, spec: LossSpec
) -> LossOutput:
    """Generalized cross entropy (1 - p_y^q) / q"""
    _require_variant(spec, (GCE,))
    return evaluate(spec, features, labels, protos)


def focal_loss(
    features: np.ndarray, labels: np.ndarray, protos: PrototypeLike, spec: LossSpec
) -> LossOutput:
    """Focal loss -(1 - p_y)^gamma log p_y"""
    _require_variant(spec, (FOCAL,))
    return evaluate(spec, features, labels, protos)


def ldam_margins(class_counts: Sequence[int], constant: float = 1.0) -> np.ndarray:
    """
    Per-class LDAM margins C * n_j^(-1/4)

    Raises:
        CountError: If any class count is below 1
    """
    counts = np.asarray(class_counts, dtype=np.float64)
    if counts.ndim != 1 or counts.size < 2:
        raise CountError("need one count per class for at least 2 classes")
    if np.any(counts < 1):
        raise CountError(f"all class counts must be >= 1, got {counts.astype(int).tolist()}")
    if constant <= 0:
        raise CountError("margin constant must be positive")
    return constant * counts**-0.25


def loss_symmetry_sum(spec: LossSpec, feature: np.ndarray, protos: PrototypeLike) -> float:
    """Sum of L(f(x), i) over every class i for one feature vector"""
    W = as_matrix(protos)
    k = W.shape[0]
    feature = np.asarray(feature, dtype=np.float64).reshape(1, -1)
    batch = np.repeat(feature, k, axis=0)
    output = evaluate(spec, batch, np.arange(k), W, require_anchor=False)
    return float(np.sum(output.per_sample))


def noise_aware_scale(eta: float) -> float:
    """
    Inverse temperature for a known symmetric noise rate, 0.25 / (0.05 + eta)

    Raises:
        RateError: If eta is negative
    """
    if eta < 0:
        raise RateError(f"noise rate must be non-negative, got {eta}")
    return 0.25 / (0.05 + eta)


def _relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    scale = max(float(np.linalg.norm(analytic)), float(np.linalg.norm(numeric)))
    if scale == 0.0:
        return 0.0
    return float(np.linalg.norm(analytic - numeric)) / scale


def _central_differences(loss_of, point: np.ndarray, step: float) -> np.ndarray:
    grad = np.zeros_like(point)
    probe = point.copy()
    for idx in range(point.size):
        original = probe.flat[idx]
        probe.flat[idx] = original + step
        plus = loss_of(probe)
        probe.flat[idx] = original - step
        minus = loss_of(probe)
        probe.flat[idx] = original
        grad.flat[idx] = (plus - minus) / (2.0 * step)
    return grad


def grad_check(
    spec: LossSpec,
    features: np.ndarray,
    labels: np.ndarray,
    protos: PrototypeLike,
    step: float = 1e-5,
) -> GradCheckReport:
    """
    Compare analytic gradients with central finite differences

    Relative error is ||analytic - numeric|| / max(||analytic||, ||numeric||)
    per block. The prototype block is only differenced when unanchored; for
    anchored specs the reported prototype gradient must be exactly zero.

    Raises:
        ConfigError: If step is outside (0, 1e-2]
        NormalizationError: Zero feature with feature_normalize on
    """
    if not 0 < step <= 1e-2:
        raise ConfigError("finite-difference step must lie in (0, 1e-2]")
    W = np.array(as_matrix(protos), dtype=np.float64)
    features = np.array(features, dtype=np.float64)
    output = evaluate(spec, features, labels, W)

    numeric_features = _central_differences(
        lambda z: evaluate(spec, z, labels, W).loss, features, step
    )
    feature_err = _relative_error(output.grad_features, numeric_features)

    proto_err = 0.0
    if not spec.anchored:
        numeric_protos = _central_differences(
            lambda w: evaluate(spec, features, labels, w).loss, W, step
        )
        proto_err = _relative_error(output.grad_prototypes, numeric_protos)

    report = GradCheckReport(
        max_rel_error=max(feature_err, proto_err),
        feature_rel_error=feature_err,
        prototype_rel_error=proto_err,
        prototype_grad_max_abs=float(np.max(np.abs(output.grad_prototypes), initial=0.0)),
        anchored=spec.anchored,
    )
    logger.debug("grad_check %s: %s", spec.variant, report)
    return report
