"""
Analysis
Sample margins, calibration, norm statistics, prototype angles, Lipschitz
constants and the noisy-label risk bounds
"""

import csv
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Union

import numpy as np

from .config import thread_count
from .errors import DomainError, ProbabilityError, RateError, ShapeError, ZeroVectorError
from .losses import LossSpec, evaluate
from .prototypes import PrototypeLike, as_matrix, min_angle_deg

logger = logging.getLogger(__name__)

DEFAULT_ECE_BINS = 15
DEFAULT_NORM_BINS = 20

# Samples per shard in empirical_lipschitz
_LIPSCHITZ_CHUNK = 10000


def _finite_or_none(value: float) -> Optional[float]:
    return None if value is None or not math.isfinite(value) else float(value)


@dataclass(frozen=True, eq=False)
class MarginReport:
    per_sample: np.ndarray
    per_class: np.ndarray
    min_margin: float
    scale: float

    def to_dict(self) -> Dict[str, Any]:
        return {
            "kind": "margins",
            "scale": self.scale,
            "min_margin": self.min_margin,
            "per_class": [_finite_or_none(v) for v in self.per_class],
            "mean_margin": float(np.mean(self.per_sample)) if self.per_sample.size else None,
        }


@dataclass(frozen=True)
class CalibrationBin:
    lower: float
    upper: float
    confidence_mean: float
    accuracy: float
    count: int


@dataclass(frozen=True)
class CalibrationReport:
    bins: List[CalibrationBin]
    ece: float
    bin_count: int

    def to_dict(self) -> Dict[str, Any]:
        return {
            "kind": "calibration",
            "ece": self.ece,
            "bin_count": self.bin_count,
            "bins": [
                {
                    "lower": b.lower,
                    "upper": b.upper,
                    "confidence_mean": _finite_or_none(b.confidence_mean),
                    "accuracy": _finite_or_none(b.accuracy),
                    "count": b.count,
                }
                for b in self.bins
            ],
        }


@dataclass(frozen=True)
class UnanchoredBounds:
    normalized_w_only: float
    normalized_both: float

    def to_dict(self) -> Dict[str, Any]:
        return {
            "kind": "unanchored_lipschitz",
            "normalized_w_only": self.normalized_w_only,
            "normalized_both": self.normalized_both,
        }


@dataclass(frozen=True)
class BoundReport:
    eta: float
    k: int
    B: float
    lipschitz: float
    bound: float
    variant: str

    def to_dict(self) -> Dict[str, Any]:
        return {
            "kind": "risk_bound",
            "eta": self.eta,
            "k": self.k,
            "B": self.B,
            "lambda": self.lipschitz,
            "bound": self.bound,
            "variant": self.variant,
        }


@dataclass(frozen=True, eq=False)
class NormStats:
    prototype_norms: np.ndarray
    feature_norms: np.ndarray
    histogram_counts: np.ndarray
    histogram_edges: np.ndarray
    mean_prototype_norm: float
    mean_feature_norm: float
    extra: Dict[str, Any] = field(default_factory=dict)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "kind": "norm_stats",
            "per_class_prototype_norms": self.prototype_norms.tolist(),
            "mean_prototype_norm": self.mean_prototype_norm,
            "mean_feature_norm": self.mean_feature_norm,
            "feature_norm_histogram": {
                "edges": self.histogram_edges.tolist(),
                "counts": self.histogram_counts.tolist(),
            },
            **self.extra,
        }


def sample_margins(
    features: np.ndarray, labels: np.ndarray, protos: PrototypeLike, scale: float = 1.0
) -> MarginReport:
    """
    Margins s (w_y^T z - max_{j != y} w_j^T z) per sample, per class and overall

    Classes without samples get NaN in per_class and are skipped by the minimum.

    Raises:
        ShapeError: If features, labels and prototypes disagree
    """
    W = as_matrix(protos)
    features = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if features.ndim != 2 or features.shape[1] != W.shape[1]:
        raise ShapeError(f"features of shape {features.shape} do not fit prototypes {W.shape}")
    if labels.shape != (features.shape[0],):
        raise ShapeError(f"expected {features.shape[0]} labels, got {labels.shape}")

    k = W.shape[0]
    logits = features @ W.T
    rows = np.arange(labels.size)
    true_logit = logits[rows, labels]
    others = logits.copy()
    others[rows, labels] = -np.inf
    per_sample = scale * (true_logit - others.max(axis=1, initial=-np.inf))

    per_class = np.full(k, np.nan)
    for cls in range(k):
        members = per_sample[labels == cls]
        if members.size:
            per_class[cls] = members.min()
    min_margin = float(per_sample.min()) if per_sample.size else math.nan
    return MarginReport(per_sample=per_sample, per_class=per_class, min_margin=min_margin, scale=scale)


def min_prototype_angle(W: np.ndarray) -> float:
    """
    Smallest pairwise angle between prototype rows, in degrees

    Raises:
        ZeroVectorError: If any prototype is the zero vector
    """
    matrix = as_matrix(W)
    if np.any(np.linalg.norm(matrix, axis=1) == 0):
        raise ZeroVectorError("prototype angle undefined for a zero vector")
    return min_angle_deg(matrix)


def ece(probabilities: np.ndarray, labels: np.ndarray, bin_count: int = DEFAULT_ECE_BINS) -> CalibrationReport:
    """
    Expected calibration error over equal-width confidence bins

    Confidence is the top-class probability. Bins are (lower, upper], with the
    first bin closed at 0.

    Raises:
        ProbabilityError: If rows are not probability vectors
    """
    probs = np.asarray(probabilities, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if probs.ndim != 2 or labels.shape != (probs.shape[0],):
        raise ProbabilityError(f"probabilities {probs.shape} do not match labels {labels.shape}")
    if bin_count < 1:
        raise ProbabilityError("bin_count must be at least 1")
    if np.any(probs < 0) or np.any(np.abs(probs.sum(axis=1) - 1.0) > 1e-6):
        raise ProbabilityError("probability rows must be non-negative and sum to 1")

    n = probs.shape[0]
    confidence = probs.max(axis=1)
    correct = (probs.argmax(axis=1) == labels).astype(np.float64)
    edges = np.linspace(0.0, 1.0, bin_count + 1)
    which = np.searchsorted(edges[1:-1], confidence, side="left")

    bins: List[CalibrationBin] = []
    total = 0.0
    for b in range(bin_count):
        mask = which == b
        count = int(mask.sum())
        if count:
            conf = float(confidence[mask].mean())
            acc = float(correct[mask].mean())
            total += (count / n) * abs(acc - conf)
        else:
            conf = acc = math.nan
        bins.append(CalibrationBin(float(edges[b]), float(edges[b + 1]), conf, acc, count))
    return CalibrationReport(bins=bins, ece=total, bin_count=bin_count)


def _check_k_b(k: int, B: float) -> None:
    if k < 2:
        raise DomainError(f"need k >= 2, got {k}")
    if not B > 0:
        raise DomainError(f"need B > 0, got {B}")


def lipschitz_pal(k: int, B: float) -> float:
    """
    Lipschitz constant of the class-sum CE loss under anchored equiangular
    prototypes and ||z|| <= B: k (1 - t) / (1 + (k - 1) t), t = exp(-kB/(k-1))
    """
    _check_k_b(k, B)
    exponent = -k * B / (k - 1)
    t = math.exp(exponent)
    return k * -math.expm1(exponent) / (1.0 + (k - 1) * t)


def lipschitz_unanchored_lower_bounds(k: int, B: float) -> UnanchoredBounds:
    """
    Lower bounds on the same Lipschitz constant without anchoring

    normalized_w_only: unit prototypes, free features (k).
    normalized_both: unit prototypes and ||z|| = B,
    2 (e^{2B} - 1) / (e^{2B} / (k - 1) + 1). Both dominate lipschitz_pal; at
    k = 2 the second one coincides with it.
    """
    _check_k_b(k, B)
    decay = math.exp(-2.0 * B)
    both = 2.0 * -math.expm1(-2.0 * B) / (1.0 / (k - 1) + decay)
    bounds = UnanchoredBounds(normalized_w_only=float(k), normalized_both=both)
    pal = lipschitz_pal(k, B)
    if bounds.normalized_w_only < pal or both < pal * (1.0 - 1e-12):
        raise DomainError(f"unanchored bounds {bounds} fall below lambda_PAL={pal}")
    return bounds


def _class_sum_gradient_norms(spec: LossSpec, W: np.ndarray, points: np.ndarray) -> np.ndarray:
    n, k = points.shape[0], W.shape[0]
    batch = np.repeat(points, k, axis=0)
    labels = np.tile(np.arange(k), n)
    output = evaluate(spec, batch, labels, W, require_anchor=False)
    # evaluate() averages over the n*k rows
    per_row = output.grad_features * (n * k)
    grads = per_row.reshape(n, k, -1).sum(axis=1)
    return np.linalg.norm(grads, axis=1)


def _sample_ball(rng: np.random.Generator, count: int, d: int, B: float) -> np.ndarray:
    directions = rng.standard_normal((count, d))
    directions /= np.linalg.norm(directions, axis=1, keepdims=True)
    interior = count // 2
    radii = np.full(count, B)
    radii[:interior] = B * rng.random(interior) ** (1.0 / d)
    return directions * radii[:, None]


def empirical_lipschitz(
    loss: LossSpec, protos: PrototypeLike, B: float, samples: int = 100000, seed: int = 0
) -> float:
    """
    Largest sampled gradient norm of z -> sum_i L(W^T z, i) over ||z|| <= B

    Half the samples are uniform in the ball, half on its surface. Logits are
    W^T z with no feature normalization and unit scale (B plays the role of
    the scale). Shards draw from seeds spawned off the master seed, so the
    result does not depend on ANCHORLAB_THREADS.
    """
    if not B > 0:
        raise DomainError(f"need B > 0, got {B}")
    if samples < 1:
        raise DomainError("need at least one sample")
    W = np.array(as_matrix(protos), dtype=np.float64)
    spec = replace(loss, feature_normalize=False, scale=1.0, anchored=True)
    shard_sizes = [_LIPSCHITZ_CHUNK] * (samples // _LIPSCHITZ_CHUNK)
    if samples % _LIPSCHITZ_CHUNK:
        shard_sizes.append(samples % _LIPSCHITZ_CHUNK)
    seeds = np.random.SeedSequence(seed).spawn(len(shard_sizes))

    def shard(index: int) -> float:
        rng = np.random.default_rng(seeds[index])
        points = _sample_ball(rng, shard_sizes[index], W.shape[1], B)
        return float(_class_sum_gradient_norms(spec, W, points).max())

    workers = min(thread_count(), len(shard_sizes))
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            maxima = list(pool.map(shard, range(len(shard_sizes))))
    else:
        maxima = [shard(i) for i in range(len(shard_sizes))]
    estimate = max(maxima)
    logger.debug("empirical Lipschitz %s B=%.3g: %.6f", loss.variant, B, estimate)
    return estimate


def _check_rate(eta: float, k: int) -> None:
    if not 0 <= eta < (k - 1) / k:
        raise RateError(f"noise rate must lie in [0, (k-1)/k) = [0, {(k - 1) / k:.4f}), got {eta}")


def risk_bound_general(eta: float, lipschitz: float, B: float, k: int) -> float:
    """
    Noisy-vs-clean risk gap 2 eta lambda B / ((1 - eta) k - 1)

    Raises:
        RateError: If eta is outside [0, (k-1)/k)
        DomainError: If lambda < 0 or B <= 0
    """
    _check_rate(eta, k)
    if lipschitz < 0:
        raise DomainError("Lipschitz constant cannot be negative")
    if not B > 0:
        raise DomainError(f"need B > 0, got {B}")
    return 2.0 * eta * lipschitz * B / ((1.0 - eta) * k - 1.0)


def risk_bound_ce(eta: float, B: float, k: int) -> BoundReport:
    """
    Risk bound for CE with normalized features and anchored prototypes

    2 c eta k (1 - t) B / (k - 1 + t (k - 1)^2) with c = (k-1)/((1-eta)k-1),
    t = exp(-kB/(k-1)); checked against risk_bound_general at lambda_PAL.
    """
    _check_rate(eta, k)
    _check_k_b(k, B)
    t = math.exp(-k * B / (k - 1))
    c = (k - 1) / ((1.0 - eta) * k - 1.0)
    bound = 2.0 * c * eta * k * (1.0 - t) * B / (k - 1 + t * (k - 1) ** 2)
    pal = lipschitz_pal(k, B)
    general = risk_bound_general(eta, pal, B, k)
    if abs(bound - general) > 1e-12 * max(1.0, abs(bound)):
        raise DomainError(f"CE bound {bound} disagrees with the general form {general}")
    return BoundReport(eta=eta, k=k, B=B, lipschitz=pal, bound=bound, variant="CE+FNPAL")


def _ldam_log_ratio(alpha: float, r: float) -> float:
    """log[(1 + e^{r - alpha}) / (1 + e^{-r - alpha})]"""
    return float(np.logaddexp(0.0, r - alpha) - np.logaddexp(0.0, -r - alpha))


def ldam_bayes_threshold(alpha_plus: float, alpha_minus: float, r: float) -> float:
    """
    Conditional probability at which the binary LDAM-optimal prediction flips

    0.5 when the margins are equal; any other value means LDAM is not
    classification-calibrated.

    Raises:
        DomainError: If r <= 0
    """
    if not r > 0:
        raise DomainError(f"need r > 0, got {r}")
    minus = _ldam_log_ratio(alpha_minus, r)
    plus = _ldam_log_ratio(alpha_plus, r)
    return minus / (plus + minus)


def ldam_conditional_risk(
    eta_x: float, t: int, alpha_plus: float, alpha_minus: float, r: float
) -> float:
    """
    Binary margin-loss conditional risk at z = t (w+ - w-) / ||w+ - w-||

    eta_x log(1 + e^{-t r - alpha+}) + (1 - eta_x) log(1 + e^{t r - alpha-})
    """
    if t not in (-1, 1):
        raise DomainError("t must be -1 or +1")
    if not 0 <= eta_x <= 1:
        raise DomainError("eta_x must lie in [0, 1]")
    return float(
        eta_x * np.logaddexp(0.0, -t * r - alpha_plus)
        + (1.0 - eta_x) * np.logaddexp(0.0, t * r - alpha_minus)
    )


def norm_stats(W: np.ndarray, features: np.ndarray, bins: int = DEFAULT_NORM_BINS) -> NormStats:
    """Prototype norms, feature norms and a fixed-bin feature norm histogram"""
    matrix = as_matrix(W)
    features = np.asarray(features, dtype=np.float64)
    prototype_norms = np.linalg.norm(matrix, axis=1)
    feature_norms = np.linalg.norm(features, axis=1) if features.size else np.zeros(0)
    upper = float(feature_norms.max()) if feature_norms.size else 1.0
    counts, edges = np.histogram(feature_norms, bins=bins, range=(0.0, max(upper, 1e-12)))
    return NormStats(
        prototype_norms=prototype_norms,
        feature_norms=feature_norms,
        histogram_counts=counts,
        histogram_edges=edges,
        mean_prototype_norm=float(prototype_norms.mean()),
        mean_feature_norm=float(feature_norms.mean()) if feature_norms.size else 0.0,
    )


def reliability_rows(report: CalibrationReport) -> List[Dict[str, Any]]:
    """Tidy rows (one per bin) for plotting a reliability diagram"""
    return [
        {
            "bin": i,
            "lower": b.lower,
            "upper": b.upper,
            "confidence_mean": _finite_or_none(b.confidence_mean),
            "accuracy": _finite_or_none(b.accuracy),
            "count": b.count,
        }
        for i, b in enumerate(report.bins)
    ]


def histogram_rows(stats: NormStats) -> List[Dict[str, Any]]:
    """Tidy rows (one per histogram bin) of feature norms"""
    edges = stats.histogram_edges
    return [
        {"bin": i, "lower": float(edges[i]), "upper": float(edges[i + 1]), "count": int(c)}
        for i, c in enumerate(stats.histogram_counts)
    ]


def write_rows(rows: Sequence[Dict[str, Any]], path: Union[str, Path]) -> Path:
    """Write tidy rows as CSV with the keys of the first row as header"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as handle:
        if not rows:
            return path
        writer = csv.DictWriter(handle, fieldnames=list(rows[0].keys()), lineterminator="\n")
        writer.writeheader()
        for row in rows:
            writer.writerow({key: "" if value is None else value for key, value in row.items()})
    return path
