"""
Anchored prototypes
Generation, verification and serialization of simplex-equiangular prototype sets
"""

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Dict, Optional, Tuple, Union

import numpy as np
from scipy.special import log_softmax

from .errors import ConfigError, ConvergenceError, DimensionError, FormatError

logger = logging.getLogger(__name__)

CLOSED_FORM = "closed_form"
OPTIMIZED = "optimized"
GENERATORS = (CLOSED_FORM, OPTIMIZED)

# Tolerance promised by the exact construction
CLOSED_FORM_TOLERANCE = 1e-10

# Floor applied to norms of surrogate features/prototypes during optimization
_NORM_EPS = 1e-12


@dataclass(frozen=True, eq=False)
class PrototypeSet:
    """
    k prototype vectors in d dimensions, one row per class

    The matrix is stored read-only; instances are safe to share between threads.
    Unit norms and equiangularity are not enforced here (a perturbed set must be
    loadable so that it can fail verification); use verify_equiangular.
    """

    vectors: np.ndarray
    generator: str = CLOSED_FORM
    seed: Optional[int] = None
    tolerance: float = CLOSED_FORM_TOLERANCE

    def __post_init__(self) -> None:
        vectors = np.array(self.vectors, dtype=np.float64, order="C", copy=True)
        if vectors.ndim != 2:
            raise DimensionError(
                f"Prototype matrix must be 2-dimensional, got shape {vectors.shape}"
            )
        k, d = vectors.shape
        check_dimensions(k, d)
        vectors.setflags(write=False)
        object.__setattr__(self, "vectors", vectors)

    @property
    def k(self) -> int:
        return int(self.vectors.shape[0])

    @property
    def d(self) -> int:
        return int(self.vectors.shape[1])

    def metadata(self) -> Dict[str, Any]:
        """Return the JSON header written next to the binary blob"""
        return {
            "k": self.k,
            "d": self.d,
            "generator": self.generator,
            "seed": self.seed,
            "tolerance": self.tolerance,
            "max_gram_dev": gram_deviation(self.vectors),
        }


@dataclass(frozen=True)
class ProtoGenConfig:
    """Settings of the optimized prototype generator"""

    learning_rate: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 1e-4
    epochs: int = 100000
    cosine_period: int = 20000
    scale: float = 5.0
    seed: int = 0
    tolerance: float = 1e-4
    use_relu: bool = False
    check_every: int = 500
    log_every: int = 10000

    def validate(self) -> None:
        if self.learning_rate <= 0:
            raise ConfigError("learning_rate must be positive")
        if not 0 <= self.momentum < 1:
            raise ConfigError("momentum must lie in [0, 1)")
        if self.weight_decay < 0:
            raise ConfigError("weight_decay cannot be negative")
        if self.epochs < 1:
            raise ConfigError("epochs must be at least 1")
        if self.cosine_period < 1:
            raise ConfigError("cosine_period must be at least 1")
        if self.scale <= 0:
            raise ConfigError("scale must be positive")
        if self.tolerance <= 0:
            raise ConfigError("tolerance must be positive")
        if self.check_every < 1:
            raise ConfigError("check_every must be at least 1")

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "ProtoGenConfig":
        unknown = set(data) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"Unknown ProtoGenConfig fields: {sorted(unknown)}")
        cfg = cls(**data)
        cfg.validate()
        return cfg


@dataclass(frozen=True)
class EquiangularReport:
    max_norm_dev: float
    max_gram_dev: float
    min_angle_deg: float
    tolerance: float
    passed: bool = field(default=False)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "kind": "equiangular",
            "max_norm_dev": self.max_norm_dev,
            "max_gram_dev": self.max_gram_dev,
            "min_angle_deg": self.min_angle_deg,
            "tolerance": self.tolerance,
            "pass": self.passed,
        }


PrototypeLike = Union[PrototypeSet, np.ndarray]


def as_matrix(protos: PrototypeLike) -> np.ndarray:
    """Return the k x d matrix behind a PrototypeSet or a raw array"""
    if isinstance(protos, PrototypeSet):
        return protos.vectors
    matrix = np.asarray(protos, dtype=np.float64)
    if matrix.ndim != 2:
        raise DimensionError(f"Prototype matrix must be 2-dimensional, got {matrix.shape}")
    return matrix


def check_dimensions(k: int, d: int) -> None:
    """Raise DimensionError unless 2 <= k <= d + 1"""
    if k < 2:
        raise DimensionError(f"Need at least 2 classes, got k={k}", k=k, d=d)
    if d < 1:
        raise DimensionError(f"Feature dimension must be positive, got d={d}", k=k, d=d)
    if k > d + 1:
        raise DimensionError(
            f"k={k} prototypes cannot be equiangular in d={d} dimensions (need k <= d + 1)",
            k=k,
            d=d,
        )


def target_cosine(k: int) -> float:
    """Pairwise inner product of a simplex equiangular frame"""
    return -1.0 / (k - 1)


def gram_matrix(protos: PrototypeLike) -> np.ndarray:
    """Return W W^T, symmetrized so that gram == gram.T holds bit-for-bit"""
    matrix = as_matrix(protos)
    gram = matrix @ matrix.T
    return (gram + gram.T) / 2.0


def gram_deviation(protos: PrototypeLike) -> float:
    """Largest off-diagonal |w_i . w_j + 1/(k-1)|"""
    gram = gram_matrix(protos)
    k = gram.shape[0]
    off_diagonal = ~np.eye(k, dtype=bool)
    return float(np.max(np.abs(gram[off_diagonal] - target_cosine(k))))


def pairwise_cosines(matrix: np.ndarray) -> np.ndarray:
    """Cosine similarity between every pair of rows (rows must be nonzero)"""
    norms = np.linalg.norm(matrix, axis=1)
    unit = matrix / norms[:, None]
    cosines = unit @ unit.T
    return np.clip((cosines + cosines.T) / 2.0, -1.0, 1.0)


def min_angle_deg(matrix: np.ndarray) -> float:
    cosines = pairwise_cosines(matrix)
    k = cosines.shape[0]
    off_diagonal = ~np.eye(k, dtype=bool)
    return float(np.degrees(np.arccos(np.max(cosines[off_diagonal]))))


def _helmert_basis(k: int) -> np.ndarray:
    """Orthonormal k x (k-1) basis of the subspace orthogonal to the all-ones vector"""
    basis = np.zeros((k, k - 1))
    for j in range(1, k):
        norm = math.sqrt(j * (j + 1))
        basis[:j, j - 1] = 1.0 / norm
        basis[j, j - 1] = -j / norm
    return basis


def generate_closed_form(k: int, d: int) -> PrototypeSet:
    """
    Build the simplex equiangular frame analytically

    The rows of sqrt(k/(k-1)) (I - 11^T/k) are unit vectors with pairwise inner
    product -1/(k-1); they span a (k-1)-dimensional subspace, which is mapped
    onto the first k-1 coordinates and zero-padded to d.

    Args:
        k: Number of classes
        d: Feature dimension

    Returns:
        PrototypeSet with Gram matrix k/(k-1) (I - 11^T/k)

    Raises:
        DimensionError: If k < 2 or k > d + 1
    """
    check_dimensions(k, d)
    centered = math.sqrt(k / (k - 1)) * (np.eye(k) - np.full((k, k), 1.0 / k))
    coords = centered @ _helmert_basis(k)
    coords /= np.linalg.norm(coords, axis=1, keepdims=True)
    vectors = np.zeros((k, d))
    vectors[:, : k - 1] = coords
    logger.debug("Closed-form prototypes k=%d d=%d", k, d)
    return PrototypeSet(vectors, generator=CLOSED_FORM, tolerance=CLOSED_FORM_TOLERANCE)


def cosine_lr(base_lr: float, step: int, period: int) -> float:
    """Cosine annealing to zero: base_lr (1 + cos(pi step / period)) / 2"""
    return base_lr * (1.0 + math.cos(math.pi * step / period)) / 2.0


def _normalize_rows(matrix: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    norms = np.maximum(np.linalg.norm(matrix, axis=1, keepdims=True), _NORM_EPS)
    return matrix / norms, norms


def _normalized_softmax_grads(
    Z: np.ndarray, W: np.ndarray, scale: float, use_relu: bool
) -> Tuple[float, np.ndarray, np.ndarray]:
    """Loss and gradients of the scaled softmax loss with labels y_i = i"""
    k = W.shape[0]
    z = np.maximum(Z, 0.0) if use_relu else Z
    u, z_norms = _normalize_rows(z)
    v, w_norms = _normalize_rows(W)
    log_probs = log_softmax(scale * (u @ v.T), axis=1)
    loss = -float(np.mean(np.diag(log_probs)))

    grad_logits = (np.exp(log_probs) - np.eye(k)) / k
    grad_u = scale * grad_logits @ v
    grad_v = scale * grad_logits.T @ u
    grad_z = (grad_u - u * np.sum(grad_u * u, axis=1, keepdims=True)) / z_norms
    if use_relu:
        grad_z = grad_z * (Z > 0)
    grad_w = (grad_v - v * np.sum(grad_v * v, axis=1, keepdims=True)) / w_norms
    return loss, grad_z, grad_w


def generate_optimized(
    k: int, d: int, cfg: Optional[ProtoGenConfig] = None
) -> PrototypeSet:
    """
    Find equiangular prototypes by minimizing the balanced normalized softmax loss

    k surrogate features Z and k prototypes W are optimized jointly with
    labels y_i = i, both l2-normalized before the scaled linear classifier,
    using SGD with momentum, coupled weight decay and cosine annealing.
    Convergence is judged on the Gram deviation, checked every
    cfg.check_every epochs.

    Args:
        k: Number of classes
        d: Feature dimension
        cfg: Optimizer settings (defaults to ProtoGenConfig())

    Returns:
        PrototypeSet of unit rows within cfg.tolerance of equiangularity

    Raises:
        DimensionError: If k < 2 or k > d + 1
        ConvergenceError: If the deviation is above tolerance after cfg.epochs
    """
    cfg = cfg or ProtoGenConfig()
    cfg.validate()
    check_dimensions(k, d)

    rng = np.random.default_rng(cfg.seed)
    Z = rng.standard_normal((k, d))
    # Kaiming-normal init, fan_in = d
    W = rng.standard_normal((k, d)) * math.sqrt(2.0 / d)
    buf_z = np.zeros_like(Z)
    buf_w = np.zeros_like(W)

    deviation = math.inf
    for epoch in range(cfg.epochs):
        loss, grad_z, grad_w = _normalized_softmax_grads(Z, W, cfg.scale, cfg.use_relu)
        grad_z += cfg.weight_decay * Z
        grad_w += cfg.weight_decay * W
        if epoch == 0:
            buf_z, buf_w = grad_z, grad_w
        else:
            buf_z = cfg.momentum * buf_z + grad_z
            buf_w = cfg.momentum * buf_w + grad_w
        lr = cosine_lr(cfg.learning_rate, epoch, cfg.cosine_period)
        Z = Z - lr * buf_z
        W = W - lr * buf_w

        done = epoch + 1
        if done % cfg.log_every == 0:
            logger.info("protogen epoch %d loss %.6f lr %.3e", done, loss, lr)
        if done % cfg.check_every == 0 or done == cfg.epochs:
            deviation = gram_deviation(_normalize_rows(W)[0])
            if deviation <= cfg.tolerance:
                logger.info("protogen converged after %d epochs (dev %.3e)", done, deviation)
                break

    if deviation > cfg.tolerance:
        raise ConvergenceError(
            f"Prototype optimization stopped at {cfg.epochs} epochs with Gram "
            f"deviation {deviation:.3e} > tolerance {cfg.tolerance:.3e}",
            achieved_deviation=deviation,
            k=k,
            d=d,
        )

    vectors = _normalize_rows(W)[0]
    return PrototypeSet(vectors, generator=OPTIMIZED, seed=cfg.seed, tolerance=cfg.tolerance)


def verify_equiangular(protos: PrototypeLike, tol: float) -> EquiangularReport:
    """
    Check unit norms and pairwise inner products -1/(k-1)

    Args:
        protos: PrototypeSet or k x d matrix
        tol: Allowed deviation for both checks

    Returns:
        EquiangularReport; passed is true iff both deviations are within tol
    """
    matrix = as_matrix(protos)
    norms = np.linalg.norm(matrix, axis=1)
    max_norm_dev = float(np.max(np.abs(norms - 1.0)))
    max_gram_dev = gram_deviation(matrix)
    if np.any(norms == 0):
        angle = 0.0
    else:
        angle = min_angle_deg(matrix)
    return EquiangularReport(
        max_norm_dev=max_norm_dev,
        max_gram_dev=max_gram_dev,
        min_angle_deg=angle,
        tolerance=tol,
        passed=max_norm_dev <= tol and max_gram_dev <= tol,
    )


def _stem(path: Union[str, Path]) -> Path:
    path = Path(path)
    name = path.name
    for suffix in (".proto.json", ".proto.bin"):
        if name.endswith(suffix):
            return path.with_name(name[: -len(suffix)])
    return path


def save(protos: PrototypeSet, path: Union[str, Path]) -> Tuple[Path, Path]:
    """
    Write <stem>.proto.json and <stem>.proto.bin

    The blob holds k*d little-endian float64 values, row-major.
    """
    stem = _stem(path)
    stem.parent.mkdir(parents=True, exist_ok=True)
    json_path = stem.with_name(stem.name + ".proto.json")
    bin_path = stem.with_name(stem.name + ".proto.bin")
    json_path.write_text(json.dumps(protos.metadata(), indent=2, sort_keys=True) + "\n")
    bin_path.write_bytes(protos.vectors.astype("<f8").tobytes(order="C"))
    logger.info("Wrote prototypes to %s", json_path)
    return json_path, bin_path


def load(path: Union[str, Path]) -> PrototypeSet:
    """Read a prototype set written by save (either file of the pair may be given)"""
    stem = _stem(path)
    json_path = stem.with_name(stem.name + ".proto.json")
    bin_path = stem.with_name(stem.name + ".proto.bin")
    try:
        meta = json.loads(json_path.read_text())
        blob = bin_path.read_bytes()
    except OSError as e:
        raise FormatError(f"Cannot read prototype files at {stem}: {e}") from e
    except json.JSONDecodeError as e:
        raise FormatError(f"Invalid prototype header {json_path}: {e}", offset=e.pos) from e

    try:
        k, d = int(meta["k"]), int(meta["d"])
    except (KeyError, TypeError, ValueError) as e:
        raise FormatError(f"Prototype header {json_path} lacks k/d") from e
    if len(blob) != 8 * k * d:
        raise FormatError(
            f"Prototype blob {bin_path} has {len(blob)} bytes, expected {8 * k * d}",
            offset=min(len(blob), 8 * k * d),
        )
    vectors = np.frombuffer(blob, dtype="<f8").reshape(k, d)
    generator = meta.get("generator", CLOSED_FORM)
    if generator not in GENERATORS:
        raise FormatError(f"Unknown prototype generator '{generator}'")
    return PrototypeSet(
        vectors,
        generator=generator,
        seed=meta.get("seed"),
        tolerance=float(meta.get("tolerance", CLOSED_FORM_TOLERANCE)),
    )
