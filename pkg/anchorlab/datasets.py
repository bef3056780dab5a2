"""
Datasets
Synthetic Gaussian blobs, class imbalance, label noise, and IDX/CSV/bundle I/O
"""

import csv
import gzip
import json
import logging
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, BinaryIO, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from .errors import (
    ConfigError,
    CountError,
    EmptyClassError,
    FormatError,
    LabelError,
    MapError,
    RateError,
    ShapeError,
)

logger = logging.getLogger(__name__)

LONG_TAILED = "LongTailed"
STEP = "Step"
SYMMETRIC = "Symmetric"
ASYMMETRIC = "Asymmetric"

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801

# 7 -> 1, 2 -> 7, 5 <-> 6, 3 -> 8
MNIST_ASYMMETRIC_MAP: Tuple[Tuple[int, int], ...] = ((7, 1), (2, 7), (5, 6), (6, 5), (3, 8))
# truck -> automobile, bird -> airplane, deer -> horse, cat <-> dog
CIFAR10_ASYMMETRIC_MAP: Tuple[Tuple[int, int], ...] = ((9, 1), (2, 0), (4, 7), (3, 5), (5, 3))

ClassMap = Sequence[Tuple[int, int]]


def _jsonable(value: Any) -> Any:
    return json.loads(json.dumps(value))


def _readonly(array: np.ndarray) -> np.ndarray:
    array = np.ascontiguousarray(array)
    array.setflags(write=False)
    return array


def _reject_unknown(cls: Any, data: Dict[str, Any]) -> None:
    unknown = set(data) - set(cls.__dataclass_fields__)
    if unknown:
        raise ConfigError(f"Unknown {cls.__name__} fields: {sorted(unknown)}")


@dataclass(frozen=True, eq=False)
class LabeledDataset:
    """
    Feature vectors with observed labels and, when known, the clean labels

    provenance lists every transform applied, in order, as JSON-ready dicts.
    """

    features: np.ndarray
    labels: np.ndarray
    k: int
    clean_labels: Optional[np.ndarray] = None
    provenance: Tuple[Dict[str, Any], ...] = field(default_factory=tuple)

    def __post_init__(self) -> None:
        features = np.array(self.features, dtype=np.float64)
        labels = np.array(self.labels, dtype=np.int64)
        if features.ndim != 2:
            raise ShapeError(f"features must be n x m, got shape {features.shape}")
        if labels.shape != (features.shape[0],):
            raise ShapeError(f"expected {features.shape[0]} labels, got {labels.shape}")
        if self.k < 2:
            raise LabelError(f"need at least 2 classes, got k={self.k}")
        if labels.size and (labels.min() < 0 or labels.max() >= self.k):
            raise LabelError(f"labels must lie in [0, {self.k})")
        object.__setattr__(self, "features", _readonly(features))
        object.__setattr__(self, "labels", _readonly(labels))
        if self.clean_labels is not None:
            clean = np.array(self.clean_labels, dtype=np.int64)
            if clean.shape != labels.shape:
                raise ShapeError("clean_labels must have the same length as labels")
            if clean.size and (clean.min() < 0 or clean.max() >= self.k):
                raise LabelError(f"clean labels must lie in [0, {self.k})")
            object.__setattr__(self, "clean_labels", _readonly(clean))
        object.__setattr__(self, "provenance", tuple(_jsonable(list(self.provenance))))

    @property
    def n(self) -> int:
        return int(self.features.shape[0])

    @property
    def m(self) -> int:
        return int(self.features.shape[1])

    def class_counts(self) -> np.ndarray:
        """Observed-label count per class"""
        return np.bincount(self.labels, minlength=self.k)

    def subset(self, indices: np.ndarray, record: Dict[str, Any]) -> "LabeledDataset":
        clean = self.clean_labels[indices] if self.clean_labels is not None else None
        return LabeledDataset(
            features=self.features[indices],
            labels=self.labels[indices],
            k=self.k,
            clean_labels=clean,
            provenance=self.provenance + (record,),
        )

    def relabel(self, labels: np.ndarray, record: Dict[str, Any]) -> "LabeledDataset":
        clean = self.clean_labels if self.clean_labels is not None else self.labels
        return LabeledDataset(
            features=self.features,
            labels=labels,
            k=self.k,
            clean_labels=clean,
            provenance=self.provenance + (record,),
        )


@dataclass(frozen=True)
class BlobSpec:
    k: int = 10
    m: int = 16
    per_class: int = 100
    center_scale: float = 3.0
    noise_sigma: float = 1.0
    seed: int = 0

    def validate(self) -> None:
        if self.k < 2:
            raise ConfigError("blob k must be at least 2")
        if self.m < 1:
            raise ConfigError("blob dimension m must be at least 1")
        if self.per_class < 1:
            raise ConfigError("per_class must be at least 1")
        if self.center_scale <= 0:
            raise ConfigError("center_scale must be positive")
        if self.noise_sigma < 0:
            raise ConfigError("noise_sigma cannot be negative")

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "BlobSpec":
        _reject_unknown(cls, data)
        spec = cls(**data)
        spec.validate()
        return spec


@dataclass(frozen=True)
class ImbalanceSpec:
    kind: str = LONG_TAILED
    rho: float = 1.0
    minority_fraction: float = 0.5
    seed: int = 0

    def validate(self) -> None:
        if self.kind not in (LONG_TAILED, STEP):
            raise ConfigError(f"imbalance kind must be '{LONG_TAILED}' or '{STEP}'")
        if self.rho < 1:
            raise ConfigError("imbalance ratio rho must be >= 1")
        if not 0 < self.minority_fraction < 1:
            raise ConfigError("minority_fraction must lie in (0, 1)")

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "ImbalanceSpec":
        _reject_unknown(cls, data)
        spec = cls(**data)
        spec.validate()
        return spec


@dataclass(frozen=True)
class NoiseSpec:
    kind: str = SYMMETRIC
    eta: float = 0.0
    class_map: Optional[Tuple[Tuple[int, int], ...]] = None
    seed: int = 0

    def __post_init__(self) -> None:
        if self.class_map is not None:
            pairs = tuple((int(src), int(dst)) for src, dst in self.class_map)
            object.__setattr__(self, "class_map", pairs)

    def validate(self) -> None:
        if self.kind not in (SYMMETRIC, ASYMMETRIC):
            raise ConfigError(f"noise kind must be '{SYMMETRIC}' or '{ASYMMETRIC}'")
        if not 0 <= self.eta < 1:
            raise ConfigError("noise rate eta must lie in [0, 1)")
        if self.kind == ASYMMETRIC and not self.class_map:
            raise ConfigError("asymmetric noise needs a non-empty class_map")

    def to_dict(self) -> Dict[str, Any]:
        data = asdict(self)
        data["class_map"] = [list(p) for p in self.class_map] if self.class_map else None
        return data

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "NoiseSpec":
        _reject_unknown(cls, data)
        spec = cls(**data)
        spec.validate()
        return spec


def synth_blobs(spec: BlobSpec) -> LabeledDataset:
    """
    k isotropic Gaussian clusters with means on the sphere of radius center_scale

    Samples are ordered class by class; the result is a pure function of spec.
    """
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    means = rng.standard_normal((spec.k, spec.m))
    means *= spec.center_scale / np.linalg.norm(means, axis=1, keepdims=True)
    labels = np.repeat(np.arange(spec.k), spec.per_class)
    noise = rng.standard_normal((labels.size, spec.m))
    features = means[labels] + spec.noise_sigma * noise
    logger.debug("Synthesized %d blob samples (k=%d, m=%d)", labels.size, spec.k, spec.m)
    return LabeledDataset(
        features=features,
        labels=labels,
        k=spec.k,
        clean_labels=labels,
        provenance=({"op": "blobs", **spec.to_dict()},),
    )


def _round_half_up(value: float) -> int:
    return int(math.floor(value + 0.5))


def _subsample(
    d: LabeledDataset, targets: Sequence[int], seed: int, record: Dict[str, Any]
) -> LabeledDataset:
    counts = d.class_counts()
    for cls, target in enumerate(targets):
        if target < 1:
            raise EmptyClassError(
                f"class {cls} would keep {target} samples", cls=cls, counts=list(targets)
            )
        if target > counts[cls]:
            raise CountError(f"class {cls} has {counts[cls]} samples, cannot keep {target}")

    rng = np.random.default_rng(seed)
    keep: List[np.ndarray] = []
    for cls, target in enumerate(targets):
        members = np.flatnonzero(d.labels == cls)
        keep.append(rng.choice(members, size=target, replace=False))
    indices = np.sort(np.concatenate(keep))
    record = {**record, "seed": seed, "counts": [int(t) for t in targets]}
    return d.subset(indices, record)


def longtail_counts(n_max: int, k: int, rho: float) -> List[int]:
    """Exponential decay n_i = round(n_max * rho^(-i/(k-1)))"""
    return [_round_half_up(n_max * rho ** (-i / (k - 1))) for i in range(k)]


def step_counts(n_max: int, k: int, rho: float, minority_fraction: float = 0.5) -> List[int]:
    """The last ceil(fraction * k) classes keep n_max / rho samples"""
    minority = math.ceil(minority_fraction * k)
    tail = _round_half_up(n_max / rho)
    return [n_max] * (k - minority) + [tail] * minority


def apply_longtail(d: LabeledDataset, rho: float, seed: int = 0) -> LabeledDataset:
    """
    Long-tailed imbalance by exponential decay of class sizes

    Raises:
        ConfigError: If rho < 1
        EmptyClassError: If rounding leaves a class empty
    """
    if rho < 1:
        raise ConfigError("imbalance ratio rho must be >= 1")
    n_max = int(d.class_counts().max())
    targets = longtail_counts(n_max, d.k, rho)
    return _subsample(d, targets, seed, {"op": "imbalance", "kind": LONG_TAILED, "rho": rho})


def apply_step(
    d: LabeledDataset, rho: float, minority_fraction: float = 0.5, seed: int = 0
) -> LabeledDataset:
    """
    Step imbalance: majority classes keep n_max, minority classes n_max / rho

    Raises:
        ConfigError: If rho < 1 or the fraction is outside (0, 1)
        EmptyClassError: If rounding leaves a class empty
    """
    if rho < 1:
        raise ConfigError("imbalance ratio rho must be >= 1")
    if not 0 < minority_fraction < 1:
        raise ConfigError("minority_fraction must lie in (0, 1)")
    n_max = int(d.class_counts().max())
    targets = step_counts(n_max, d.k, rho, minority_fraction)
    record = {"op": "imbalance", "kind": STEP, "rho": rho, "minority_fraction": minority_fraction}
    return _subsample(d, targets, seed, record)


def apply_imbalance(d: LabeledDataset, spec: ImbalanceSpec) -> LabeledDataset:
    spec.validate()
    if spec.kind == LONG_TAILED:
        return apply_longtail(d, spec.rho, spec.seed)
    return apply_step(d, spec.rho, spec.minority_fraction, spec.seed)


def _check_rate(eta: float) -> None:
    if not 0 <= eta < 1:
        raise RateError(f"noise rate must lie in [0, 1), got {eta}")


def apply_symmetric_noise(d: LabeledDataset, eta: float, seed: int = 0) -> LabeledDataset:
    """
    Flip each label with probability eta to one of the k-1 other classes

    Raises:
        RateError: If eta is outside [0, 1)
    """
    _check_rate(eta)
    rng = np.random.default_rng(seed)
    flip = rng.random(d.n) < eta
    offsets = rng.integers(1, d.k, size=d.n)
    noisy = np.where(flip, (d.labels + offsets) % d.k, d.labels)
    logger.debug("Symmetric noise eta=%.3f flipped %d of %d labels", eta, flip.sum(), d.n)
    record = {"op": "noise", "kind": SYMMETRIC, "eta": eta, "seed": seed}
    return d.relabel(noisy, record)


def _check_class_map(class_map: ClassMap, k: int) -> Dict[int, int]:
    if not class_map:
        raise MapError("class_map must not be empty")
    mapping: Dict[int, int] = {}
    for src, dst in class_map:
        if not (0 <= src < k and 0 <= dst < k):
            raise MapError(f"class pair {src} -> {dst} outside [0, {k})")
        if src == dst:
            raise MapError(f"class {src} maps onto itself")
        if src in mapping and mapping[src] != dst:
            raise MapError(f"class {src} has two targets")
        mapping[src] = dst
    return mapping


def apply_asymmetric_noise(
    d: LabeledDataset, eta: float, class_map: ClassMap, seed: int = 0
) -> LabeledDataset:
    """
    Flip labels of mapped source classes to their target with probability eta

    Raises:
        RateError: If eta is outside [0, 1)
        MapError: On self-loops, conflicting or out-of-range pairs
    """
    _check_rate(eta)
    mapping = _check_class_map(class_map, d.k)
    lookup = np.arange(d.k)
    for src, dst in mapping.items():
        lookup[src] = dst
    rng = np.random.default_rng(seed)
    flip = (rng.random(d.n) < eta) & (lookup[d.labels] != d.labels)
    noisy = np.where(flip, lookup[d.labels], d.labels)
    record = {
        "op": "noise",
        "kind": ASYMMETRIC,
        "eta": eta,
        "class_map": [[src, dst] for src, dst in mapping.items()],
        "seed": seed,
    }
    return d.relabel(noisy, record)


def apply_noise(d: LabeledDataset, spec: NoiseSpec) -> LabeledDataset:
    spec.validate()
    if spec.kind == SYMMETRIC:
        return apply_symmetric_noise(d, spec.eta, spec.seed)
    return apply_asymmetric_noise(d, spec.eta, spec.class_map or (), spec.seed)


def imbalance_ratio(d: LabeledDataset) -> float:
    """
    Largest class count divided by the smallest

    Raises:
        EmptyClassError: If any class has no samples
    """
    counts = d.class_counts()
    if np.any(counts == 0):
        empty = int(np.flatnonzero(counts == 0)[0])
        raise EmptyClassError(f"class {empty} has no samples", cls=empty)
    return float(counts.max() / counts.min())


def transition_matrix(d: LabeledDataset) -> np.ndarray:
    """Row-normalized k x k matrix of P(observed = j | clean = i)"""
    if d.clean_labels is None:
        raise LabelError("dataset has no clean labels")
    counts = np.zeros((d.k, d.k))
    np.add.at(counts, (d.clean_labels, d.labels), 1.0)
    totals = counts.sum(axis=1, keepdims=True)
    return np.divide(counts, totals, out=np.zeros_like(counts), where=totals > 0)


def split(d: LabeledDataset, test_fraction: float, seed: int = 0) -> Tuple[LabeledDataset, LabeledDataset]:
    """Stratified split by observed label into (train, test)"""
    if not 0 < test_fraction < 1:
        raise ConfigError("test_fraction must lie in (0, 1)")
    rng = np.random.default_rng(seed)
    test_parts: List[np.ndarray] = []
    for cls in range(d.k):
        members = rng.permutation(np.flatnonzero(d.labels == cls))
        test_parts.append(members[: _round_half_up(test_fraction * members.size)])
    test_idx = np.sort(np.concatenate(test_parts))
    train_mask = np.ones(d.n, dtype=bool)
    train_mask[test_idx] = False
    record = {"op": "split", "test_fraction": test_fraction, "seed": seed}
    train = d.subset(np.flatnonzero(train_mask), {**record, "part": "train"})
    test = d.subset(test_idx, {**record, "part": "test"})
    return train, test


def _open_idx(path: Union[str, Path]) -> BinaryIO:
    path = Path(path)
    try:
        if path.suffix == ".gz":
            return gzip.open(path, "rb")  # type: ignore[return-value]
        return open(path, "rb")
    except OSError as e:
        raise FormatError(f"cannot open {path}: {e}", offset=0) from e


def _read_idx(path: Union[str, Path], magic: int, ndims: int) -> np.ndarray:
    with _open_idx(path) as fh:
        raw = fh.read()
    header_size = 4 + 4 * ndims
    if len(raw) < header_size:
        raise FormatError(f"{path}: truncated IDX header", offset=len(raw))
    found = struct.unpack(">I", raw[:4])[0]
    if found != magic:
        raise FormatError(f"{path}: bad magic 0x{found:08x}, expected 0x{magic:08x}", offset=0)
    dims = struct.unpack(">" + "I" * ndims, raw[4:header_size])
    expected = header_size + int(np.prod(dims))
    if len(raw) < expected:
        raise FormatError(
            f"{path}: {len(raw)} bytes, header declares {expected}", offset=len(raw)
        )
    if len(raw) > expected:
        raise FormatError(f"{path}: trailing bytes after declared data", offset=expected)
    return np.frombuffer(raw, dtype=np.uint8, offset=header_size).reshape(dims)


def load_idx(
    images_path: Union[str, Path], labels_path: Union[str, Path], k: Optional[int] = None
) -> LabeledDataset:
    """
    Read an IDX image/label pair (optionally gzipped)

    Pixels are scaled to [0, 1] and images flattened to rows*cols features.

    Raises:
        FormatError: With the byte offset of the problem
    """
    images = _read_idx(images_path, IDX_IMAGES_MAGIC, 3)
    labels = _read_idx(labels_path, IDX_LABELS_MAGIC, 1).astype(np.int64)
    if labels.shape[0] != images.shape[0]:
        raise FormatError(
            f"{labels_path}: {labels.shape[0]} labels for {images.shape[0]} images", offset=4
        )
    features = images.reshape(images.shape[0], -1).astype(np.float64) / 255.0
    classes = k if k is not None else max(int(labels.max(initial=0)) + 1, 2)
    logger.info("Loaded %d IDX images from %s", features.shape[0], images_path)
    return LabeledDataset(
        features=features,
        labels=labels,
        k=classes,
        clean_labels=labels,
        provenance=({"op": "load_idx", "images": str(images_path), "labels": str(labels_path)},),
    )


def load_csv(path: Union[str, Path], k: Optional[int] = None) -> LabeledDataset:
    """
    Read a CSV with a header row and a `label` column; other columns are features

    Raises:
        FormatError: With the 1-based line number of the problem
    """
    try:
        handle = open(path, newline="")
    except OSError as e:
        raise FormatError(f"cannot open {path}: {e}", line=0) from e
    with handle:
        reader = csv.reader(handle)
        header = next(reader, None)
        if not header:
            raise FormatError(f"{path}: missing header row", line=1)
        header = [name.strip() for name in header]
        if "label" not in header:
            raise FormatError(f"{path}: no 'label' column in header", line=1)
        label_col = header.index("label")
        rows: List[List[float]] = []
        labels: List[int] = []
        for row in reader:
            line = reader.line_num
            if not row:
                continue
            if len(row) != len(header):
                raise FormatError(
                    f"{path}:{line}: expected {len(header)} cells, got {len(row)}", line=line
                )
            try:
                label = int(row[label_col])
                values = [float(cell) for i, cell in enumerate(row) if i != label_col]
            except ValueError as e:
                raise FormatError(f"{path}:{line}: {e}", line=line) from e
            if label < 0:
                raise FormatError(f"{path}:{line}: negative label {label}", line=line)
            labels.append(label)
            rows.append(values)
    if not rows:
        raise FormatError(f"{path}: no data rows", line=2)
    label_array = np.asarray(labels, dtype=np.int64)
    classes = k if k is not None else max(int(label_array.max()) + 1, 2)
    return LabeledDataset(
        features=np.asarray(rows, dtype=np.float64),
        labels=label_array,
        k=classes,
        clean_labels=label_array,
        provenance=({"op": "load_csv", "path": str(path)},),
    )


def save_bundle(d: LabeledDataset, directory: Union[str, Path]) -> Path:
    """
    Write data.bin, labels.bin, clean_labels.bin (if known) and meta.json

    data.bin holds row-major little-endian float64 features; label files hold
    little-endian int32.
    """
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    (directory / "data.bin").write_bytes(d.features.astype("<f8").tobytes(order="C"))
    (directory / "labels.bin").write_bytes(d.labels.astype("<i4").tobytes())
    if d.clean_labels is not None:
        (directory / "clean_labels.bin").write_bytes(d.clean_labels.astype("<i4").tobytes())
    meta = {
        "n": d.n,
        "m": d.m,
        "k": d.k,
        "counts": d.class_counts().tolist(),
        "has_clean_labels": d.clean_labels is not None,
        "provenance": list(d.provenance),
    }
    (directory / "meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    logger.info("Wrote dataset bundle (%d samples) to %s", d.n, directory)
    return directory


def load_bundle(directory: Union[str, Path]) -> LabeledDataset:
    """Read a bundle written by save_bundle"""
    directory = Path(directory)
    try:
        meta = json.loads((directory / "meta.json").read_text())
    except OSError as e:
        raise FormatError(f"cannot read dataset bundle {directory}: {e}", offset=0) from e
    except json.JSONDecodeError as e:
        raise FormatError(f"invalid bundle metadata in {directory}: {e}", offset=e.pos) from e
    try:
        n, m, k = int(meta["n"]), int(meta["m"]), int(meta["k"])
        has_clean = bool(meta.get("has_clean_labels"))
        provenance = tuple(meta.get("provenance", []))
    except (KeyError, TypeError, ValueError, AttributeError) as e:
        raise FormatError(f"incomplete bundle metadata in {directory}: {e!r}", offset=0) from e
    try:
        data = (directory / "data.bin").read_bytes()
        label_bytes = (directory / "labels.bin").read_bytes()
        clean_bytes = (directory / "clean_labels.bin").read_bytes() if has_clean else None
    except OSError as e:
        raise FormatError(f"cannot read dataset bundle {directory}: {e}", offset=0) from e

    if len(data) != 8 * n * m:
        raise FormatError(f"{directory}/data.bin: expected {8 * n * m} bytes", offset=len(data))
    if len(label_bytes) != 4 * n:
        raise FormatError(f"{directory}/labels.bin: expected {4 * n} bytes", offset=len(label_bytes))
    features = np.frombuffer(data, dtype="<f8").reshape(n, m)
    labels = np.frombuffer(label_bytes, dtype="<i4")
    clean = np.frombuffer(clean_bytes, dtype="<i4") if clean_bytes is not None else None
    if clean is not None and clean.shape != labels.shape:
        raise FormatError(f"{directory}/clean_labels.bin: length mismatch", offset=len(clean_bytes or b""))
    return LabeledDataset(
        features=features,
        labels=labels,
        k=k,
        clean_labels=clean,
        provenance=provenance,
    )
