#!/usr/bin/env python3
"""
anchorlab CLI
Command-line interface for prototype generation, dataset synthesis,
training, analysis and the theory suite
"""

import argparse
import json
import logging
import sys
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import __version__
from .analysis import (
    DEFAULT_ECE_BINS,
    DEFAULT_NORM_BINS,
    ece,
    histogram_rows,
    min_prototype_angle,
    norm_stats,
    reliability_rows,
    sample_margins,
    write_rows,
)
from .config import configure_logging, dump_json, load_json, to_json
from .datasets import (
    ASYMMETRIC,
    CIFAR10_ASYMMETRIC_MAP,
    LONG_TAILED,
    MNIST_ASYMMETRIC_MAP,
    STEP,
    SYMMETRIC,
    BlobSpec,
    ImbalanceSpec,
    LabeledDataset,
    NoiseSpec,
    apply_imbalance,
    apply_noise,
    imbalance_ratio,
    load_bundle,
    save_bundle,
    split,
    synth_blobs,
)
from .errors import AnchorLabError, ConfigError, IncompatibleSpec
from .losses import (
    FOCAL,
    GCE,
    LDAM,
    MARGIN_SOFTMAX,
    VARIANTS,
    LossSpec,
    l2_normalize,
    ldam_margins,
    noise_aware_scale,
)
from .prototypes import (
    CLOSED_FORM,
    CLOSED_FORM_TOLERANCE,
    OPTIMIZED,
    PrototypeSet,
    ProtoGenConfig,
    generate_closed_form,
    generate_optimized,
    load,
    save,
    verify_equiangular,
)
from .trainer import (
    ACTIVATIONS,
    ANCHORED,
    DEFAULT_GROUP_THRESHOLDS,
    LEARNABLE,
    RELU,
    ModelConfig,
    OptimConfig,
    Trainer,
    evaluate_grouped,
    extract_features,
    load_checkpoint,
    metrics_to_csv,
    predict,
    save_checkpoint,
)
from .verify import GROUPS, SuiteOptions, format_table, run_suite

logger = logging.getLogger(__name__)

FROM_FILE = "file"
PROTOTYPE_SOURCES = (CLOSED_FORM, OPTIMIZED, FROM_FILE)
CLASS_MAPS = {"mnist": MNIST_ASYMMETRIC_MAP, "cifar10": CIFAR10_ASYMMETRIC_MAP}

# Component seeds are the master seed plus these offsets unless pinned in a config file
SEED_OFFSETS = {"blobs": 0, "imbalance": 1, "noise": 2, "optim": 3, "protogen": 4}
MODEL_SEED_OFFSET = 5
CLASSIFIER_SEED_OFFSET = 6
SPLIT_SEED_OFFSET = 7

DEFAULT_GCE_Q = 0.7
DEFAULT_FOCAL_GAMMA = 1.0

EXIT_OK = 0
EXIT_FAILED = 1
EXIT_IO = 3


@dataclass(frozen=True)
class AnalysisToggles:
    margins: bool = True
    calibration: bool = True
    norms: bool = True
    grouped: bool = True
    ece_bins: int = DEFAULT_ECE_BINS
    norm_bins: int = DEFAULT_NORM_BINS
    group_thresholds: Tuple[int, int] = DEFAULT_GROUP_THRESHOLDS

    def __post_init__(self) -> None:
        many_min, few_max = self.group_thresholds
        object.__setattr__(self, "group_thresholds", (int(many_min), int(few_max)))

    def to_dict(self) -> Dict[str, Any]:
        data = asdict(self)
        data["group_thresholds"] = list(self.group_thresholds)
        return data

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "AnalysisToggles":
        unknown = set(data) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"Unknown analysis fields: {sorted(unknown)}")
        return cls(**data)


@dataclass(frozen=True)
class RunConfig:
    """
    Everything one experiment needs: prototypes, data recipe or files,
    model, optimizer, loss, analysis toggles, output directory and seed
    """

    name: str = "anchorlab"
    seed: int = 0
    out: str = "out"
    prototype_source: str = CLOSED_FORM
    prototype_path: Optional[str] = None
    k: int = 10
    d: int = 16
    protogen: ProtoGenConfig = field(default_factory=ProtoGenConfig)
    blobs: BlobSpec = field(default_factory=BlobSpec)
    test_per_class: int = 100
    imbalance: Optional[ImbalanceSpec] = None
    noise: Optional[NoiseSpec] = None
    train_data: Optional[str] = None
    test_data: Optional[str] = None
    checkpoint: Optional[str] = None
    hidden_dims: Tuple[int, ...] = (128, 128)
    activation: str = RELU
    anchored: bool = True
    optim: OptimConfig = field(default_factory=OptimConfig)
    loss: Dict[str, Any] = field(
        default_factory=lambda: {"variant": "Softmax", "feature_normalize": True}
    )
    ldam_constant: float = 0.5
    noise_aware: bool = False
    analysis: AnalysisToggles = field(default_factory=AnalysisToggles)

    def validate(self) -> None:
        if self.prototype_source not in PROTOTYPE_SOURCES:
            raise ConfigError(f"prototype source must be one of {PROTOTYPE_SOURCES}")
        if self.prototype_source == FROM_FILE and not self.prototype_path:
            raise ConfigError("prototype source 'file' needs prototype_path")
        if self.activation not in ACTIVATIONS:
            raise ConfigError(f"activation must be one of {ACTIVATIONS}")
        if self.test_per_class < 0:
            raise ConfigError("test_per_class cannot be negative")
        if self.loss.get("variant") not in VARIANTS:
            raise ConfigError(f"loss variant must be one of {VARIANTS}")
        self.blobs.validate()
        self.optim.validate()
        self.protogen.validate()
        if self.imbalance is not None:
            self.imbalance.validate()
        if self.noise is not None:
            self.noise.validate()

    def with_seed(self, seed: int) -> "RunConfig":
        """Re-derive every component seed from a new master seed"""
        return replace(
            self,
            seed=seed,
            blobs=replace(self.blobs, seed=seed + SEED_OFFSETS["blobs"]),
            imbalance=(
                replace(self.imbalance, seed=seed + SEED_OFFSETS["imbalance"])
                if self.imbalance
                else None
            ),
            noise=replace(self.noise, seed=seed + SEED_OFFSETS["noise"]) if self.noise else None,
            optim=replace(self.optim, seed=seed + SEED_OFFSETS["optim"]),
            protogen=replace(self.protogen, seed=seed + SEED_OFFSETS["protogen"]),
        )

    def to_dict(self) -> Dict[str, Any]:
        return {
            "name": self.name,
            "seed": self.seed,
            "out": self.out,
            "prototype_source": self.prototype_source,
            "prototype_path": self.prototype_path,
            "k": self.k,
            "d": self.d,
            "protogen": self.protogen.to_dict(),
            "blobs": self.blobs.to_dict(),
            "test_per_class": self.test_per_class,
            "imbalance": self.imbalance.to_dict() if self.imbalance else None,
            "noise": self.noise.to_dict() if self.noise else None,
            "train_data": self.train_data,
            "test_data": self.test_data,
            "checkpoint": self.checkpoint,
            "hidden_dims": list(self.hidden_dims),
            "activation": self.activation,
            "anchored": self.anchored,
            "optim": self.optim.to_dict(),
            "loss": dict(self.loss),
            "ldam_constant": self.ldam_constant,
            "noise_aware": self.noise_aware,
            "analysis": self.analysis.to_dict(),
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "RunConfig":
        unknown = set(data) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"Unknown RunConfig fields: {sorted(unknown)}")
        master = int(data.get("seed", 0))

        def component(key: str, builder: Any) -> Any:
            raw = data.get(key)
            if raw is None:
                return None
            raw = dict(raw)
            raw.setdefault("seed", master + SEED_OFFSETS[key])
            return builder.from_dict(raw)

        fields = dict(data)
        fields["seed"] = master
        fields["blobs"] = component("blobs", BlobSpec) or BlobSpec(seed=master)
        fields["optim"] = component("optim", OptimConfig) or OptimConfig(
            seed=master + SEED_OFFSETS["optim"]
        )
        fields["protogen"] = component("protogen", ProtoGenConfig) or ProtoGenConfig(
            seed=master + SEED_OFFSETS["protogen"]
        )
        fields["imbalance"] = component("imbalance", ImbalanceSpec)
        fields["noise"] = component("noise", NoiseSpec)
        if "analysis" in data:
            fields["analysis"] = AnalysisToggles.from_dict(data["analysis"] or {})
        if "hidden_dims" in data:
            fields["hidden_dims"] = tuple(int(h) for h in data["hidden_dims"])
        try:
            cfg = cls(**fields)
        except TypeError as e:
            raise ConfigError(f"invalid run config: {e}") from e
        cfg.validate()
        return cfg


def _add_common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--seed", type=int, default=None, help="Master seed")
    parser.add_argument("--out", default=None, help="Output directory")
    parser.add_argument("--config", default=None, help="RunConfig JSON file")
    parser.add_argument("--json", action="store_true", help="Print machine-readable JSON")
    parser.add_argument("--verbose", "-v", action="store_true", help="Debug logging")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    _add_common(common)

    parser = argparse.ArgumentParser(
        prog="anchorlab",
        description="Anchored simplex prototypes: generation, training and theory checks",
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    protogen = sub.add_parser("protogen", parents=[common], help="Generate and verify prototypes")
    protogen.add_argument("--k", type=int, default=None, help="Number of classes")
    protogen.add_argument("--d", type=int, default=None, help="Feature dimension")
    protogen.add_argument("--mode", choices=PROTOTYPE_SOURCES, default=None)
    protogen.add_argument("--path", default=None, help="Prototype file for --mode file")
    protogen.add_argument("--tolerance", type=float, default=None)
    protogen.add_argument("--epochs", type=int, default=None, help="Optimizer epochs")
    protogen.set_defaults(handler=cmd_protogen)

    synth = sub.add_parser("synth", parents=[common], help="Build a synthetic dataset bundle")
    synth.add_argument("--k", type=int, default=None)
    synth.add_argument("--m", type=int, default=None, help="Input dimension")
    synth.add_argument("--n-max", type=int, default=None, help="Training samples per class")
    synth.add_argument("--test-per-class", type=int, default=None)
    synth.add_argument("--imbalance", choices=(LONG_TAILED, STEP), default=None)
    synth.add_argument("--rho", type=float, default=None)
    synth.add_argument("--minority-fraction", type=float, default=None)
    synth.add_argument("--noise", choices=(SYMMETRIC, ASYMMETRIC), default=None)
    synth.add_argument("--eta", type=float, default=None)
    synth.add_argument("--class-map", choices=sorted(CLASS_MAPS), default=None)
    synth.set_defaults(handler=cmd_synth)

    train = sub.add_parser("train", parents=[common], help="Train and write metrics")
    _add_data_flags(train)
    train.add_argument("--epochs", type=int, default=None)
    train.add_argument("--lr", type=float, default=None)
    train.add_argument("--batch-size", type=int, default=None)
    train.add_argument("--weight-decay", type=float, default=None)
    train.add_argument("--no-cosine", action="store_true", help="Constant learning rate")
    train.add_argument("--loss", choices=VARIANTS, default=None)
    train.add_argument("--scale", type=float, default=None)
    train.add_argument("--q", type=float, default=None, help="GCE exponent")
    train.add_argument("--gamma", type=float, default=None, help="Focal exponent")
    train.add_argument("--noise-aware", action="store_true", help="Scale from the noise rate")
    train.add_argument("--normalize", dest="normalize", action="store_true", default=None)
    train.add_argument("--no-normalize", dest="normalize", action="store_false")
    train.add_argument("--classifier", choices=(ANCHORED, LEARNABLE), default=None)
    train.add_argument("--mode", choices=PROTOTYPE_SOURCES, default=None)
    train.add_argument("--prototypes", default=None, help="Prototype file (implies --mode file)")
    train.add_argument("--hidden", type=int, nargs="*", default=None, help="Hidden widths")
    train.add_argument("--feature-dim", type=int, default=None)
    train.add_argument("--activation", choices=ACTIVATIONS, default=None)
    _add_group_flags(train)
    train.set_defaults(handler=cmd_train)

    analyze = sub.add_parser("analyze", parents=[common], help="Analyze a checkpoint")
    analyze.add_argument("--checkpoint", default=None, help="Checkpoint path (without suffix)")
    _add_data_flags(analyze)
    _add_group_flags(analyze)
    analyze.add_argument("--ece-bins", type=int, default=None)
    analyze.set_defaults(handler=cmd_analyze)

    verify = sub.add_parser("verify", parents=[common], help="Run the theory suite")
    verify.add_argument("--prototype-file", action="append", default=[], help="Extra set to check")
    verify.add_argument("--groups", nargs="*", choices=GROUPS, default=None)
    verify.add_argument("--samples", type=int, default=None, help="Lipschitz samples")
    verify.add_argument("--grad-instances", type=int, default=None)
    verify.add_argument("--skip-optimized", action="store_true")
    verify.set_defaults(handler=cmd_verify)
    return parser


def _add_data_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--train-data", default=None, help="Training bundle directory")
    parser.add_argument("--test-data", default=None, help="Evaluation bundle directory")


def _add_group_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--many-min", type=int, default=None, help="Many: count above this")
    parser.add_argument("--few-max", type=int, default=None, help="Few: count below this")


def _load_config(args: argparse.Namespace) -> RunConfig:
    cfg = RunConfig.from_dict(load_json(args.config)) if args.config else RunConfig()
    if args.seed is not None:
        cfg = cfg.with_seed(args.seed)
    if args.out is not None:
        cfg = replace(cfg, out=args.out)
    many_min = getattr(args, "many_min", None)
    few_max = getattr(args, "few_max", None)
    if many_min is not None or few_max is not None:
        current = cfg.analysis.group_thresholds
        thresholds = (
            many_min if many_min is not None else current[0],
            few_max if few_max is not None else current[1],
        )
        cfg = replace(cfg, analysis=replace(cfg.analysis, group_thresholds=thresholds))
    if getattr(args, "train_data", None):
        cfg = replace(cfg, train_data=args.train_data)
    if getattr(args, "test_data", None):
        cfg = replace(cfg, test_data=args.test_data)
    return cfg


def _emit(args: argparse.Namespace, payload: Dict[str, Any], text: str) -> None:
    if args.json:
        print(to_json(payload), end="")
    else:
        print(text)


def _finish(cfg: RunConfig, subdir: Optional[str] = None) -> Path:
    """Validate, create the output directory and write resolved_config.json"""
    out = Path(cfg.out) / subdir if subdir else Path(cfg.out)
    cfg.validate()
    dump_json(cfg.to_dict(), out / "resolved_config.json")
    return out


def resolve_prototypes(cfg: RunConfig, k: int, d: int) -> PrototypeSet:
    """Build or load the prototype set the run config asks for"""
    if cfg.prototype_source == CLOSED_FORM:
        return generate_closed_form(k, d)
    if cfg.prototype_source == OPTIMIZED:
        return generate_optimized(k, d, cfg.protogen)
    if not cfg.prototype_path:
        raise ConfigError("prototype source 'file' needs a prototype path")
    protos = load(cfg.prototype_path)
    if (protos.k, protos.d) != (k, d):
        raise IncompatibleSpec(
            f"prototype file has k={protos.k}, d={protos.d}; run needs k={k}, d={d}"
        )
    return protos


def synthesize(cfg: RunConfig) -> Tuple[LabeledDataset, Optional[LabeledDataset]]:
    """
    Blobs recipe to (train, clean test)

    The balanced blobs are split first, so the test set stays balanced and
    clean; imbalance then noise are applied to the training part only.
    """
    n_max = cfg.blobs.per_class
    blobs = synth_blobs(replace(cfg.blobs, per_class=n_max + cfg.test_per_class))
    if cfg.test_per_class:
        fraction = cfg.test_per_class / (n_max + cfg.test_per_class)
        train, test = split(blobs, fraction, cfg.seed + SPLIT_SEED_OFFSET)
    else:
        train, test = blobs, None
    if cfg.imbalance is not None:
        train = apply_imbalance(train, cfg.imbalance)
    if cfg.noise is not None:
        train = apply_noise(train, cfg.noise)
    return train, test


def _noise_rate(cfg: RunConfig, dataset: LabeledDataset) -> float:
    if cfg.noise is not None:
        return cfg.noise.eta
    for record in dataset.provenance:
        if record.get("op") == "noise":
            return float(record["eta"])
    return 0.0


def resolve_loss(cfg: RunConfig, train: LabeledDataset) -> LossSpec:
    """
    Materialize the loss spec for a training set

    LDAM margins default to ldam_margins(train counts, ldam_constant); with
    noise_aware the scale comes from noise_aware_scale of the noise rate.
    """
    data = dict(cfg.loss)
    data.setdefault("anchored", cfg.anchored)
    if data["variant"] == GCE:
        data.setdefault("q", DEFAULT_GCE_Q)
    if data["variant"] == FOCAL:
        data.setdefault("focal_gamma", DEFAULT_FOCAL_GAMMA)
    if data["variant"] == LDAM and data.get("margins") is None:
        data["margins"] = ldam_margins(train.class_counts(), cfg.ldam_constant).tolist()
    if data["variant"] == MARGIN_SOFTMAX and data.get("margins") is None:
        raise ConfigError("MarginSoftmax needs explicit margins in the loss config")
    if cfg.noise_aware:
        data["scale"] = noise_aware_scale(_noise_rate(cfg, train))
    return LossSpec.from_dict(data)


def cmd_protogen(args: argparse.Namespace) -> int:
    cfg = _load_config(args)
    protogen = cfg.protogen
    if args.tolerance is not None:
        protogen = replace(protogen, tolerance=args.tolerance)
    if args.epochs is not None:
        protogen = replace(protogen, epochs=args.epochs)
    cfg = replace(
        cfg,
        k=args.k if args.k is not None else cfg.k,
        d=args.d if args.d is not None else cfg.d,
        prototype_source=args.mode or cfg.prototype_source,
        prototype_path=args.path or cfg.prototype_path,
        protogen=protogen,
    )
    cfg.validate()

    protos = resolve_prototypes(cfg, cfg.k, cfg.d)
    if cfg.prototype_source == CLOSED_FORM:
        tolerance = args.tolerance if args.tolerance is not None else CLOSED_FORM_TOLERANCE
    elif cfg.prototype_source == OPTIMIZED:
        tolerance = cfg.protogen.tolerance
    else:
        tolerance = args.tolerance if args.tolerance is not None else protos.tolerance
    report = verify_equiangular(protos, tolerance)

    out = _finish(cfg)
    json_path, bin_path = save(protos, out / "prototypes")
    payload = {**report.to_dict(), "k": protos.k, "d": protos.d, "files": [str(json_path), str(bin_path)]}
    dump_json(payload, out / "verification.json")
    text = f"""
Prototype Verification
======================
Classes (k):       {protos.k}
Dimension (d):     {protos.d}
Generator:         {protos.generator}
Max Norm Dev:      {report.max_norm_dev:.3e}
Max Gram Dev:      {report.max_gram_dev:.3e}
Min Angle:         {report.min_angle_deg:.4f} deg
Tolerance:         {tolerance:.1e}
Result:            {'PASS' if report.passed else 'FAIL'}
Files:             {json_path}, {bin_path}
"""
    _emit(args, payload, text)
    return EXIT_OK if report.passed else EXIT_FAILED


def cmd_synth(args: argparse.Namespace) -> int:
    cfg = _load_config(args)
    blobs = cfg.blobs
    if args.k is not None:
        blobs = replace(blobs, k=args.k)
    if args.m is not None:
        blobs = replace(blobs, m=args.m)
    if args.n_max is not None:
        blobs = replace(blobs, per_class=args.n_max)
    imbalance = cfg.imbalance
    if args.imbalance or args.rho is not None or args.minority_fraction is not None:
        imbalance = imbalance or ImbalanceSpec(seed=cfg.seed + SEED_OFFSETS["imbalance"])
        imbalance = replace(
            imbalance,
            kind=args.imbalance or imbalance.kind,
            rho=args.rho if args.rho is not None else imbalance.rho,
            minority_fraction=(
                args.minority_fraction
                if args.minority_fraction is not None
                else imbalance.minority_fraction
            ),
        )
    noise = cfg.noise
    if args.noise or args.eta is not None or args.class_map:
        noise = noise or NoiseSpec(seed=cfg.seed + SEED_OFFSETS["noise"])
        noise = replace(
            noise,
            kind=args.noise or (ASYMMETRIC if args.class_map else noise.kind),
            eta=args.eta if args.eta is not None else noise.eta,
            class_map=CLASS_MAPS[args.class_map] if args.class_map else noise.class_map,
        )
    cfg = replace(
        cfg,
        blobs=blobs,
        imbalance=imbalance,
        noise=noise,
        test_per_class=args.test_per_class if args.test_per_class is not None else cfg.test_per_class,
    )
    cfg.validate()

    train, test = synthesize(cfg)
    out = _finish(cfg)
    save_bundle(train, out / "train")
    if test is not None:
        save_bundle(test, out / "test")
    counts = train.class_counts()
    write_rows([{"class": c, "count": int(n)} for c, n in enumerate(counts)], out / "counts.csv")

    flipped = (
        float(np.mean(train.labels != train.clean_labels)) if train.clean_labels is not None else 0.0
    )
    payload = {
        "kind": "synth",
        "n_train": train.n,
        "n_test": test.n if test is not None else 0,
        "k": train.k,
        "m": train.m,
        "counts": counts.tolist(),
        "imbalance_ratio": imbalance_ratio(train),
        "observed_noise_rate": flipped,
    }
    dump_json(payload, out / "synth.json")
    text = f"""
Dataset Summary
===============
Training Samples:  {train.n}
Test Samples:      {payload['n_test']}
Classes (k):       {train.k}
Input Dim (m):     {train.m}
Imbalance Ratio:   {payload['imbalance_ratio']:.2f}
Flipped Labels:    {flipped:.2%}
Output:            {out}
"""
    _emit(args, payload, text)
    return EXIT_OK


def _load_datasets(cfg: RunConfig) -> Tuple[LabeledDataset, Optional[LabeledDataset]]:
    if cfg.train_data:
        train = load_bundle(cfg.train_data)
        test = load_bundle(cfg.test_data) if cfg.test_data else None
        return train, test
    train, test = synthesize(cfg)
    if cfg.test_data:
        test = load_bundle(cfg.test_data)
    return train, test


def cmd_train(args: argparse.Namespace) -> int:
    cfg = _load_config(args)
    optim = cfg.optim
    for flag, name in (
        ("epochs", "epochs"),
        ("lr", "learning_rate"),
        ("batch_size", "batch_size"),
        ("weight_decay", "weight_decay"),
    ):
        value = getattr(args, flag)
        if value is not None:
            optim = replace(optim, **{name: value})
    if args.no_cosine:
        optim = replace(optim, cosine_annealing=False)

    loss = dict(cfg.loss)
    if args.loss and args.loss != loss.get("variant"):
        for key in ("margins", "q", "focal_gamma"):
            loss.pop(key, None)
        loss["variant"] = args.loss
    if args.scale is not None:
        loss["scale"] = args.scale
    if args.q is not None:
        loss["q"] = args.q
    if args.gamma is not None:
        loss["focal_gamma"] = args.gamma
    if args.normalize is not None:
        loss["feature_normalize"] = args.normalize

    anchored = cfg.anchored if args.classifier is None else args.classifier == ANCHORED
    if args.classifier is not None:
        loss.pop("anchored", None)
    source = FROM_FILE if args.prototypes else (args.mode or cfg.prototype_source)
    cfg = replace(
        cfg,
        optim=optim,
        loss=loss,
        anchored=anchored,
        noise_aware=cfg.noise_aware or args.noise_aware,
        prototype_source=source,
        prototype_path=args.prototypes or cfg.prototype_path,
        hidden_dims=tuple(args.hidden) if args.hidden is not None else cfg.hidden_dims,
        d=args.feature_dim if args.feature_dim is not None else cfg.d,
        activation=args.activation or cfg.activation,
    )
    cfg.validate()

    train, test = _load_datasets(cfg)
    spec = resolve_loss(cfg, train)
    cfg = replace(cfg, loss=spec.to_dict())
    protos = resolve_prototypes(cfg, train.k, cfg.d) if cfg.anchored else None
    model_cfg = ModelConfig(
        input_dim=train.m,
        feature_dim=cfg.d,
        num_classes=train.k,
        hidden_dims=cfg.hidden_dims,
        activation=cfg.activation,
        classifier=ANCHORED if cfg.anchored else LEARNABLE,
        prototypes=protos,
        classifier_seed=cfg.seed + CLASSIFIER_SEED_OFFSET,
    )

    out = _finish(cfg)
    trainer = Trainer(model_cfg, cfg.optim, spec, seed=cfg.seed + MODEL_SEED_OFFSET)
    results = trainer.fit(train, test)
    metrics_to_csv(trainer.history, out / "metrics.csv")
    save_checkpoint(trainer.state, out / "model", trainer.configs())
    if protos is not None:
        save(protos, out / "prototypes")

    summary: Dict[str, Any] = {"kind": "train", "name": cfg.name, "results": results, "loss": spec.to_dict()}
    if cfg.analysis.grouped:
        grouped = evaluate_grouped(
            trainer.state,
            test if test is not None else train,
            spec,
            cfg.analysis.group_thresholds,
            train_counts=train.class_counts(),
        )
        summary["grouped"] = grouped.to_dict()
    dump_json(summary, out / "summary.json")

    if args.json:
        _emit(args, summary, "")
    else:
        print(trainer.get_summary())
        if args.verbose:
            trainer.print_epoch_breakdown()
        if "grouped" in summary:
            g = summary["grouped"]
            print(
                f"Many/Medium/Few:   {g['many_acc']:.4f} / {g['medium_acc']:.4f} / {g['few_acc']:.4f}"
                f" (thresholds {g['thresholds']['many_min']}, {g['thresholds']['few_max']})"
            )
    return EXIT_OK


def cmd_analyze(args: argparse.Namespace) -> int:
    cfg = _load_config(args)
    checkpoint = args.checkpoint or cfg.checkpoint or str(Path(cfg.out) / "model")
    ece_bins = args.ece_bins if args.ece_bins is not None else cfg.analysis.ece_bins
    cfg = replace(cfg, checkpoint=checkpoint, analysis=replace(cfg.analysis, ece_bins=ece_bins))
    cfg.validate()

    state, configs = load_checkpoint(checkpoint)
    if "loss" not in configs:
        raise ConfigError(f"checkpoint {checkpoint} does not record its loss spec")
    spec = LossSpec.from_dict(configs["loss"])
    if cfg.test_data:
        dataset = load_bundle(cfg.test_data)
    elif cfg.train_data:
        dataset = load_bundle(cfg.train_data)
    else:
        raise ConfigError("analyze needs --test-data or --train-data")
    labels = dataset.clean_labels if dataset.clean_labels is not None else dataset.labels

    out = _finish(cfg, "analysis")
    features = extract_features(state, dataset.features)
    _, probs = predict(state, dataset.features, spec)
    payload: Dict[str, Any] = {"kind": "analysis", "checkpoint": checkpoint, "n": dataset.n}
    lines: List[str] = ["", "Analysis", "========"]

    if cfg.analysis.margins:
        unit = l2_normalize(features)[0] if spec.feature_normalize else features
        W = l2_normalize(state.classifier, "prototype")[0] if spec.prototype_normalize else state.classifier
        margins = sample_margins(unit, labels, W, spec.scale)
        payload["margins"] = margins.to_dict()
        write_rows(
            [
                {"sample": i, "label": int(y), "margin": float(m)}
                for i, (y, m) in enumerate(zip(labels, margins.per_sample))
            ],
            out / "margins.csv",
        )
        lines.append(f"Min Sample Margin: {margins.min_margin:.4f}")
    if cfg.analysis.calibration:
        calibration = ece(probs, labels, cfg.analysis.ece_bins)
        payload["calibration"] = calibration.to_dict()
        write_rows(reliability_rows(calibration), out / "reliability.csv")
        lines.append(f"ECE:               {calibration.ece:.4f}")
    if cfg.analysis.norms:
        stats = norm_stats(state.classifier, features, cfg.analysis.norm_bins)
        stats.extra["min_prototype_angle_deg"] = min_prototype_angle(state.classifier)
        payload["norms"] = stats.to_dict()
        write_rows(histogram_rows(stats), out / "feature_norms.csv")
        lines.append(f"Mean Feature Norm: {stats.mean_feature_norm:.4f}")
        lines.append(f"Min Proto Angle:   {stats.extra['min_prototype_angle_deg']:.2f} deg")
    if cfg.analysis.grouped and state.train_class_counts is not None:
        grouped = evaluate_grouped(state, dataset, spec, cfg.analysis.group_thresholds)
        payload["grouped"] = grouped.to_dict()
        lines.append(
            f"Many/Medium/Few:   {grouped.many_acc:.4f} / {grouped.medium_acc:.4f} / {grouped.few_acc:.4f}"
        )
    dump_json(payload, out / "analysis.json")
    _emit(args, payload, "\n".join(lines))
    return EXIT_OK


def cmd_verify(args: argparse.Namespace) -> int:
    cfg = _load_config(args)
    options = SuiteOptions(seed=cfg.seed)
    if args.samples is not None:
        options = replace(options, lipschitz_samples=args.samples)
    if args.grad_instances is not None:
        options = replace(options, grad_instances=args.grad_instances)
    if args.skip_optimized:
        options = replace(options, optimized_grid=())
    if args.groups:
        options = replace(options, groups=tuple(args.groups))
    if args.prototype_file:
        options = replace(options, prototype_files=tuple(load(p) for p in args.prototype_file))

    out = _finish(cfg)
    results = run_suite(options)
    passed = all(r.passed for r in results)
    payload = {"kind": "verify", "pass": passed, "checks": [r.to_dict() for r in results]}
    dump_json(payload, out / "verify.json")
    _emit(args, payload, format_table(results))
    return EXIT_OK if passed else EXIT_FAILED


def main(argv: Optional[Sequence[str]] = None) -> int:
    """Main function to run the anchorlab command line"""
    parser = build_parser()
    args = parser.parse_args(argv)
    configure_logging(args.verbose)

    try:
        return int(args.handler(args))
    except AnchorLabError as e:
        logger.debug("%s failed", args.command, exc_info=True)
        print(json.dumps(e.to_dict(), sort_keys=True, default=str), file=sys.stderr)
        return e.exit_code
    except OSError as e:
        print(json.dumps({"error": "IOError", "message": str(e)}, sort_keys=True), file=sys.stderr)
        return EXIT_IO
    except KeyboardInterrupt:
        print("\nCancelled.", file=sys.stderr)
        return 130
    except Exception as e:
        logger.debug("%s failed", args.command, exc_info=True)
        print(json.dumps({"error": type(e).__name__, "message": str(e)}, sort_keys=True), file=sys.stderr)
        return EXIT_FAILED


if __name__ == "__main__":
    sys.exit(main())
