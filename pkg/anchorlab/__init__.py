"""
anchorlab

Anchored simplex prototypes for classification: equiangular prototype
generation, prototype-anchored losses, a small from-scratch trainer and the
margin, calibration, Lipschitz and risk-bound analyses that go with them.

Example usage:
    >>> from anchorlab import generate_closed_form, LossSpec, evaluate
    >>> protos = generate_closed_form(k=10, d=16)
    >>> spec = LossSpec("Softmax", scale=4.0, feature_normalize=True, anchored=True)
    >>> out = evaluate(spec, features, labels, protos)
    >>> print(f"loss: {out.loss:.4f}")
"""

from .analysis import (
    ece,
    empirical_lipschitz,
    ldam_bayes_threshold,
    ldam_conditional_risk,
    lipschitz_pal,
    lipschitz_unanchored_lower_bounds,
    min_prototype_angle,
    norm_stats,
    risk_bound_ce,
    risk_bound_general,
    sample_margins,
)
from .datasets import (
    BlobSpec,
    ImbalanceSpec,
    LabeledDataset,
    NoiseSpec,
    apply_asymmetric_noise,
    apply_longtail,
    apply_step,
    apply_symmetric_noise,
    imbalance_ratio,
    load_bundle,
    load_csv,
    load_idx,
    save_bundle,
    synth_blobs,
    transition_matrix,
)
from .errors import AnchorLabError
from .losses import (
    LossSpec,
    evaluate,
    grad_check,
    ldam_margins,
    loss_symmetry_sum,
    noise_aware_scale,
)
from .prototypes import (
    PrototypeSet,
    ProtoGenConfig,
    generate_closed_form,
    generate_optimized,
    verify_equiangular,
)
from .trainer import (
    ModelConfig,
    OptimConfig,
    Trainer,
    evaluate_grouped,
    extract_features,
    init_model,
    predict,
    train,
)

__version__ = "0.1.0"
__author__ = "anchorlab developers"

__all__ = [
    "AnchorLabError",
    "BlobSpec",
    "ImbalanceSpec",
    "LabeledDataset",
    "LossSpec",
    "ModelConfig",
    "NoiseSpec",
    "OptimConfig",
    "ProtoGenConfig",
    "PrototypeSet",
    "Trainer",
    "apply_asymmetric_noise",
    "apply_longtail",
    "apply_step",
    "apply_symmetric_noise",
    "ece",
    "empirical_lipschitz",
    "evaluate",
    "evaluate_grouped",
    "extract_features",
    "generate_closed_form",
    "generate_optimized",
    "grad_check",
    "imbalance_ratio",
    "init_model",
    "ldam_bayes_threshold",
    "ldam_conditional_risk",
    "ldam_margins",
    "lipschitz_pal",
    "lipschitz_unanchored_lower_bounds",
    "load_bundle",
    "load_csv",
    "load_idx",
    "loss_symmetry_sum",
    "min_prototype_angle",
    "noise_aware_scale",
    "norm_stats",
    "predict",
    "risk_bound_ce",
    "risk_bound_general",
    "sample_margins",
    "save_bundle",
    "synth_blobs",
    "train",
    "transition_matrix",
    "verify_equiangular",
]
