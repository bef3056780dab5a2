"""
Theory suite
Numerical checks of the prototype, loss and bound properties, run by
`anchorlab verify`
"""

import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from .analysis import (
    empirical_lipschitz,
    ldam_bayes_threshold,
    ldam_conditional_risk,
    lipschitz_pal,
    lipschitz_unanchored_lower_bounds,
    risk_bound_ce,
    risk_bound_general,
)
from .datasets import LabeledDataset, apply_symmetric_noise, transition_matrix
from .errors import AnchorLabError
from .losses import (
    FOCAL,
    GCE,
    LDAM,
    MARGIN_SOFTMAX,
    NSL,
    SOFTMAX,
    LossSpec,
    grad_check,
    loss_symmetry_sum,
)
from .prototypes import (
    PrototypeSet,
    ProtoGenConfig,
    generate_closed_form,
    generate_optimized,
    gram_matrix,
    verify_equiangular,
)

logger = logging.getLogger(__name__)

EQUIANGULAR_GRID: Tuple[Tuple[int, int], ...] = (
    (2, 2),
    (3, 2),
    (4, 8),
    (10, 9),
    (10, 64),
    (64, 100),
)
LIPSCHITZ_RADII = (0.5, 1.0, 2.0)
TIGHTNESS_CLASSES = (2, 3, 10, 64)
TIGHTNESS_RADII = (0.1, 1.0, 10.0)
BOUND_RATES = (0.0, 0.1, 0.3)
NOISE_RATES = (0.2, 0.6, 0.8)
LDAM_MARGIN_PAIRS = ((0.0, 1.0), (1.0, 0.0), (0.5, 2.0), (3.0, 0.5), (0.0, 4.0))

OPTIMIZED_TOLERANCE = 1e-3
NORM_TOLERANCE = 1e-6
GRAD_TOLERANCE = 1e-5
SYMMETRY_TOLERANCE = 1e-9


@dataclass(frozen=True)
class CheckResult:
    group: str
    name: str
    value: float
    threshold: float
    passed: bool
    detail: str = ""

    def to_dict(self) -> Dict[str, Any]:
        data = asdict(self)
        if not math.isfinite(self.value):
            data["value"] = None
        data["pass"] = data.pop("passed")
        return data


@dataclass(frozen=True)
class SuiteOptions:
    """
    Which checks to run and at what size

    optimized_grid lists the (k, d) cases for the optimized generator;
    the full EQUIANGULAR_GRID takes minutes, so the default keeps the small
    cases. prototype_files are extra sets to check for equiangularity.
    """

    seed: int = 0
    grad_instances: int = 100
    symmetry_features: int = 1000
    lipschitz_samples: int = 100000
    noise_samples: int = 100000
    optimized_grid: Tuple[Tuple[int, int], ...] = ((2, 2), (3, 2), (4, 8))
    optimized_epochs: int = 20000
    prototype_files: Tuple[PrototypeSet, ...] = field(default_factory=tuple)
    groups: Optional[Tuple[str, ...]] = None


GRAD_CASES: Tuple[Tuple[str, Dict[str, Any]], ...] = (
    (SOFTMAX, {}),
    (MARGIN_SOFTMAX, {}),
    (LDAM, {}),
    (NSL, {}),
    (GCE, {"q": 0.7}),
    (FOCAL, {"focal_gamma": 2.0}),
)


def _equiangular_closed_form() -> List[CheckResult]:
    results = []
    for k, d in EQUIANGULAR_GRID:
        report = verify_equiangular(generate_closed_form(k, d), 1e-10)
        results.append(
            CheckResult(
                "equiangular",
                f"closed_form k={k} d={d}",
                max(report.max_gram_dev, report.max_norm_dev),
                1e-10,
                report.passed,
            )
        )
    return results


def _equiangular_optimized(options: SuiteOptions) -> List[CheckResult]:
    results = []
    for k, d in options.optimized_grid:
        cfg = ProtoGenConfig(
            seed=options.seed,
            epochs=options.optimized_epochs,
            tolerance=OPTIMIZED_TOLERANCE,
            log_every=max(options.optimized_epochs, 1),
        )
        label = f"optimized k={k} d={d}"
        try:
            protos = generate_optimized(k, d, cfg)
        except AnchorLabError as e:
            results.append(CheckResult("equiangular", label, math.nan, OPTIMIZED_TOLERANCE, False, str(e)))
            continue
        report = verify_equiangular(protos, OPTIMIZED_TOLERANCE)
        norms_ok = report.max_norm_dev <= NORM_TOLERANCE
        results.append(
            CheckResult(
                "equiangular",
                label,
                report.max_gram_dev,
                OPTIMIZED_TOLERANCE,
                report.passed and norms_ok,
                f"max_norm_dev={report.max_norm_dev:.2e}",
            )
        )
        oracle = gram_matrix(generate_closed_form(k, d))
        gap = float(np.max(np.abs(gram_matrix(protos) - oracle)))
        results.append(
            CheckResult("oracle", f"gram vs closed_form k={k} d={d}", gap, OPTIMIZED_TOLERANCE, gap <= OPTIMIZED_TOLERANCE)
        )
    return results


def _equiangular_files(options: SuiteOptions) -> List[CheckResult]:
    results = []
    for index, protos in enumerate(options.prototype_files):
        report = verify_equiangular(protos, protos.tolerance)
        results.append(
            CheckResult(
                "equiangular",
                f"file[{index}] k={protos.k} d={protos.d}",
                max(report.max_gram_dev, report.max_norm_dev),
                protos.tolerance,
                report.passed,
            )
        )
    return results


def _grad_specs(variant: str, extras: Dict[str, Any], k: int, rng: np.random.Generator) -> List[LossSpec]:
    specs = []
    for normalize in (False, True):
        for anchored in (True, False):
            if variant == NSL and not anchored:
                continue
            fields: Dict[str, Any] = dict(extras)
            if variant in (MARGIN_SOFTMAX, LDAM):
                fields["margins"] = tuple(rng.uniform(0.0, 1.0, size=k))
            specs.append(
                LossSpec(
                    variant=variant,
                    scale=2.0 if normalize else 1.0,
                    feature_normalize=normalize,
                    anchored=anchored,
                    **fields,
                )
            )
    return specs


def _gradient_checks(options: SuiteOptions) -> List[CheckResult]:
    rng = np.random.default_rng(options.seed)
    k, d, n = 4, 5, 3
    results = []
    for variant, extras in GRAD_CASES:
        for spec in _grad_specs(variant, extras, k, rng):
            worst = 0.0
            for _ in range(options.grad_instances):
                W = rng.standard_normal((k, d))
                features = rng.standard_normal((n, d))
                labels = rng.integers(0, k, size=n)
                report = grad_check(spec, features, labels, W)
                worst = max(worst, report.max_rel_error)
                if spec.anchored and report.prototype_grad_max_abs != 0.0:
                    worst = math.inf
            mode = ("normalized" if spec.feature_normalize else "raw") + (
                " anchored" if spec.anchored else " learnable"
            )
            results.append(
                CheckResult("gradient", f"{variant} {mode}", worst, GRAD_TOLERANCE, worst <= GRAD_TOLERANCE)
            )
    return results


def _nsl_symmetry(options: SuiteOptions) -> List[CheckResult]:
    rng = np.random.default_rng(options.seed)
    protos = generate_closed_form(10, 16)
    spec = LossSpec(variant=NSL, scale=4.0, feature_normalize=True, anchored=True)
    worst = 0.0
    for _ in range(options.symmetry_features):
        worst = max(worst, abs(loss_symmetry_sum(spec, rng.standard_normal(16), protos)))
    return [CheckResult("symmetry", "NSL class-sum k=10", worst, SYMMETRY_TOLERANCE, worst <= SYMMETRY_TOLERANCE)]


def _lipschitz(options: SuiteOptions) -> List[CheckResult]:
    results = []
    k = 10
    protos = generate_closed_form(k, k - 1)
    spec = LossSpec(variant=SOFTMAX, anchored=True)
    for B in LIPSCHITZ_RADII:
        pal = lipschitz_pal(k, B)
        estimate = empirical_lipschitz(spec, protos, B, options.lipschitz_samples, options.seed)
        ratio = estimate / pal
        results.append(
            CheckResult(
                "lipschitz",
                f"empirical/lambda_PAL k={k} B={B}",
                ratio,
                1.001,
                0.5 <= ratio <= 1.001,
                f"empirical={estimate:.6f} lambda_PAL={pal:.6f}",
            )
        )
    for k in TIGHTNESS_CLASSES:
        for B in TIGHTNESS_RADII:
            pal = lipschitz_pal(k, B)
            bounds = lipschitz_unanchored_lower_bounds(k, B)
            tightest = min(bounds.normalized_w_only, bounds.normalized_both)
            if k == 2:
                ok = bounds.normalized_w_only > pal and bounds.normalized_both >= pal * (1 - 1e-12)
            else:
                ok = tightest > pal
            results.append(
                CheckResult("lipschitz", f"tightness k={k} B={B}", pal / tightest, 1.0, ok)
            )
    return results


def _bounds() -> List[CheckResult]:
    results = []
    for k in TIGHTNESS_CLASSES:
        for B in TIGHTNESS_RADII:
            worst = 0.0
            for eta in BOUND_RATES:
                report = risk_bound_ce(eta, B, k)
                general = risk_bound_general(eta, lipschitz_pal(k, B), B, k)
                worst = max(worst, abs(report.bound - general))
                if eta == 0.0 and report.bound != 0.0:
                    worst = math.inf
            if risk_bound_general(BOUND_RATES[-1], 0.0, B, k) != 0.0:
                worst = math.inf
            results.append(CheckResult("bounds", f"CE vs general k={k} B={B}", worst, 1e-12, worst <= 1e-12))
    return results


def _noise_fidelity(options: SuiteOptions) -> List[CheckResult]:
    k = 10
    n = options.noise_samples
    base = LabeledDataset(features=np.zeros((n, 1)), labels=np.arange(n) % k, k=k)
    results = []
    for eta in NOISE_RATES:
        matrix = transition_matrix(apply_symmetric_noise(base, eta, options.seed))
        off = ~np.eye(k, dtype=bool)
        diag_gap = float(np.max(np.abs(np.diag(matrix) - (1 - eta))))
        off_gap = float(np.max(np.abs(matrix[off] - eta / (k - 1))))
        results.append(CheckResult("noise", f"symmetric eta={eta} diagonal", diag_gap, 0.01, diag_gap <= 0.01))
        results.append(CheckResult("noise", f"symmetric eta={eta} off-diagonal", off_gap, 0.005, off_gap <= 0.005))
    return results


def _ldam() -> List[CheckResult]:
    r = 2.0
    results = []
    for alpha in (0.0, 0.5, 2.0):
        threshold = ldam_bayes_threshold(alpha, alpha, r)
        results.append(
            CheckResult("ldam", f"threshold equal margins alpha={alpha}", abs(threshold - 0.5), 0.0, threshold == 0.5)
        )
    for alpha_plus, alpha_minus in LDAM_MARGIN_PAIRS:
        threshold = ldam_bayes_threshold(alpha_plus, alpha_minus, r)
        gap = abs(threshold - 0.5)
        # the optimal sign must flip at the threshold
        above = min(threshold + 1e-6, 1.0)
        below = max(threshold - 1e-6, 0.0)
        flips = ldam_conditional_risk(above, 1, alpha_plus, alpha_minus, r) < ldam_conditional_risk(
            above, -1, alpha_plus, alpha_minus, r
        ) and ldam_conditional_risk(below, 1, alpha_plus, alpha_minus, r) > ldam_conditional_risk(
            below, -1, alpha_plus, alpha_minus, r
        )
        results.append(
            CheckResult(
                "ldam",
                f"miscalibration alpha+={alpha_plus} alpha-={alpha_minus}",
                gap,
                0.01,
                gap >= 0.01 and flips,
                f"threshold={threshold:.6f}",
            )
        )
    return results


def _groups(options: SuiteOptions) -> List[Tuple[str, Callable[[], List[CheckResult]]]]:
    return [
        ("equiangular", lambda: _equiangular_closed_form() + _equiangular_optimized(options) + _equiangular_files(options)),
        ("gradient", lambda: _gradient_checks(options)),
        ("symmetry", lambda: _nsl_symmetry(options)),
        ("lipschitz", lambda: _lipschitz(options)),
        ("bounds", _bounds),
        ("noise", lambda: _noise_fidelity(options)),
        ("ldam", _ldam),
    ]


GROUPS = ("equiangular", "gradient", "symmetry", "lipschitz", "bounds", "noise", "ldam")


def run_suite(options: Optional[SuiteOptions] = None) -> List[CheckResult]:
    """Run the selected check groups in a fixed order"""
    options = options or SuiteOptions()
    results: List[CheckResult] = []
    for name, run in _groups(options):
        if options.groups is not None and name not in options.groups:
            continue
        logger.info("Running %s checks", name)
        group_results = run()
        failed = sum(not r.passed for r in group_results)
        if failed:
            logger.warning("%d of %d %s checks failed", failed, len(group_results), name)
        results.extend(group_results)
    return results


def format_table(results: Sequence[CheckResult]) -> str:
    """Fixed-width pass/fail table"""
    lines = [
        f"{'Group':<12} {'Check':<48} {'Value':<12} {'Threshold':<10} Result",
        "-" * 92,
    ]
    for r in results:
        lines.append(
            f"{r.group:<12} {r.name:<48} {r.value:<12.4g} {r.threshold:<10.3g} "
            f"{'PASS' if r.passed else 'FAIL'}"
        )
    passed = sum(r.passed for r in results)
    lines.append("-" * 92)
    lines.append(f"{passed}/{len(results)} checks passed")
    return "\n".join(lines)
