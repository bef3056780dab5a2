#!/usr/bin/env python3
"""
Example of how to use anchorlab from another Python script
"""

import numpy as np

from anchorlab import (
    BlobSpec,
    LossSpec,
    ModelConfig,
    OptimConfig,
    Trainer,
    apply_longtail,
    apply_symmetric_noise,
    evaluate_grouped,
    generate_closed_form,
    lipschitz_pal,
    noise_aware_scale,
    risk_bound_ce,
    synth_blobs,
    verify_equiangular,
)
from anchorlab.datasets import split


def example_1_prototypes():
    """Generate and verify a simplex ETF"""
    protos = generate_closed_form(k=10, d=16)
    report = verify_equiangular(protos, tol=1e-10)

    print(f"Max Gram deviation: {report.max_gram_dev:.2e}")
    print(f"Min angle: {report.min_angle_deg:.2f} deg (pass: {report.passed})")


def example_2_long_tailed():
    """Compare a learnable and an anchored classifier on long-tailed blobs"""
    blobs = synth_blobs(BlobSpec(k=10, m=16, per_class=600, seed=1))
    train, test = split(blobs, test_fraction=1 / 6, seed=2)
    train = apply_longtail(train, rho=100, seed=3)
    protos = generate_closed_form(k=10, d=16)
    opt = OptimConfig(epochs=30, learning_rate=0.05)

    runs = [
        ("CE", ModelConfig(16, 16, num_classes=10), LossSpec("Softmax")),
        (
            "CE+PAL",
            ModelConfig(16, 16, classifier="Anchored", prototypes=protos),
            LossSpec("Softmax", anchored=True),
        ),
    ]

    print("Long-tailed blobs, rho=100")
    print("=" * 60)
    for name, model, loss in runs:
        trainer = Trainer(model, opt, loss, seed=4)
        trainer.fit(train, test)
        groups = evaluate_grouped(trainer.state, test, loss)
        print(
            f"{name:<8} many {groups.many_acc:.3f}  medium {groups.medium_acc:.3f}  "
            f"few {groups.few_acc:.3f}  overall {groups.overall:.3f}"
        )


def example_3_label_noise():
    """Feature-normalized anchored training with a noise-aware scale"""
    eta = 0.6
    blobs = synth_blobs(BlobSpec(k=10, m=16, per_class=300, seed=5))
    train, test = split(blobs, test_fraction=1 / 3, seed=6)
    train = apply_symmetric_noise(train, eta, seed=7)

    protos = generate_closed_form(k=10, d=16)
    loss = LossSpec(
        "Softmax", scale=noise_aware_scale(eta), feature_normalize=True, anchored=True
    )
    trainer = Trainer(
        ModelConfig(16, 16, classifier="Anchored", prototypes=protos),
        OptimConfig(epochs=40),
        loss,
    )
    trainer.fit(train, test)
    print(trainer.get_summary())

    table = trainer.get_epoch_table()
    print(f"Peak clean accuracy: {max(row['eval_acc'] for row in table):.4f}")


def example_4_bounds():
    """Lipschitz constant and risk bound for several feature radii"""
    print(f"{'B':<6} {'lambda_PAL':<12} {'bound (eta=0.2)':<16}")
    for B in np.array([0.5, 1.0, 2.0, 4.0]):
        report = risk_bound_ce(eta=0.2, B=float(B), k=10)
        print(f"{B:<6} {lipschitz_pal(10, float(B)):<12.4f} {report.bound:<16.4f}")


if __name__ == "__main__":
    print("Example 1: Prototypes")
    example_1_prototypes()

    print("\n" + "=" * 60 + "\n")
    print("Example 2: Long-tailed data")
    example_2_long_tailed()

    print("\n" + "=" * 60 + "\n")
    print("Example 3: Label noise")
    example_3_label_noise()

    print("\n" + "=" * 60 + "\n")
    print("Example 4: Bounds")
    example_4_bounds()
