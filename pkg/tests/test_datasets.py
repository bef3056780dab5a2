#!/usr/bin/env python3
"""
Tests for dataset synthesis, corruption recipes and file formats
"""

import gzip
import json
import struct

import numpy as np
import pytest

from anchorlab.datasets import (
    ASYMMETRIC,
    LONG_TAILED,
    MNIST_ASYMMETRIC_MAP,
    STEP,
    BlobSpec,
    ImbalanceSpec,
    LabeledDataset,
    NoiseSpec,
    apply_asymmetric_noise,
    apply_imbalance,
    apply_longtail,
    apply_noise,
    apply_step,
    apply_symmetric_noise,
    imbalance_ratio,
    load_bundle,
    load_csv,
    load_idx,
    longtail_counts,
    save_bundle,
    split,
    step_counts,
    synth_blobs,
    transition_matrix,
)
from anchorlab.errors import (
    ConfigError,
    EmptyClassError,
    FormatError,
    LabelError,
    MapError,
    RateError,
    ShapeError,
)


def _uniform(n, k):
    return LabeledDataset(features=np.zeros((n, 1)), labels=np.arange(n) % k, k=k)


def _write_idx(path, magic, dims, payload, compress=False):
    header = struct.pack(">I", magic) + struct.pack(">" + "I" * len(dims), *dims)
    opener = gzip.open if compress else open
    with opener(path, "wb") as handle:
        handle.write(header + bytes(payload))


class TestLabeledDataset:
    """Test cases for the dataset container"""

    def test_rejects_out_of_range_labels(self):
        """Labels must lie in [0, k)"""
        with pytest.raises(LabelError):
            LabeledDataset(features=np.zeros((2, 3)), labels=[0, 3], k=3)

    def test_rejects_length_mismatch(self):
        """One label per row"""
        with pytest.raises(ShapeError):
            LabeledDataset(features=np.zeros((2, 3)), labels=[0], k=3)

    def test_arrays_are_read_only(self, small_blobs):
        """Features and labels cannot be changed in place"""
        with pytest.raises(ValueError):
            small_blobs.labels[0] = 1


class TestBlobs:
    """Test cases for Gaussian blobs"""

    def test_counts_and_shape(self):
        """per_class samples of each class, in class order"""
        data = synth_blobs(BlobSpec(k=3, m=5, per_class=7))
        assert data.features.shape == (21, 5)
        assert data.class_counts().tolist() == [7, 7, 7]
        assert np.array_equal(data.labels, data.clean_labels)

    def test_same_seed_same_data(self):
        """synth_blobs is a pure function of its spec"""
        spec = BlobSpec(k=3, m=4, per_class=10, seed=9)
        assert synth_blobs(spec).features.tobytes() == synth_blobs(spec).features.tobytes()

    def test_spec_validation(self):
        """Invalid specs raise ConfigError"""
        with pytest.raises(ConfigError):
            synth_blobs(BlobSpec(k=1))
        with pytest.raises(ConfigError):
            BlobSpec.from_dict({"k": 3, "classes": 4})


class TestImbalance:
    """Test cases for long-tailed and step imbalance"""

    def test_longtail_head_and_tail(self):
        """rho=100, k=10, n_max=1000 keeps 1000 down to 10"""
        counts = longtail_counts(1000, 10, 100)
        assert counts[0] == 1000
        assert counts[-1] == 10
        assert all(a >= b for a, b in zip(counts, counts[1:]))

    def test_apply_longtail(self):
        """Subsampled classes match the exponential profile"""
        data = synth_blobs(BlobSpec(k=10, m=2, per_class=1000))
        tailed = apply_longtail(data, 100, seed=1)

        assert tailed.class_counts().tolist() == longtail_counts(1000, 10, 100)
        assert imbalance_ratio(tailed) == pytest.approx(100.0)
        assert tailed.provenance[-1]["op"] == "imbalance"

    def test_step_counts(self):
        """Half the classes drop to n_max / rho"""
        assert step_counts(100, 4, 10) == [100, 100, 10, 10]
        data = synth_blobs(BlobSpec(k=4, m=2, per_class=100))
        assert apply_step(data, 10).class_counts().tolist() == [100, 100, 10, 10]

    def test_imbalance_spec_dispatch(self):
        """apply_imbalance follows the spec kind"""
        data = synth_blobs(BlobSpec(k=4, m=2, per_class=100))
        stepped = apply_imbalance(data, ImbalanceSpec(kind=STEP, rho=4))
        tailed = apply_imbalance(data, ImbalanceSpec(kind=LONG_TAILED, rho=4))
        assert stepped.class_counts().tolist() == [100, 100, 25, 25]
        assert tailed.class_counts()[-1] == 25

    def test_rho_one_keeps_everything(self):
        """rho=1 is a no-op on balanced data"""
        data = synth_blobs(BlobSpec(k=3, m=2, per_class=20))
        assert apply_longtail(data, 1.0).n == data.n

    def test_empty_class(self):
        """Rounding a class to zero raises EmptyClassError"""
        data = synth_blobs(BlobSpec(k=3, m=2, per_class=10))
        with pytest.raises(EmptyClassError):
            apply_longtail(data, 100)

    def test_rho_below_one(self):
        """rho < 1 is a configuration error"""
        data = synth_blobs(BlobSpec(k=3, m=2, per_class=10))
        with pytest.raises(ConfigError):
            apply_longtail(data, 0.5)


class TestNoise:
    """Test cases for label corruption"""

    def test_zero_rate_keeps_labels(self, small_blobs):
        """eta=0 leaves every label clean"""
        noisy = apply_symmetric_noise(small_blobs, 0.0, seed=1)
        assert np.array_equal(noisy.labels, noisy.clean_labels)

    @pytest.mark.parametrize("eta", [0.2, 0.6, 0.8])
    def test_symmetric_transition_fidelity(self, eta):
        """Diagonal 1 - eta, off-diagonal eta / 9 at n = 10^5"""
        matrix = transition_matrix(apply_symmetric_noise(_uniform(100000, 10), eta, seed=3))
        off = ~np.eye(10, dtype=bool)

        assert np.all(np.abs(np.diag(matrix) - (1 - eta)) <= 0.01)
        assert np.all(np.abs(matrix[off] - eta / 9) <= 0.005)

    def test_symmetric_never_keeps_a_flipped_label(self):
        """A flipped label always differs from the clean one"""
        noisy = apply_symmetric_noise(_uniform(5000, 3), 0.5, seed=2)
        flipped = noisy.labels != noisy.clean_labels
        assert 0.45 < flipped.mean() < 0.55

    def test_asymmetric_only_moves_mapped_classes(self):
        """Unmapped classes stay clean; mapped ones flip to their target"""
        noisy = apply_asymmetric_noise(_uniform(10000, 10), 0.4, MNIST_ASYMMETRIC_MAP, seed=4)
        matrix = transition_matrix(noisy)

        for cls in (0, 1, 4, 9):
            assert matrix[cls, cls] == 1.0
        assert matrix[7, 1] == pytest.approx(0.4, abs=0.05)
        assert matrix[7, 1] + matrix[7, 7] == pytest.approx(1.0)
        assert matrix[5, 6] > 0 and matrix[6, 5] > 0

    @pytest.mark.parametrize(
        "class_map",
        [((3, 3),), ((1, 2), (1, 3)), ((0, 12),), ()],
    )
    def test_bad_maps(self, class_map):
        """Self-loops, conflicts, out-of-range pairs and empty maps raise MapError"""
        with pytest.raises(MapError):
            apply_asymmetric_noise(_uniform(10, 10), 0.3, class_map)

    def test_rate_range(self, small_blobs):
        """eta must lie in [0, 1)"""
        with pytest.raises(RateError):
            apply_symmetric_noise(small_blobs, 1.0)

    def test_noise_spec_dispatch(self):
        """apply_noise follows the spec kind and records provenance"""
        spec = NoiseSpec(kind=ASYMMETRIC, eta=0.3, class_map=((0, 1),), seed=5)
        noisy = apply_noise(_uniform(1000, 3), spec)
        assert noisy.provenance[-1]["kind"] == ASYMMETRIC
        assert np.all(noisy.labels[noisy.clean_labels == 2] == 2)


class TestSplit:
    """Test cases for the stratified split"""

    def test_stratified_counts(self, small_blobs):
        """Each class contributes the same test share"""
        train, test = split(small_blobs, 0.2, seed=1)
        assert test.class_counts().tolist() == [6, 6, 6, 6]
        assert train.n + test.n == small_blobs.n

    def test_fraction_range(self, small_blobs):
        """test_fraction must lie in (0, 1)"""
        with pytest.raises(ConfigError):
            split(small_blobs, 0.0)


class TestFileFormats:
    """Test cases for IDX, CSV and bundle I/O"""

    def test_idx_pair(self, tmp_path):
        """Pixels are flattened and scaled to [0, 1]"""
        _write_idx(tmp_path / "img", 0x803, (2, 2, 2), [0, 255, 51, 102, 255, 0, 0, 0])
        _write_idx(tmp_path / "lbl.gz", 0x801, (2,), [3, 1], compress=True)
        data = load_idx(tmp_path / "img", tmp_path / "lbl.gz", k=10)

        assert data.features.shape == (2, 4)
        assert data.features[0].tolist() == pytest.approx([0.0, 1.0, 0.2, 0.4])
        assert data.labels.tolist() == [3, 1]
        assert data.k == 10

    def test_idx_bad_magic(self, tmp_path):
        """A wrong magic number raises FormatError at offset 0"""
        _write_idx(tmp_path / "img", 0x801, (2, 2, 2), [0] * 8)
        _write_idx(tmp_path / "lbl", 0x801, (2,), [0, 1])
        with pytest.raises(FormatError) as excinfo:
            load_idx(tmp_path / "img", tmp_path / "lbl")
        assert excinfo.value.details["offset"] == 0

    def test_idx_truncated(self, tmp_path):
        """Fewer bytes than declared raises FormatError"""
        _write_idx(tmp_path / "img", 0x803, (2, 2, 2), [0] * 5)
        _write_idx(tmp_path / "lbl", 0x801, (2,), [0, 1])
        with pytest.raises(FormatError):
            load_idx(tmp_path / "img", tmp_path / "lbl")

    def test_csv(self, tmp_path):
        """The label column is split off; other columns are features"""
        path = tmp_path / "data.csv"
        path.write_text("x,label,y\n1.5,0,2\n-1,2,0.5\n")
        data = load_csv(path)

        assert data.k == 3
        assert data.features.tolist() == [[1.5, 2.0], [-1.0, 0.5]]
        assert data.labels.tolist() == [0, 2]

    def test_csv_bad_cell_reports_line(self, tmp_path):
        """A non-numeric cell raises FormatError with its line"""
        path = tmp_path / "data.csv"
        path.write_text("x,label\n1,0\nabc,1\n")
        with pytest.raises(FormatError) as excinfo:
            load_csv(path)
        assert excinfo.value.details["line"] == 3

    def test_csv_missing_label_column(self, tmp_path):
        """A header without label raises FormatError"""
        path = tmp_path / "data.csv"
        path.write_text("x,y\n1,2\n")
        with pytest.raises(FormatError):
            load_csv(path)

    def test_bundle_round_trip(self, tmp_path, small_blobs):
        """Bundles preserve features, both label sets and provenance"""
        noisy = apply_symmetric_noise(small_blobs, 0.3, seed=2)
        save_bundle(noisy, tmp_path / "bundle")
        loaded = load_bundle(tmp_path / "bundle")

        assert loaded.features.tobytes() == noisy.features.tobytes()
        assert np.array_equal(loaded.labels, noisy.labels)
        assert np.array_equal(loaded.clean_labels, noisy.clean_labels)
        assert list(loaded.provenance) == list(noisy.provenance)

    @pytest.mark.parametrize("key", ["n", "k"])
    def test_bundle_incomplete_meta(self, tmp_path, small_blobs, key):
        """meta.json without a required field raises FormatError, not KeyError"""
        save_bundle(small_blobs, tmp_path / "bundle")
        meta_path = tmp_path / "bundle" / "meta.json"
        meta = json.loads(meta_path.read_text())
        del meta[key]
        meta_path.write_text(json.dumps(meta))

        with pytest.raises(FormatError) as excinfo:
            load_bundle(tmp_path / "bundle")
        assert excinfo.value.details["offset"] == 0
        assert excinfo.value.exit_code == 3

    def test_bundle_meta_not_an_object(self, tmp_path, small_blobs):
        """A JSON list in meta.json raises FormatError"""
        save_bundle(small_blobs, tmp_path / "bundle")
        (tmp_path / "bundle" / "meta.json").write_text("[1, 2, 3]")
        with pytest.raises(FormatError):
            load_bundle(tmp_path / "bundle")

    def test_bundle_missing(self, tmp_path):
        """A missing bundle raises FormatError"""
        with pytest.raises(FormatError):
            load_bundle(tmp_path / "absent")
