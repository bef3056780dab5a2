#!/usr/bin/env python3
"""
Tests for the command line
"""

import json

import numpy as np
import pytest

from anchorlab.cli import RunConfig, main
from anchorlab.datasets import save_bundle
from anchorlab.errors import ConfigError
from anchorlab.prototypes import PrototypeSet, generate_closed_form, load, save
from anchorlab.trainer import METRICS_HEADER, load_checkpoint


def _run(capsys, *argv):
    code = main(list(argv))
    captured = capsys.readouterr()
    return code, captured.out, captured.err


class TestProtogen:
    """Test cases for `anchorlab protogen`"""

    def test_closed_form_passes(self, tmp_path, capsys):
        """k=10, d=16 verifies and writes both files"""
        code, out, _ = _run(capsys, "protogen", "--k", "10", "--d", "16", "--out", str(tmp_path), "--json")
        payload = json.loads(out)

        assert code == 0
        assert payload["pass"] is True
        assert (tmp_path / "prototypes.proto.bin").stat().st_size == 8 * 10 * 16
        assert json.loads((tmp_path / "verification.json").read_text())["pass"] is True
        assert (tmp_path / "resolved_config.json").exists()

    def test_infeasible_dimension(self, tmp_path, capsys):
        """k=10, d=5 exits 2 with an error document on stderr"""
        code, _, err = _run(capsys, "protogen", "--k", "10", "--d", "5", "--out", str(tmp_path))
        assert code == 2
        assert json.loads(err)["error"] == "DimensionError"

    def test_optimized_is_deterministic(self, tmp_path, capsys):
        """One seed gives bit-identical prototype files"""
        blobs = []
        for name in ("a", "b"):
            code, _, _ = _run(
                capsys,
                "protogen", "--mode", "optimized", "--k", "3", "--d", "2",
                "--epochs", "20000", "--tolerance", "1e-3",
                "--seed", "7", "--out", str(tmp_path / name),
            )
            assert code == 0
            blobs.append((tmp_path / name / "prototypes.proto.bin").read_bytes())
        assert blobs[0] == blobs[1]

    def test_file_mode_reports_failure(self, tmp_path, capsys):
        """A perturbed file exits 1"""
        vectors = np.array(generate_closed_form(3, 3).vectors)
        vectors[0, 0] += 1e-3
        save(PrototypeSet(vectors), tmp_path / "bad")
        code, _, _ = _run(
            capsys, "protogen", "--mode", "file", "--path", str(tmp_path / "bad"),
            "--k", "3", "--d", "3", "--out", str(tmp_path / "run"),
        )
        assert code == 1


class TestSynth:
    """Test cases for `anchorlab synth`"""

    def test_longtail_counts(self, tmp_path, capsys):
        """rho=100 over n_max=1000 keeps 1000 down to 10"""
        code, _, _ = _run(
            capsys, "synth", "--k", "10", "--m", "4", "--n-max", "1000",
            "--imbalance", "LongTailed", "--rho", "100", "--out", str(tmp_path),
        )
        lines = (tmp_path / "counts.csv").read_text().splitlines()

        assert code == 0
        assert lines[0] == "class,count"
        assert lines[1] == "0,1000"
        assert lines[-1] == "9,10"
        assert json.loads((tmp_path / "synth.json").read_text())["imbalance_ratio"] == pytest.approx(100.0)

    def test_noisy_train_clean_test(self, tmp_path, capsys):
        """Noise hits the training bundle only"""
        code, out, _ = _run(
            capsys, "synth", "--k", "4", "--m", "3", "--n-max", "50", "--test-per-class", "10",
            "--noise", "Symmetric", "--eta", "0.4", "--out", str(tmp_path), "--json",
        )
        assert code == 0
        assert json.loads(out)["observed_noise_rate"] > 0.2
        test_meta = json.loads((tmp_path / "test" / "meta.json").read_text())
        assert test_meta["counts"] == [10, 10, 10, 10]
        assert all(record["op"] != "noise" for record in test_meta["provenance"])


class TestTrain:
    """Test cases for `anchorlab train`"""

    def test_zero_epochs_writes_header_only(self, tmp_path, capsys):
        """epochs=0 leaves a header-only metrics file"""
        code, _, _ = _run(capsys, "train", "--epochs", "0", "--hidden", "8", "--out", str(tmp_path))
        assert code == 0
        assert (tmp_path / "metrics.csv").read_text() == ",".join(METRICS_HEADER) + "\n"

    def test_anchored_checkpoint_holds_the_prototypes(self, tmp_path, capsys):
        """The stored classifier is byte-identical to the prototype file"""
        code, _, _ = _run(capsys, "train", "--epochs", "2", "--hidden", "8", "--out", str(tmp_path))
        state, configs = load_checkpoint(tmp_path / "model")

        assert code == 0
        assert state.classifier.tobytes() == load(tmp_path / "prototypes").vectors.tobytes()
        assert configs["loss"]["anchored"] is True
        assert len((tmp_path / "metrics.csv").read_text().splitlines()) == 3

    def test_rerun_is_identical(self, tmp_path, capsys):
        """Same config and seed give byte-identical metrics"""
        for name in ("a", "b"):
            _run(
                capsys, "train", "--epochs", "3", "--hidden", "8", "--loss", "NSL",
                "--seed", "5", "--out", str(tmp_path / name),
            )
        assert (tmp_path / "a" / "metrics.csv").read_bytes() == (tmp_path / "b" / "metrics.csv").read_bytes()

    def test_nsl_learnable_is_incompatible(self, tmp_path, capsys):
        """NSL with a learnable classifier exits 2"""
        code, _, err = _run(
            capsys, "train", "--epochs", "1", "--loss", "NSL", "--classifier", "Learnable",
            "--out", str(tmp_path),
        )
        assert code == 2
        assert json.loads(err)["error"] == "IncompatibleSpec"

    def test_summary_reports_groups(self, tmp_path, capsys):
        """summary.json carries grouped accuracy with its thresholds"""
        code, out, _ = _run(
            capsys, "train", "--epochs", "1", "--hidden", "8", "--loss", "LDAM",
            "--out", str(tmp_path), "--json",
        )
        summary = json.loads(out)

        assert code == 0
        assert summary["grouped"]["thresholds"] == {"many_min": 100, "few_max": 20}
        assert len(summary["loss"]["margins"]) == 10

    def test_incomplete_bundle_exits_3(self, tmp_path, capsys, small_blobs):
        """A bundle whose meta.json lacks n is a format error, not a crash"""
        save_bundle(small_blobs, tmp_path / "bundle")
        meta_path = tmp_path / "bundle" / "meta.json"
        meta = json.loads(meta_path.read_text())
        del meta["n"]
        meta_path.write_text(json.dumps(meta))

        code, _, err = _run(
            capsys, "train", "--train-data", str(tmp_path / "bundle"), "--epochs", "0",
            "--out", str(tmp_path / "run"),
        )
        assert code == 3
        assert json.loads(err)["error"] == "FormatError"

    def test_unexpected_exception_exits_1(self, tmp_path, capsys, monkeypatch):
        """An error outside the anchorlab hierarchy still yields an error document"""

        def broken(args):
            raise RuntimeError("disk on fire")

        monkeypatch.setattr("anchorlab.cli.cmd_protogen", broken)
        code, _, err = _run(capsys, "protogen", "--k", "3", "--d", "2", "--out", str(tmp_path))
        payload = json.loads(err)

        assert code == 1
        assert payload["error"] == "RuntimeError"
        assert payload["message"] == "disk on fire"


class TestAnalyzeAndVerify:
    """Test cases for `anchorlab analyze` and `anchorlab verify`"""

    def test_analyze_after_training(self, tmp_path, capsys):
        """analyze reads the checkpoint and writes tidy files"""
        data = tmp_path / "data"
        run = tmp_path / "run"
        _run(capsys, "synth", "--k", "3", "--m", "4", "--n-max", "40", "--test-per-class", "20", "--out", str(data))
        _run(
            capsys, "train", "--epochs", "2", "--hidden", "8", "--feature-dim", "4",
            "--train-data", str(data / "train"), "--test-data", str(data / "test"), "--out", str(run),
        )
        code, out, _ = _run(
            capsys, "analyze", "--checkpoint", str(run / "model"), "--test-data", str(data / "test"),
            "--out", str(run), "--json",
        )
        payload = json.loads(out)

        assert code == 0
        assert payload["n"] == 60
        assert payload["margins"]["min_margin"] <= 3.0 / 2.0 + 1e-9
        for name in ("margins.csv", "reliability.csv", "feature_norms.csv", "analysis.json"):
            assert (run / "analysis" / name).exists()

    def test_analyze_missing_checkpoint(self, tmp_path, capsys):
        """A missing checkpoint exits 3"""
        code, _, _ = _run(capsys, "analyze", "--checkpoint", str(tmp_path / "nope"), "--out", str(tmp_path))
        assert code == 3

    def test_verify_json(self, tmp_path, capsys):
        """verify --json prints and stores the check list"""
        code, out, _ = _run(capsys, "verify", "--groups", "bounds", "ldam", "--out", str(tmp_path), "--json")
        payload = json.loads(out)

        assert code == 0
        assert payload["pass"] is True
        assert payload == json.loads((tmp_path / "verify.json").read_text())

    def test_verify_perturbed_file(self, tmp_path, capsys):
        """A perturbed prototype file makes verify exit 1"""
        vectors = np.array(generate_closed_form(5, 4).vectors)
        vectors[2, 1] -= 1e-4
        save(PrototypeSet(vectors), tmp_path / "bad")
        code, out, _ = _run(
            capsys, "verify", "--groups", "equiangular", "--skip-optimized",
            "--prototype-file", str(tmp_path / "bad"), "--out", str(tmp_path / "run"),
        )
        assert code == 1
        assert "FAIL" in out


class TestRunConfig:
    """Test cases for run configuration files"""

    def test_component_seeds_follow_master(self):
        """Unpinned component seeds derive from the master seed"""
        cfg = RunConfig.from_dict({"seed": 10, "noise": {"kind": "Symmetric", "eta": 0.2}})
        assert cfg.blobs.seed == 10
        assert cfg.noise.seed == 12
        assert cfg.optim.seed == 13

    def test_pinned_seed_survives_loading(self):
        """A seed written in the file wins over the derived one"""
        cfg = RunConfig.from_dict({"seed": 10, "blobs": {"seed": 99}})
        assert cfg.blobs.seed == 99
        assert cfg.with_seed(1).blobs.seed == 1

    def test_unknown_key(self):
        """Unknown keys are configuration errors"""
        with pytest.raises(ConfigError):
            RunConfig.from_dict({"sead": 1})

    def test_config_file_and_round_trip(self, tmp_path, capsys):
        """resolved_config.json can be fed back with --config"""
        _run(capsys, "protogen", "--k", "4", "--d", "3", "--out", str(tmp_path / "a"))
        resolved = tmp_path / "a" / "resolved_config.json"
        code, _, _ = _run(capsys, "protogen", "--config", str(resolved), "--out", str(tmp_path / "b"))

        assert code == 0
        first = json.loads(resolved.read_text())
        second = json.loads((tmp_path / "b" / "resolved_config.json").read_text())
        first.pop("out")
        second.pop("out")
        assert first == second
