import csv
import json
from pathlib import Path

import numpy as np
import pytest

from nhmcal import pipeline
from nhmcal.cli import main
from nhmcal.likelihood import GROUP_LABELS

SMALL = {
    "seed": 5,
    "simulator": {"cohort_size": 600, "n_randomizations": 2},
    "truth": {"cohort_size": 4000},
    "waves": [{"n_runs": 30, "log_ratio_threshold": -40.0, "restarts": 3},
              {"n_runs": 30, "log_ratio_threshold": -40.0, "restarts": 3}],
    "emulator": {"n_train": 25, "gibbs_iters": 10, "restarts": 3},
    "calibration": {"S": 40, "M": 40, "thin": 3, "warmup": 60, "u": 8, "max_iterations": 3,
                    "refit_gibbs_iters": 5},
}
STEPS = [["synthesize-target"], ["wave", "--wave", "0"], ["wave", "--wave", "1"], ["emulate"],
         ["calibrate"], ["reweight", "--lambda", "1", "1", "1", "1"], ["report"]]


def _write_config(path: Path, **override) -> Path:
    cfg = json.loads(json.dumps(SMALL))
    for key, value in override.items():
        if isinstance(value, dict):
            cfg.setdefault(key, {}).update(value)
        else:
            cfg[key] = value
    path.write_text(json.dumps(cfg))
    return path


def _run_all(root: Path, config: Path, capsys=None) -> list[int]:
    codes = []
    for step in STEPS:
        codes.append(main([*step, "--config", str(config), "--manifest", str(root / "manifest.json")]))
    return codes


def _artifact_bytes(root: Path) -> dict[str, bytes]:
    return {str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*"))
            if p.is_file() and p.name != "manifest.json"}


def _csv(path: Path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


@pytest.fixture(scope="module")
def completed(tmp_path_factory):
    root = tmp_path_factory.mktemp("run")
    config = _write_config(root.parent / "small.json")
    codes = _run_all(root, config)
    return root, config, codes


class TestFullRun:
    def test_all_commands_succeed(self, completed):
        _, _, codes = completed
        assert codes == [0] * len(STEPS)

    def test_manifest_records_artifacts(self, completed):
        root, _, _ = completed
        manifest = json.loads((root / "manifest.json").read_text())
        assert manifest["format"] == "nhmcal.manifest"
        assert manifest["config_hash"] == pipeline.config_hash(manifest["config"])
        assert [h["command"] for h in manifest["history"]] == [
            "synthesize-target", "wave", "wave", "emulate", "calibrate", "reweight", "report"]
        for rel in ("target.json", "wave0/logliks.csv", "wave1/region.json", "emulator/emulator.json",
                    "calibration/calibrated.csv", "reweight/1_1_1_1/calibrated.csv", "report/summary.json"):
            assert (root / rel).is_file(), rel

    def test_report_row_counts(self, completed):
        root, _, _ = completed
        counts = {key: len(labels) for key, labels in GROUP_LABELS.items()}
        for name in ("variance_bounds", "calibrated_outputs"):
            rows = _csv(root / "report" / f"{name}.csv")
            got = {}
            for r in rows:
                got[r["group_set"]] = got.get(r["group_set"], 0) + 1
            assert got == counts
            assert len(rows) == 29
        sens = _csv(root / "report" / "sensitivity.csv")
        settings = {r["setting"] for r in sens}
        assert {"baseline", "exact", "halved"} <= settings
        assert len(sens) == 29 * len(settings)
        scatter = _csv(root / "report" / "emulator_vs_loglik.csv")
        assert scatter and {"iteration", "loglik", "emulator_mean"} <= set(scatter[0])

    def test_summary_contents(self, completed):
        root, _, _ = completed
        summary = json.loads((root / "report" / "summary.json").read_text())
        assert len(summary["covers_truth"]) == 3
        assert 1.0 <= summary["ess"] <= 40
        assert set(summary["min_fraction_within_bounds"]) == set(GROUP_LABELS)

    def test_idempotent_rerun(self, completed, tmp_path):
        root, config, _ = completed
        assert _run_all(tmp_path, config) == [0] * len(STEPS)
        assert _artifact_bytes(tmp_path) == _artifact_bytes(root)

    def test_rerun_in_place_is_allowed(self, completed):
        root, config, _ = completed
        before = _artifact_bytes(root)
        assert main(["wave", "--wave", "0", "--config", str(config), "--manifest", str(root / "manifest.json")]) == 0
        assert _artifact_bytes(root) == before

    def test_reweight_identity(self, completed, capsys):
        root, _, _ = completed
        manifest = json.loads((root / "manifest.json").read_text())
        lam = [str(v) for v in manifest["config"]["discrepancy"]]
        capsys.readouterr()
        assert main(["reweight", "--lambda", *lam, "--manifest", str(root / "manifest.json")]) == 0
        out = json.loads(capsys.readouterr().out)
        assert out["ess_ratio"] == pytest.approx(1.0)
        tag = pipeline._lambda_tag([float(v) for v in lam])
        assert (root / "reweight" / tag / "calibrated.csv").read_bytes() == \
            (root / "calibration" / "calibrated.csv").read_bytes()

    def test_wave_logliks_have_one_row_per_run(self, completed):
        root, _, _ = completed
        rows = _csv(root / "wave0" / "logliks.csv")
        assert len(rows) == 30
        assert all(np.isfinite(float(r["loglik"])) for r in rows)


class TestFailures:
    def test_missing_manifest(self, tmp_path):
        assert main(["wave", "--wave", "0", "--manifest", str(tmp_path / "m.json")]) == 2

    def test_bad_arguments(self, tmp_path):
        assert main(["wave", "--manifest", str(tmp_path / "m.json")]) == 2
        assert main(["reweight", "--lambda", "1", "1"]) == 2
        assert main(["synthesize-target", "--seed", "-1"]) == 2
        assert main(["no-such-command"]) == 2

    def test_missing_upstream_artifact(self, tmp_path):
        config = _write_config(tmp_path / "c.json")
        m = str(tmp_path / "run" / "manifest.json")
        assert main(["synthesize-target", "--config", str(config), "--manifest", m]) == 0
        assert main(["wave", "--wave", "1", "--manifest", m]) == 2
        assert main(["calibrate", "--manifest", m]) == 2
        assert main(["wave", "--wave", "7", "--manifest", m]) == 2

    def test_stale_config_hash_refused(self, tmp_path):
        config = _write_config(tmp_path / "c.json")
        m = str(tmp_path / "run" / "manifest.json")
        assert main(["synthesize-target", "--config", str(config), "--manifest", m]) == 0
        assert main(["wave", "--wave", "0", "--config", str(config), "--seed", "6", "--manifest", m]) == 2
        with pytest.raises(pipeline.ConfigError):
            pipeline.Run(m, pipeline.load_config(str(config), seed=6))

    def test_invalid_config(self, tmp_path):
        config = _write_config(tmp_path / "c.json", discrepancy=[0.0, 1, 1, 1])
        assert main(["synthesize-target", "--config", str(config), "--manifest", str(tmp_path / "m.json")]) == 2
        (tmp_path / "broken.json").write_text("{")
        assert main(["synthesize-target", "--config", str(tmp_path / "broken.json"),
                     "--manifest", str(tmp_path / "m2.json")]) == 2

    def test_append_only_guard(self, tmp_path):
        run = pipeline.Run(tmp_path / "manifest.json", pipeline.load_config())
        run.write("a.txt", b"one")
        run.write("a.txt", b"one")
        with pytest.raises(pipeline.ArtifactError):
            run.write("a.txt", b"two")

    def test_numerical_failure_exit_code(self, tmp_path, monkeypatch):
        from nhmcal.emulator import EmulatorError

        config = _write_config(tmp_path / "c.json")
        m = str(tmp_path / "run" / "manifest.json")
        for step in STEPS[:3]:
            assert main([*step, "--config", str(config), "--manifest", m]) == 0

        def boom(*args, **kwargs):
            raise EmulatorError("covariance is not positive definite")

        monkeypatch.setattr(pipeline.LikelihoodEmulator, "fit", boom)
        assert main(["emulate", "--manifest", m]) == 3


class TestTargets:
    def test_vacuous_threshold_keeps_region(self, tmp_path):
        config = _write_config(tmp_path / "c.json",
                               waves=[{"n_runs": 12, "log_ratio_threshold": -1e308, "restarts": 2}])
        m = tmp_path / "run" / "manifest.json"
        assert main(["synthesize-target", "--config", str(config), "--manifest", str(m)]) == 0
        assert main(["wave", "--wave", "0", "--manifest", str(m)]) == 0
        region_in = json.loads((m.parent / "wave0" / "region_in.json").read_text())
        region_out = json.loads((m.parent / "wave0" / "region.json").read_text())
        assert region_out == region_in

    def test_zero_susceptibility_truth(self, tmp_path):
        config = _write_config(tmp_path / "c.json", truth={"x_true": [20.0, 45.0, 0.0]})
        m = tmp_path / "run" / "manifest.json"
        assert main(["synthesize-target", "--config", str(config), "--manifest", str(m)]) == 0
        target = json.loads((m.parent / "target.json").read_text())
        for key in GROUP_LABELS:
            if key != "undetected_adenomas":
                assert np.sum(target[key]["z"]) == 0

    def test_perturbed_truth(self, tmp_path):
        config = _write_config(tmp_path / "c.json", truth={"lambda_true": [0.5, 0.5, 0.5, 0.5]})
        m = tmp_path / "run" / "manifest.json"
        assert main(["synthesize-target", "--config", str(config), "--manifest", str(m)]) == 0
        plain = _write_config(tmp_path / "p.json")
        m2 = tmp_path / "plain" / "manifest.json"
        assert main(["synthesize-target", "--config", str(plain), "--manifest", str(m2)]) == 0
        a = json.loads((m.parent / "target.json").read_text())
        b = json.loads((m2.parent / "target.json").read_text())
        # denominators are kept; counts are redrawn around perturbed proportions
        for key in GROUP_LABELS:
            assert a[key]["N"] == b[key]["N"]
        assert a["cases_by_age"]["z"] != b["cases_by_age"]["z"]
        assert np.sum(a["cases_by_type"]["z"]) == np.sum(b["cases_by_type"]["z"])


def test_seed_override_changes_hash():
    a = pipeline.load_config(seed=1)
    b = pipeline.load_config(seed=2)
    assert pipeline.config_hash(a) != pipeline.config_hash(b)
    assert pipeline.config_hash(a) == pipeline.config_hash(pipeline.load_config(seed=1))
