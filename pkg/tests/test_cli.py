"""End-to-end command-line flows on a small configuration."""

import contextlib
import io
import json
import os

import numpy as np
import pytest

import gues.saliency
import gues.verify
from gues.cli import main
from gues.data import read_image, write_image

SMALL = {
    "seed": 3,
    "n_source": 80,
    "n_target": 40,
    "epochs": 1,
    "batch_size": 8,
    "mode": "gues",
    "sweep_batch_sizes": [4, 8],
    "sweep_seeds": [0],
    "sweep_modes": ["tent", "gues"],
    "sweep_n_target": 16,
    "sweep_alphas": [0.9, 1.1],
    "sweep_betas": [1.0],
}

PIPELINE_ARTIFACTS = (
    "data/manifest.csv",
    "data/source_000000.ppm",
    "data/target_000119.ppm",
    "classifier.clsf",
    "train_metrics.csv",
    "adapt_gues/metrics.csv",
    "adapt_gues/aggregate.csv",
    "adapt_gues/losses.csv",
    "adapt_gues/generator.gues",
    "sweep_batch/sweep.csv",
    "sweep_batch/plot.svg",
    "sweep_alpha_beta/sweep.csv",
    "sweep_alpha_beta/plot.svg",
)


def run_cli(argv):
    out, err = io.StringIO(), io.StringIO()
    with contextlib.redirect_stdout(out), contextlib.redirect_stderr(err):
        code = main(argv)
    return code, out.getvalue(), err.getvalue()


def run_pipeline(config_path, out_dir):
    logs = {}
    for name, argv in (
            ("gen_data", ["gen-data"]),
            ("train", ["train-source"]),
            ("adapt", ["adapt"]),
            ("sweep_batch", ["sweep", "--axis", "batch"]),
            ("sweep_ab", ["sweep", "--axis", "alpha_beta"])):
        code, stdout, stderr = run_cli(argv + ["--config", str(config_path),
                                               "--out", str(out_dir)])
        assert code == 0, (name, stderr)
        logs[name] = stdout
    return logs


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    base = tmp_path_factory.mktemp("cli")
    config_path = base / "config.json"
    config_path.write_text(json.dumps(SMALL) + "\n")
    out_dir = base / "run"
    logs = run_pipeline(config_path, out_dir)
    return {"config": config_path, "out": out_dir, "logs": logs}


def test_pipeline_writes_all_artifacts(pipeline):
    for rel in PIPELINE_ARTIFACTS + ("config.json",):
        assert (pipeline["out"] / rel).exists(), rel


def test_pipeline_stdout_reports(pipeline):
    logs = pipeline["logs"]
    assert "wrote 80 source + 40 target images" in logs["gen_data"]
    assert "in-domain holdout: ACC" in logs["train"]
    assert "mode gues: 5 batches, aggregate ACC" in logs["adapt"]
    assert "alpha/beta AVG spread (max-min):" in logs["sweep_ab"]


def test_manifest_lists_every_rendered_file(pipeline):
    manifest = (pipeline["out"] / "data" / "manifest.csv").read_text()
    lines = manifest.strip().splitlines()
    assert lines[0] == "path,grade,domain_tag"
    assert len(lines) == 1 + 120
    assert sum(1 for l in lines[1:] if l.endswith(",target")) == 40


def test_sweep_csv_row_counts(pipeline):
    batch = (pipeline["out"] / "sweep_batch" / "sweep.csv").read_text()
    assert len(batch.strip().splitlines()) == 1 + 2 * 2 * 1
    grid = (pipeline["out"] / "sweep_alpha_beta" / "sweep.csv").read_text()
    assert len(grid.strip().splitlines()) == 1 + 2 * 1


def test_rerun_reproduces_artifacts_byte_for_byte(pipeline, tmp_path):
    rerun_dir = tmp_path / "rerun"
    run_pipeline(pipeline["config"], rerun_dir)
    for rel in PIPELINE_ARTIFACTS:
        first = (pipeline["out"] / rel).read_bytes()
        second = (rerun_dir / rel).read_bytes()
        assert first == second, rel


def test_adapt_mode_override(pipeline):
    code, stdout, _ = run_cli(["adapt", "--config", str(pipeline["config"]),
                               "--out", str(pipeline["out"]), "--mode", "tent"])
    assert code == 0
    run_dir = pipeline["out"] / "adapt_tent"
    assert (run_dir / "metrics.csv").exists()
    assert not (run_dir / "losses.csv").exists()
    assert not (run_dir / "generator.gues").exists()
    assert "mode tent:" in stdout


def test_default_config_renders_full_dataset(tmp_path):
    code, stdout, _ = run_cli(["gen-data", "--out", str(tmp_path / "full")])
    assert code == 0
    assert "wrote 2000 source + 1000 target images" in stdout
    lines = (tmp_path / "full" / "data" / "manifest.csv").read_text()
    assert len(lines.strip().splitlines()) == 1 + 3000


def test_epochs_zero_checkpoints_untrained_model(pipeline, tmp_path):
    out = tmp_path / "init"
    code, _, _ = run_cli(["gen-data", "--config", str(pipeline["config"]),
                          "--out", str(out)])
    assert code == 0
    code, _, stderr = run_cli(["train-source", "--config", str(pipeline["config"]),
                               "--out", str(out), "--epochs", "0"])
    assert code == 0, stderr
    assert (out / "classifier.clsf").exists()
    row = (out / "train_metrics.csv").read_text().strip().splitlines()[1]
    acc = float(row.split(",")[1])
    assert 0.0 <= acc <= 0.7          # untrained model, chance-level band


def test_missing_config_file_exits_3():
    code, _, stderr = run_cli(["gen-data", "--config", "/no/such/config.json"])
    assert code == 3
    assert "missing artifact" in stderr


def test_unknown_config_key_exits_2_and_names_it(tmp_path):
    path = tmp_path / "bad.json"
    path.write_text(json.dumps({"learning_rate": 0.1}))
    code, _, stderr = run_cli(["gen-data", "--config", str(path)])
    assert code == 2
    assert "learning_rate" in stderr


def test_unknown_mode_in_config_exits_2(tmp_path):
    path = tmp_path / "bad.json"
    path.write_text(json.dumps({"mode": "offline"}))
    code, _, stderr = run_cli(["adapt", "--config", str(path)])
    assert code == 2
    assert "offline" in stderr


def test_train_without_manifest_exits_3(tmp_path):
    code, _, stderr = run_cli(["train-source", "--out", str(tmp_path / "empty")])
    assert code == 3
    assert "dataset manifest" in stderr


def test_adapt_without_classifier_exits_3(tmp_path):
    code, _, stderr = run_cli(["adapt", "--out", str(tmp_path / "empty")])
    assert code == 3
    assert "classifier checkpoint" in stderr


def test_saliency_command_writes_p5(pipeline, tmp_path):
    src = pipeline["out"] / "data" / "source_000000.ppm"
    dst = tmp_path / "sal.pgm"
    code, stdout, _ = run_cli(["saliency", str(src), str(dst)])
    assert code == 0
    assert dst.read_bytes().startswith(b"P5\n")
    sal = read_image(str(dst))
    assert sal.ndim == 2
    assert sal.min() >= 0.0 and sal.max() <= 1.0


def test_saliency_missing_input_exits_3(tmp_path):
    code, _, stderr = run_cli(["saliency", str(tmp_path / "none.ppm"),
                               str(tmp_path / "out.pgm")])
    assert code == 3


def test_saliency_rejects_grayscale_input(tmp_path):
    gray = tmp_path / "gray.pgm"
    write_image(str(gray), np.zeros((8, 8)))
    code, _, stderr = run_cli(["saliency", str(gray), str(tmp_path / "out.pgm")])
    assert code == 2
    assert "3-channel" in stderr


def test_verify_battery_passes():
    code, stdout, _ = run_cli(["verify"])
    assert code == 0
    assert "all 7 checks passed" in stdout
    for name in ("saliency-oracle", "saliency-analytic", "primitive-gradients",
                 "end-to-end-gradient", "kl-analytic", "qwk-analytic",
                 "determinism"):
        assert name in stdout


def test_verify_failure_exit_code(monkeypatch):
    monkeypatch.setattr("gues.cli.run_checks",
                        lambda deep=False: [("saliency-oracle", False, "forced")])
    code, stdout, _ = run_cli(["verify"])
    assert code == 4
    assert "1 of 1 checks failed" in stdout


def test_tampered_saliency_kernel_flips_oracle_check(monkeypatch):
    original = gues.saliency._clamped_center_excess

    def skewed(gray, scale):
        return original(gray, scale) * 0.999

    monkeypatch.setattr(gues.saliency, "_clamped_center_excess", skewed)
    passed, detail = gues.verify._check_saliency_oracle()
    assert passed is False
    assert "deviates" in detail
