"""
End-to-end tests of the command-line interface on a tiny phantom cohort.
"""

from __future__ import annotations

import os
import sys
from pathlib import Path

import pytest
from click.testing import CliRunner

PROJECT_ROOT = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))
if PROJECT_ROOT not in sys.path:
    sys.path.insert(0, PROJECT_ROOT)

from Source.data import VolumeRecord, load_manifest, save_manifest
from Source.main import EXIT_VALIDATION, cli, main

CONFIG = """\
model:
  preset: InfoVAE-best
  latent_dim: 4
  input_extent: 8
  channels: [2, 3]
training:
  iterations: 3
  log_every: 0
data:
  root: {root}
  n_subjects: 12
  max_sessions: 2
  extent: 8
  with_sdmt: {with_sdmt}
analysis:
  folds: 3
outputs:
  dir: runs
seed: 5
"""


def invoke(*args: str):
    return CliRunner().invoke(cli, ["--no-spinner", *args], catch_exceptions=False)


@pytest.fixture(scope="module")
def workspace(tmp_path_factory) -> Path:
    """Generated, split and trained cohort shared by the tests below."""
    root = tmp_path_factory.mktemp("cli")
    (root / "exp.yaml").write_text(CONFIG.format(root="cohort", with_sdmt="true"))
    assert invoke("gen-data", "--config", str(root / "exp.yaml")).exit_code == 0
    manifest = root / "cohort" / "manifest.csv"
    assert invoke("split", "--manifest", str(manifest), "--seed", "5").exit_code == 0
    result = invoke("train", "--config", str(root / "exp.yaml"))
    assert result.exit_code == 0, result.output
    return root


def test_gen_data_and_split_outputs(workspace: Path) -> None:
    cohort = workspace / "cohort"
    assert (cohort / "generator_spec.yaml").is_file()
    lines = [len((cohort / f"manifest_{n}.csv").read_text().splitlines()) - 1 for n in ("train", "val", "test")]
    assert all(n >= 1 for n in lines)
    assert sum(lines) == len((cohort / "manifest.csv").read_text().splitlines()) - 1


def test_train_writes_checkpoint_and_log(workspace: Path) -> None:
    runs = workspace / "runs"
    assert (runs / "model.lvw").read_bytes()[:4] == b"LVW1"
    assert len((runs / "loss_log.csv").read_text().splitlines()) == 1 + 3


def test_training_rerun_is_byte_identical(workspace: Path, tmp_path: Path) -> None:
    runs = workspace / "runs"
    before = (runs / "model.lvw").read_bytes(), (runs / "loss_log.csv").read_bytes()
    assert invoke("train", "--config", str(workspace / "exp.yaml")).exit_code == 0
    assert ((runs / "model.lvw").read_bytes(), (runs / "loss_log.csv").read_bytes()) == before


def test_embed_regress_project_eval(workspace: Path) -> None:
    cohort, runs = workspace / "cohort", workspace / "runs"
    ckpt = str(runs / "model.lvw")
    for name, manifest in (("train", "manifest_train.csv"), ("all", "manifest.csv")):
        result = invoke("embed", "--checkpoint", ckpt, "--manifest", str(cohort / manifest), "--output", str(runs / f"{name}.csv"))
        assert result.exit_code == 0, result.output
    sessions = len((cohort / "manifest.csv").read_text().splitlines()) - 1
    latents = (runs / "all.csv").read_text().splitlines()
    assert len(latents) == sessions + 1
    assert latents[0] == "record_id,z0,z1,z2,z3"

    result = invoke(
        "regress", "--latents", str(runs / "train.csv"), "--test-latents", str(runs / "all.csv"),
        "--manifest", str(cohort / "manifest.csv"), "--target", "age", "--output", str(runs / "age.csv"),
        "--config", str(workspace / "exp.yaml"),
    )
    assert result.exit_code == 0, result.output
    assert (runs / "age.csv").read_text().startswith("target,kernel,c,epsilon,mae,r2,rmse\nage,")

    for method in ("pca", "pls"):
        result = invoke(
            "project", "--latents", str(runs / "all.csv"), "--manifest", str(cohort / "manifest.csv"),
            "--method", method, "--output", str(runs / f"{method}.csv"),
        )
        assert result.exit_code == 0, result.output
        assert len((runs / f"{method}.csv").read_text().splitlines()) == sessions + 1

    result = invoke("eval-recon", "--checkpoint", ckpt, "--manifest", str(cohort / "manifest_test.csv"), "--output", str(runs / "recon.csv"))
    assert result.exit_code == 0, result.output
    assert (runs / "recon.csv").read_text().splitlines()[-1].startswith("mean,")


def test_missing_sdmt_exits_two_without_output(workspace: Path, tmp_path: Path) -> None:
    (tmp_path / "hc.yaml").write_text(CONFIG.format(root="hc", with_sdmt="false"))
    assert invoke("gen-data", "--config", str(tmp_path / "hc.yaml")).exit_code == 0
    manifest = tmp_path / "hc" / "manifest.csv"
    latents = tmp_path / "hc.csv"
    ckpt = str(workspace / "runs" / "model.lvw")
    assert invoke("embed", "--checkpoint", ckpt, "--manifest", str(manifest), "--output", str(latents)).exit_code == 0

    report = tmp_path / "sdmt.csv"
    result = invoke(
        "regress", "--latents", str(latents), "--test-latents", str(latents),
        "--manifest", str(manifest), "--target", "sdmt", "--output", str(report),
    )
    assert result.exit_code == EXIT_VALIDATION
    assert "sdmt" in result.output
    assert not report.exists()


def relabeled_cohort(workspace: Path, target: Path, sessions_per_subject: int, ages) -> Path:
    """Re-group the generated volumes into subjects with the given per-session ages."""
    cohort = workspace / "cohort"
    source = load_manifest(cohort / "manifest.csv")[:12]
    records = []
    for i, rec in enumerate(source):
        subject, session = divmod(i, sessions_per_subject)
        records.append(VolumeRecord(
            f"s{subject:02d}", f"ses{session}", str((cohort / rec.path).resolve()), ages(subject, session), None, rec.sex,
        ))
    target.mkdir(parents=True, exist_ok=True)
    save_manifest(records, target / "manifest.csv")
    (target / "exp.yaml").write_text(CONFIG.format(root=str(target), with_sdmt="false"))
    return target


def test_compare_tabulates_each_preset(workspace: Path, tmp_path: Path) -> None:
    root = relabeled_cohort(workspace, tmp_path / "paired", 2, lambda subject, session: 20.0 + 9.0 * subject + session)
    out = tmp_path / "reports" / "comparison.csv"
    result = invoke("compare", "--config", str(root / "exp.yaml"), "--presets", "InfoVAE-best,AE", "--output", str(out))
    assert result.exit_code == 0, result.output
    lines = out.read_text().splitlines()
    assert lines[0] == "preset,alpha,beta,ssim,psnr,mae,r2,rmse"
    assert [line.split(",")[0] for line in lines[1:]] == ["InfoVAE-best", "AE"]
    assert (out.parent / "compare" / "AE.lvw").read_bytes()[:4] == b"LVW1"


def test_compare_without_age_spread_exits_two_before_training(workspace: Path, tmp_path: Path) -> None:
    root = relabeled_cohort(workspace, tmp_path / "flat", 1, lambda subject, session: 40.0)
    out = tmp_path / "reports" / "comparison.csv"
    result = invoke("compare", "--config", str(root / "exp.yaml"), "--presets", "VAE", "--output", str(out))
    assert result.exit_code == EXIT_VALIDATION
    assert "no age spread" in result.output
    assert not out.exists()
    assert not (out.parent / "compare").exists()


def test_bad_config_key_exits_two(tmp_path: Path) -> None:
    path = tmp_path / "bad.yaml"
    path.write_text("training:\n  iters: 3\n")
    result = invoke("train", "--config", str(path))
    assert result.exit_code == EXIT_VALIDATION
    assert "training.iters" in result.output


def test_main_returns_usage_code(tmp_path: Path) -> None:
    assert main(["split", "--manifest", str(tmp_path / "missing.csv")]) == 2
