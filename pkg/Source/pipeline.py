"""
End-to-end experiment pipeline.

`ExperimentPipeline` owns one ExperimentConfig and exposes one method per
command: generate data, split, train, embed, evaluate reconstructions,
regress, project and compare presets. Every method is a pure function of
(config, input files, seed) and writes its outputs with repr-formatted
floats so re-runs are byte-identical.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.stats import spearmanr

from . import data as data_io
from .config import ExperimentConfig
from .data import VolumeRecord
from .errors import ValidationError
from .latent_analysis import (
    ProjectionMatrix,
    RegressionReport,
    evaluate_regression,
    pca_fit,
    pls_fit,
    project,
    write_projection,
    write_regression_report,
)
from .metrics import ReconstructionReport, SsimConfig, evaluate_reconstructions, write_reconstruction_report
from .training import LossRecord, Trainer, write_loss_log
from .vae3d import Vae3D, load_checkpoint, save_checkpoint

TARGETS = ("age", "sdmt", "sex")
PROJECTION_TARGETS = TARGETS + ("age+sdmt",)
COMPARISON_HEADER = ("preset", "alpha", "beta", "ssim", "psnr", "mae", "r2", "rmse")


def target_values(records: Sequence[VolumeRecord], target: str) -> np.ndarray:
    """Label column for `target`; a missing sdmt anywhere is a validation error."""
    if target not in TARGETS:
        raise ValidationError(f"unknown target '{target}'; expected one of {TARGETS}")
    if target == "sdmt":
        missing = [r.record_id for r in records if r.sdmt is None]
        if missing:
            raise ValidationError(
                f"target 'sdmt' is absent for {len(missing)} of {len(records)} records (first: {missing[0]})"
            )
    return np.array([float(getattr(r, target)) for r in records])


def ssim_config(extent: int, window: int = 7) -> SsimConfig:
    """Largest odd window not exceeding `window` that fits the volume."""
    w = min(window, extent)
    return SsimConfig(window_extent=w if w % 2 else w - 1)


def write_latents(path: Path, record_ids: Sequence[str], z: np.ndarray) -> None:
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(["record_id"] + [f"z{j}" for j in range(z.shape[1])])
        for rid, row in zip(record_ids, z):
            writer.writerow([rid] + [repr(float(v)) for v in row])


def read_latents(path: Path) -> Tuple[List[str], np.ndarray]:
    ids: List[str] = []
    rows: List[List[float]] = []
    with open(path, newline="", encoding="utf-8") as f:
        reader = csv.reader(f)
        header = next(reader, None)
        if not header or header[0] != "record_id" or len(header) < 3:
            raise ValidationError(f"{path}:1: expected header record_id,z0,z1,...")
        for row in reader:
            if not row:
                continue
            if len(row) != len(header):
                raise ValidationError(f"{path}:{reader.line_num}: expected {len(header)} fields, got {len(row)}")
            try:
                rows.append([float(v) for v in row[1:]])
            except ValueError as exc:
                raise ValidationError(f"{path}:{reader.line_num}: {exc}") from None
            ids.append(row[0])
    if not ids:
        raise ValidationError(f"{path}: no latent rows")
    return ids, np.array(rows)


def records_for(ids: Sequence[str], records: Sequence[VolumeRecord], source: Path) -> List[VolumeRecord]:
    by_id = {r.record_id: r for r in records}
    missing = [i for i in ids if i not in by_id]
    if missing:
        raise ValidationError(f"{source}: no manifest entry for {len(missing)} latent rows (first: {missing[0]})")
    return [by_id[i] for i in ids]


@dataclass(frozen=True)
class TrainingResult:
    model: Vae3D
    history: List[LossRecord]
    checkpoint: Path
    loss_log: Path


@dataclass(frozen=True)
class ProjectionResult:
    projection: ProjectionMatrix
    coords: np.ndarray
    spearman: Optional[float]


@dataclass(frozen=True)
class ComparisonRow:
    preset: str
    alpha: float
    beta: float
    ssim: float
    psnr: float
    mae: float
    r2: float
    rmse: float


class ExperimentPipeline:
    """Runs experiment commands against a single configuration."""

    def __init__(self, config: ExperimentConfig):
        self.config = config
        self._log = logging.getLogger(self.__class__.__name__)

    # ----- Data -----
    def generate_data(self) -> List[VolumeRecord]:
        d = self.config.data
        return data_io.generate_cohort(
            d.root,
            n_subjects=d.n_subjects,
            max_sessions=d.max_sessions,
            extent=d.extent,
            noise_sigma=d.noise_sigma,
            seed=self.config.seed,
            with_sdmt=d.with_sdmt,
            workers=d.workers,
        )

    def split(self, manifest: Path, seed: int, out_dir: Optional[Path] = None) -> Dict[str, Path]:
        records = data_io.load_manifest(manifest)
        result = data_io.group_split(records, seed=seed)
        out_dir = out_dir or manifest.parent
        paths: Dict[str, Path] = {}
        for name, part in zip(data_io.SPLIT_NAMES, result.parts()):
            paths[name] = out_dir / f"{manifest.stem}_{name}{manifest.suffix}"
            data_io.save_manifest(part, paths[name])
        self._log.info("split %d sessions into %s", len(records), {k: str(v) for k, v in paths.items()})
        return paths

    def load_split(self, manifest: Path) -> Tuple[List[VolumeRecord], np.ndarray]:
        records = data_io.load_manifest(manifest)
        if not records:
            raise ValidationError(f"{manifest}: manifest has no records")
        volumes = data_io.load_volumes(records, manifest.parent, self.config.model.input_extent)
        return records, volumes

    # ----- Model -----
    def train(
        self,
        manifest: Optional[Path] = None,
        preset_name: Optional[str] = None,
        checkpoint: Optional[Path] = None,
        loss_log: Optional[Path] = None,
        callback: Optional[Callable[[LossRecord], None]] = None,
    ) -> TrainingResult:
        cfg = self.config
        manifest = manifest or self._train_manifest()
        _, volumes = self.load_split(manifest)
        model_cfg = cfg.model_config(preset_name)
        model = Vae3D(model_cfg)
        trainer = Trainer(
            model,
            kernel=cfg.model.kernel(),
            learning_rate=cfg.training.learning_rate,
            batch_size=cfg.training.batch_size,
            seed=cfg.seed,
        )
        self._log.info(
            "training alpha=%g beta=%g d=%d on %d volumes for %d iterations",
            model_cfg.alpha, model_cfg.beta, model_cfg.latent_dim, len(volumes), cfg.training.iterations,
        )
        history = trainer.fit(volumes, cfg.training.iterations, cfg.training.log_every, callback)
        checkpoint = checkpoint or cfg.outputs.resolved("checkpoint", "model.lvw")
        loss_log = loss_log or cfg.outputs.resolved("loss_log", "loss_log.csv")
        checkpoint.parent.mkdir(parents=True, exist_ok=True)
        loss_log.parent.mkdir(parents=True, exist_ok=True)
        save_checkpoint(model, checkpoint)
        write_loss_log(history, loss_log)
        return TrainingResult(model, history, checkpoint, loss_log)

    def _train_manifest(self) -> Path:
        split = self.config.data.split_manifest("train")
        return split if split.is_file() else self.config.data.manifest_path

    def embed(self, checkpoint: Path, manifest: Path, output: Path) -> np.ndarray:
        """Posterior means, one row per session."""
        model = load_checkpoint(checkpoint)
        records = data_io.load_manifest(manifest)
        volumes = data_io.load_volumes(records, manifest.parent, model.config.input_extent)
        z = model.embed(volumes)
        output.parent.mkdir(parents=True, exist_ok=True)
        write_latents(output, [r.record_id for r in records], z)
        self._log.info("wrote %d x %d latent means to %s", z.shape[0], z.shape[1], output)
        return z

    def eval_recon(self, checkpoint: Path, manifest: Path, output: Path, window: int = 7) -> ReconstructionReport:
        model = load_checkpoint(checkpoint)
        records = data_io.load_manifest(manifest)
        volumes = data_io.load_volumes(records, manifest.parent, model.config.input_extent)
        report = evaluate_reconstructions(
            [r.record_id for r in records],
            volumes,
            model.reconstruct(volumes),
            ssim_config(model.config.input_extent, window),
        )
        output.parent.mkdir(parents=True, exist_ok=True)
        write_reconstruction_report(report, output)
        return report

    # ----- Downstream -----
    def regress(
        self,
        latents: Path,
        test_latents: Path,
        manifest: Path,
        target: str,
        output: Path,
    ) -> RegressionReport:
        all_records = data_io.load_manifest(manifest)
        train_ids, z_train = read_latents(latents)
        test_ids, z_test = read_latents(test_latents)
        y_train = target_values(records_for(train_ids, all_records, latents), target)
        y_test = target_values(records_for(test_ids, all_records, test_latents), target)
        a = self.config.analysis
        report = evaluate_regression(
            z_train, y_train, z_test, y_test, target,
            c_grid=a.c_grid, kernels=a.kernels, folds=a.folds, seed=self.config.seed, epsilon=a.epsilon,
            workers=a.workers,
        )
        output.parent.mkdir(parents=True, exist_ok=True)
        write_regression_report(report, output)
        return report

    def project(self, latents: Path, manifest: Path, method: str, target: str, output: Path) -> ProjectionResult:
        if method not in ("pca", "pls"):
            raise ValidationError(f"unknown projection method '{method}'; expected pca or pls")
        if target not in PROJECTION_TARGETS:
            raise ValidationError(f"unknown target '{target}'; expected one of {PROJECTION_TARGETS}")
        ids, z = read_latents(latents)
        records = records_for(ids, data_io.load_manifest(manifest), latents)
        names = target.split("+")
        y = np.column_stack([target_values(records, n) for n in names])
        projection = pca_fit(z, seed=self.config.seed) if method == "pca" else pls_fit(z, y)
        coords = project(z, projection)
        rho: Optional[float] = None
        if np.ptp(y[:, 0]) > 0 and np.ptp(coords[:, 0]) > 0:
            rho = float(spearmanr(coords[:, 0], y[:, 0]).correlation)
            self._log.info("%s component 1 vs %s: Spearman %.3f", method, names[0], rho)
        output.parent.mkdir(parents=True, exist_ok=True)
        write_projection(output, ids, coords, [r.age for r in records], [r.sdmt for r in records], [r.sex for r in records])
        return ProjectionResult(projection, coords, rho)

    # ----- Preset comparison -----
    def compare(self, presets: Sequence[str], output: Path, workdir: Optional[Path] = None) -> List[ComparisonRow]:
        """Train each preset on one subject-grouped split and score it on the test part."""
        records = data_io.load_manifest(self.config.data.manifest_path)
        split = data_io.group_split(records, seed=self.config.seed)
        for part, part_records in (("train", split.train), ("test", split.test)):
            ages = target_values(part_records, "age")
            if len(ages) < 2 or np.ptp(ages) == 0:
                raise ValidationError(
                    f"compare: no age spread in the {part} split ({len(ages)} sessions); use a larger cohort"
                )
        base = self.config.data.manifest_path.parent
        extent = self.config.model.input_extent
        train_vols = data_io.load_volumes(split.train, base, extent)
        test_vols = data_io.load_volumes(split.test, base, extent)
        workdir = workdir or output.parent / "compare"
        workdir.mkdir(parents=True, exist_ok=True)
        train_manifest = workdir / "train.csv"
        data_io.save_manifest([self._absolute(r, base) for r in split.train], train_manifest)

        rows: List[ComparisonRow] = []
        for name in presets:
            result = self.train(
                manifest=train_manifest,
                preset_name=name,
                checkpoint=workdir / f"{name}.lvw",
                loss_log=workdir / f"{name}_loss.csv",
            )
            model = result.model
            recon = evaluate_reconstructions(
                [r.record_id for r in split.test], test_vols, model.reconstruct(test_vols), ssim_config(extent)
            )
            a = self.config.analysis
            report = evaluate_regression(
                model.embed(train_vols), target_values(split.train, "age"),
                model.embed(test_vols), target_values(split.test, "age"), "age",
                c_grid=a.c_grid, kernels=a.kernels, folds=a.folds, seed=self.config.seed, epsilon=a.epsilon,
                workers=a.workers,
            )
            rows.append(ComparisonRow(
                name, model.config.alpha, model.config.beta, recon.mean_ssim, recon.mean_psnr,
                report.scores.mae, report.scores.r2, report.scores.rmse,
            ))
            self._log.info("%s: ssim=%.4f psnr=%.2f age r2=%.3f", name, recon.mean_ssim, recon.mean_psnr, report.scores.r2)

        output.parent.mkdir(parents=True, exist_ok=True)
        write_comparison(rows, output)
        return rows

    @staticmethod
    def _absolute(record: VolumeRecord, base: Path) -> VolumeRecord:
        path = Path(record.path)
        if path.is_absolute():
            return record
        return VolumeRecord(record.subject_id, record.session_id, str((base / path).resolve()),
                            record.age, record.sdmt, record.sex)


def write_comparison(rows: Sequence[ComparisonRow], path: Path) -> None:
    def fmt(v: float) -> str:
        return "inf" if math.isinf(v) else repr(float(v))

    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(COMPARISON_HEADER)
        for r in rows:
            writer.writerow([r.preset, fmt(r.alpha), fmt(r.beta), fmt(r.ssim), fmt(r.psnr), fmt(r.mae), fmt(r.r2), fmt(r.rmse)])
