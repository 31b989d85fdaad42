"""
Reconstruction and regression metrics.

SSIM is volumetric: uniform cubic windows, stride 1, valid positions only.
PSNR of identical volumes is reported as +inf rather than a capped value.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, List, Sequence, Union

import numpy as np
from scipy.ndimage import uniform_filter

from .errors import ValidationError


@dataclass(frozen=True, slots=True)
class SsimConfig:
    window_extent: int = 7
    k1: float = 0.01
    k2: float = 0.03
    dynamic_range: float = 1.0

    def __post_init__(self) -> None:
        if self.window_extent < 1 or self.window_extent % 2 == 0:
            raise ValidationError(f"window_extent must be odd and positive, got {self.window_extent}")
        if self.dynamic_range <= 0:
            raise ValidationError(f"dynamic_range must be positive, got {self.dynamic_range}")


def _pair(name: str, a: np.ndarray, b: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValidationError(f"{name}: shape mismatch {a.shape} vs {b.shape}")
    if a.size == 0:
        raise ValidationError(f"{name}: empty input")
    return a, b


def psnr(a: np.ndarray, b: np.ndarray, max_val: float = 1.0) -> float:
    """Peak signal-to-noise ratio in dB; +inf when the volumes are identical."""
    if max_val <= 0:
        raise ValidationError(f"psnr: max_val must be positive, got {max_val}")
    a, b = _pair("psnr", a, b)
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(max_val * max_val / mse)


def ssim3d(a: np.ndarray, b: np.ndarray, cfg: SsimConfig = SsimConfig()) -> float:
    """Mean SSIM over every valid window position."""
    a, b = _pair("ssim3d", a, b)
    w = cfg.window_extent
    if min(a.shape) < w:
        raise ValidationError(f"ssim3d: volume {a.shape} is smaller than the {w}^{a.ndim} window")
    c1 = (cfg.k1 * cfg.dynamic_range) ** 2
    c2 = (cfg.k2 * cfg.dynamic_range) ** 2

    r = w // 2
    valid = tuple(slice(r, n - r) for n in a.shape)

    def local_mean(v: np.ndarray) -> np.ndarray:
        return uniform_filter(v, size=w, mode="constant")[valid]

    mu_a, mu_b = local_mean(a), local_mean(b)
    var_a = local_mean(a * a) - mu_a * mu_a
    var_b = local_mean(b * b) - mu_b * mu_b
    cov = local_mean(a * b) - mu_a * mu_b

    numerator = (2.0 * mu_a * mu_b + c1) * (2.0 * cov + c2)
    denominator = (mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2)
    return float(np.mean(numerator / denominator))


def _targets(name: str, y: Sequence[float], yhat: Sequence[float]) -> tuple[np.ndarray, np.ndarray]:
    y = np.asarray(y, dtype=np.float64).ravel()
    yhat = np.asarray(yhat, dtype=np.float64).ravel()
    if y.size == 0 or y.size != yhat.size:
        raise ValidationError(f"{name}: need equal non-zero lengths, got {y.size} and {yhat.size}")
    return y, yhat


def mae(y: Sequence[float], yhat: Sequence[float]) -> float:
    y, yhat = _targets("mae", y, yhat)
    return float(np.mean(np.abs(y - yhat)))


def rmse(y: Sequence[float], yhat: Sequence[float]) -> float:
    y, yhat = _targets("rmse", y, yhat)
    return float(np.sqrt(np.mean((y - yhat) ** 2)))


def r2(y: Sequence[float], yhat: Sequence[float]) -> float:
    y, yhat = _targets("r2", y, yhat)
    ss_tot = float(np.sum((y - y.mean()) ** 2))
    if ss_tot == 0.0:
        raise ValidationError("r2: target has zero variance")
    return 1.0 - float(np.sum((y - yhat) ** 2)) / ss_tot


@dataclass(frozen=True, slots=True)
class RegressionScores:
    mae: float
    r2: float
    rmse: float


def regression_scores(y: Sequence[float], yhat: Sequence[float]) -> RegressionScores:
    return RegressionScores(mae=mae(y, yhat), r2=r2(y, yhat), rmse=rmse(y, yhat))


@dataclass(frozen=True, slots=True)
class ReconstructionRow:
    record_id: str
    psnr: float
    ssim: float


@dataclass(frozen=True)
class ReconstructionReport:
    rows: List[ReconstructionRow]
    mean_psnr: float
    mean_ssim: float
    window_extent: int


def evaluate_reconstructions(
    record_ids: Iterable[str],
    originals: np.ndarray,
    reconstructions: np.ndarray,
    cfg: SsimConfig = SsimConfig(),
    max_val: float = 1.0,
) -> ReconstructionReport:
    """Per-volume PSNR/SSIM plus dataset means (sum then divide once)."""
    rows = [
        ReconstructionRow(rid, psnr(a, b, max_val), ssim3d(a, b, cfg))
        for rid, a, b in zip(record_ids, originals, reconstructions)
    ]
    if not rows:
        raise ValidationError("evaluate_reconstructions: no volumes to evaluate")
    mean_psnr = math.fsum(r.psnr for r in rows) / len(rows)
    mean_ssim = math.fsum(r.ssim for r in rows) / len(rows)
    return ReconstructionReport(rows, mean_psnr, mean_ssim, cfg.window_extent)


def _fmt(value: float) -> str:
    return "inf" if math.isinf(value) else repr(value)


def write_reconstruction_report(report: ReconstructionReport, path: Union[str, Path]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(["record_id", "psnr", "ssim"])
        for row in report.rows:
            writer.writerow([row.record_id, _fmt(row.psnr), _fmt(row.ssim)])
        writer.writerow(["mean", _fmt(report.mean_psnr), _fmt(report.mean_ssim)])
