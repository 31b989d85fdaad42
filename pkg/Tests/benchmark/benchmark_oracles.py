#!/usr/bin/env python3
"""
Randomised oracle sweeps with timings.

Each check repeats a unit-test oracle over many random instances:
information decomposition, MMD calibration, SVR against a dense QP solver,
PCA against a symmetric eigensolver, metric loop oracles and split
partitioning across seeds.
"""

import json
import math
import os
import sys
import time
from dataclasses import asdict, dataclass
from datetime import datetime
from typing import Callable, List, Tuple

import numpy as np
from scipy.optimize import minimize

# Add project root to path for imports
sys.path.append(os.path.dirname(os.path.dirname(os.path.dirname(os.path.abspath(__file__)))))

from Source.data import VolumeRecord, group_split
from Source.latent_analysis import KernelSpec, pca_fit, pls_fit, svr_fit, svr_predict
from Source.metrics import mae, psnr, r2, rmse, ssim3d, SsimConfig
from Source.objectives import KernelConfig, mi_decomposition_oracle, mmd


@dataclass
class OracleResult:
    name: str
    instances: int
    worst: float
    limit: float
    seconds: float

    @property
    def passed(self) -> bool:
        return self.worst < self.limit


def decomposition_identity(rng: np.random.Generator) -> Tuple[int, float]:
    worst = 0.0
    for _ in range(200):
        nx, nz = rng.integers(2, 17, size=2)
        joint = rng.random((nx, nz)) ** 2
        joint /= joint.sum()
        prior = rng.random(nz) + 0.01
        prior /= prior.sum()
        r = mi_decomposition_oracle(joint, prior)
        worst = max(worst, abs(r.expected_kl - (r.mi + r.kl_aggregate)))
    return 200, worst


def mmd_calibration(rng: np.random.Generator) -> Tuple[int, float]:
    """Returns |mean| / standard error of the unbiased estimator (must stay below 3)."""
    unbiased = KernelConfig(estimator="unbiased")
    values, negatives = [], 0
    for _ in range(100):
        a, b = rng.standard_normal((256, 4)), rng.standard_normal((256, 4))
        values.append(mmd(a, b, unbiased).item())
        negatives += mmd(a, b).item() < 0
    values = np.array(values)
    z = abs(values.mean()) / (values.std(ddof=1) / math.sqrt(len(values)))
    analytic = abs(mmd(np.array([[0.0]]), np.array([[1.0]])).item() - (2 - 2 * math.exp(-0.5)))
    return 100, z + (math.inf if negatives or analytic > 1e-10 else 0.0)


def svr_against_qp(rng: np.random.Generator) -> Tuple[int, float]:
    worst = 0.0
    for _ in range(20):
        n, d = int(rng.integers(4, 13)), int(rng.integers(1, 4))
        z = rng.standard_normal((n, d))
        y = z @ rng.standard_normal(d) + 0.3 * rng.standard_normal(n)
        model = svr_fit(z, y, c=1.0, kernel="rbf", epsilon=0.1)
        zs = (z - z.mean(axis=0)) / z.std(axis=0)
        ys = (y - y.mean()) / y.std()
        sign = np.concatenate([np.ones(n), -np.ones(n)])
        idx = np.concatenate([np.arange(n), np.arange(n)])
        q = np.outer(sign, sign) * KernelSpec("rbf").matrix(zs, zs)[np.ix_(idx, idx)]
        p = np.concatenate([0.1 - ys, 0.1 + ys])
        oracle = minimize(
            lambda b: 0.5 * b @ q @ b + p @ b, np.zeros(2 * n), jac=lambda b: q @ b + p,
            bounds=[(0.0, 1.0)] * (2 * n),
            constraints=[{"type": "eq", "fun": lambda b: sign @ b, "jac": lambda b: sign}],
            method="SLSQP", options={"ftol": 1e-14, "maxiter": 2000},
        )
        worst = max(worst, abs(model.dual_objective - oracle.fun), model.kkt_violation)
    x = np.arange(-2.0, 3.0)[:, None]
    line = svr_fit(x, 2.0 * x.ravel(), c=10.0, kernel="linear", epsilon=0.01)
    slope = float(np.diff(svr_predict(line, np.array([[0.0], [1.0]])))[0])
    slope_error = abs(slope - 2.0) / 2.0
    return 20, worst if slope_error <= 0.01 else math.inf


def pca_against_eigh(rng: np.random.Generator) -> Tuple[int, float]:
    worst = 0.0
    for _ in range(20):
        z = rng.standard_normal((10, 6)) * np.linspace(3.0, 0.2, 6)
        proj = pca_fit(z)
        values, vectors = np.linalg.eigh(np.cov(z, rowvar=False))
        for k in range(2):
            worst = max(worst, abs(proj.explained_variance[k] - values[-1 - k]))
            worst = max(worst, abs(abs(proj.w[:, k] @ vectors[:, -1 - k]) - 1.0))
        y = z @ rng.standard_normal(6)
        w1 = pls_fit(z, y).w[:, 0]
        direction = (z - z.mean(axis=0)).T @ (y - y.mean())
        cosine = abs(w1 @ direction) / (np.linalg.norm(w1) * np.linalg.norm(direction))
        if 1 - cosine >= 1e-6:
            return 20, math.inf
    return 20, worst


def metric_loops(rng: np.random.Generator) -> Tuple[int, float]:
    worst = 0.0
    cfg = SsimConfig(window_extent=3)
    for _ in range(50):
        a, b = rng.random((5, 5, 5)), rng.random((5, 5, 5))
        mse = sum((a[i, j, k] - b[i, j, k]) ** 2 for i in range(5) for j in range(5) for k in range(5)) / 125
        worst = max(worst, abs(psnr(a, b) - 10 * math.log10(1 / mse)))
        windows = []
        for i in range(3):
            for j in range(3):
                for k in range(3):
                    pa, pb = a[i:i + 3, j:j + 3, k:k + 3], b[i:i + 3, j:j + 3, k:k + 3]
                    ma, mb = pa.mean(), pb.mean()
                    cov = ((pa - ma) * (pb - mb)).mean()
                    windows.append(((2 * ma * mb + 1e-4) * (2 * cov + 9e-4))
                                   / ((ma * ma + mb * mb + 1e-4) * (pa.var() + pb.var() + 9e-4)))
        worst = max(worst, abs(ssim3d(a, b, cfg) - float(np.mean(windows))))
        y, yhat = rng.normal(size=9), rng.normal(size=9)
        loop_mae = sum(abs(u - v) for u, v in zip(y, yhat)) / 9
        loop_rmse = math.sqrt(sum((u - v) ** 2 for u, v in zip(y, yhat)) / 9)
        ybar = sum(y) / 9
        loop_r2 = 1 - sum((u - v) ** 2 for u, v in zip(y, yhat)) / sum((u - ybar) ** 2 for u in y)
        worst = max(worst, abs(mae(y, yhat) - loop_mae), abs(rmse(y, yhat) - loop_rmse), abs(r2(y, yhat) - loop_r2))
        if rmse(y, yhat) < mae(y, yhat) or ssim3d(a, a, cfg) != 1.0 or r2(y, y) != 1.0:
            return 50, math.inf
    return 50, worst


def split_partition(rng: np.random.Generator) -> Tuple[int, float]:
    records = [
        VolumeRecord(f"s{i:03d}", str(k), "", 40.0, None, 0)
        for i in range(50) for k in range(int(rng.integers(1, 4)))
    ]
    violations = 0
    for seed in range(1000):
        parts = group_split(records, seed=seed).parts()
        subjects = [{r.subject_id for r in part} for part in parts]
        overlap = (subjects[0] & subjects[1]) | (subjects[0] & subjects[2]) | (subjects[1] & subjects[2])
        violations += bool(overlap) or sum(len(p) for p in parts) != len(records)
    return 1000, float(violations)


CHECKS: List[Tuple[str, Callable[[np.random.Generator], Tuple[int, float]], float]] = [
    ("decomposition_identity", decomposition_identity, 1e-12),
    ("mmd_calibration_zscore", mmd_calibration, 3.0),
    ("svr_dual_vs_qp", svr_against_qp, 1e-3),
    ("pca_pls_vs_eigh", pca_against_eigh, 1e-8),
    ("metric_loop_oracles", metric_loops, 1e-9),
    ("split_partition_violations", split_partition, 0.5),
]


class OracleBenchmark:
    def __init__(self, seed: int = 0):
        self.seed = seed
        self.results: List[OracleResult] = []

    def run_benchmarks(self) -> None:
        print("🚀 Oracle Benchmark Starting...")
        print("=" * 70)
        for name, check, limit in CHECKS:
            print(f"  {name}...", end=" ", flush=True)
            start = time.time()
            instances, worst = check(np.random.default_rng(self.seed))
            result = OracleResult(name, instances, worst, limit, time.time() - start)
            self.results.append(result)
            status = "✅" if result.passed else "❌"
            print(f"{status} worst={worst:.3g} (limit {limit:g}) over {instances} instances in {result.seconds:.1f}s")

    def save_results(self) -> None:
        timestamp = datetime.now().strftime("%Y%m%d_%H%M%S")
        filename = f"oracle_benchmark_{timestamp}.json"
        with open(filename, "w") as f:
            json.dump(
                {
                    "benchmark_type": "oracles",
                    "timestamp": timestamp,
                    "seed": self.seed,
                    "results": [dict(asdict(r), passed=r.passed) for r in self.results],
                },
                f,
                indent=2,
            )
        print(f"\n💾 Results saved to: {filename}")


def main():
    benchmark = OracleBenchmark()
    try:
        benchmark.run_benchmarks()
        benchmark.save_results()
    except KeyboardInterrupt:
        print("\n\n⏹️  Benchmark interrupted by user")
        return 1
    return 0 if all(r.passed for r in benchmark.results) else 1


if __name__ == "__main__":
    sys.exit(main())
