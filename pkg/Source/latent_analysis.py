"""
Downstream analysis of latent codes.

- epsilon-SVR solved in the dual with pairwise (SMO) updates and
  second-order working-set selection, on standardised features and targets
- seeded k-fold grid search over (kernel, C)
- PCA by power iteration with deflation, PLS by NIPALS
- CSV export of 2-D projections and regression reports
"""

from __future__ import annotations

import csv
import hashlib
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from .errors import ValidationError
from .metrics import RegressionScores, mae, regression_scores

logger = logging.getLogger(__name__)

KERNEL_NAMES = ("linear", "rbf", "poly")
DEFAULT_C_GRID = (0.1, 1.0, 10.0)
DEFAULT_KERNELS = ("linear", "rbf")
TAU = 1e-12
# correlations below this many standard errors (1/sqrt(n)) are indistinguishable from noise
NOISE_CORRELATION_SIGMAS = 3.0


@dataclass(frozen=True, slots=True)
class KernelSpec:
    """SVR kernel. gamma None means 1/d on standardised features."""

    name: str = "rbf"
    gamma: Optional[float] = None
    degree: int = 3
    coef0: float = 1.0

    def __post_init__(self) -> None:
        if self.name not in KERNEL_NAMES:
            raise ValidationError(f"Unknown kernel '{self.name}'; expected one of {KERNEL_NAMES}")
        if self.gamma is not None and not self.gamma > 0:
            raise ValidationError(f"gamma must be positive, got {self.gamma}")
        if self.degree < 1:
            raise ValidationError(f"degree must be >= 1, got {self.degree}")

    def resolved_gamma(self, dim: int) -> float:
        return float(self.gamma) if self.gamma is not None else 1.0 / dim

    def matrix(self, a: np.ndarray, b: np.ndarray) -> np.ndarray:
        if self.name == "linear":
            return a @ b.T
        gamma = self.resolved_gamma(a.shape[1])
        if self.name == "poly":
            return (gamma * (a @ b.T) + self.coef0) ** self.degree
        sq = np.sum(a * a, axis=1)[:, None] + np.sum(b * b, axis=1)[None, :] - 2.0 * (a @ b.T)
        return np.exp(-gamma * np.maximum(sq, 0.0))


@dataclass(frozen=True)
class SvrModel:
    """Fitted epsilon-SVR; support vectors are stored standardised.

    prediction = y_scale * (sum_i dual_i k(s_i, (z - mean) / scale) + bias) + y_mean

    A constant target keeps no support vectors; its value is stored as bias,
    with y_mean 0 and y_scale 1.
    """

    support_indices: np.ndarray
    dual_coeffs: np.ndarray
    bias: float
    kernel: KernelSpec
    c: float
    epsilon: float
    support_vectors: np.ndarray
    feature_mean: np.ndarray
    feature_scale: np.ndarray
    target_mean: float
    target_scale: float
    kkt_violation: float = 0.0
    dual_objective: float = 0.0
    iterations: int = 0

    @property
    def dim(self) -> int:
        return int(self.feature_mean.shape[0])

    def linear_weights(self) -> np.ndarray:
        """w = sum_i dual_i s_i in standardised units (linear kernel only)."""
        if self.kernel.name != "linear":
            raise ValidationError("linear_weights: model does not use a linear kernel")
        return self.dual_coeffs @ self.support_vectors if self.dual_coeffs.size else np.zeros(self.dim)


def _standardize(z: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    mean = z.mean(axis=0)
    scale = z.std(axis=0)
    return mean, np.where(scale > 0, scale, 1.0)


def _solve_svr_dual(
    kmat: np.ndarray,
    y: np.ndarray,
    c: float,
    epsilon: float,
    tol: float,
    max_iter: int,
) -> Tuple[np.ndarray, float, float, float, int]:
    """SMO on min 1/2 b'Qb + p'b, s'b = 0, 0 <= b <= C over b = [alpha; alpha*].

    Returns (alpha - alpha*, rho, final violation, objective, iterations).
    """
    n = y.shape[0]
    sign = np.concatenate([np.ones(n), -np.ones(n)])
    idx = np.concatenate([np.arange(n), np.arange(n)])
    diag = np.diag(kmat)[idx]
    p = np.concatenate([epsilon - y, epsilon + y])
    beta = np.zeros(2 * n)
    grad = p.copy()

    def q_column(t: int) -> np.ndarray:
        return sign * sign[t] * kmat[idx, idx[t]]

    violation = math.inf
    it = 0
    for it in range(1, max_iter + 1):
        up = ((sign > 0) & (beta < c)) | ((sign < 0) & (beta > 0))
        low = ((sign < 0) & (beta < c)) | ((sign > 0) & (beta > 0))
        score = -sign * grad
        if not up.any() or not low.any():
            violation = 0.0
            break
        i = int(np.flatnonzero(up)[np.argmax(score[up])])
        m_up = score[i]
        m_low = float(np.min(score[low]))
        violation = m_up - m_low
        if violation < tol:
            break

        q_i = q_column(i)
        candidates = np.flatnonzero(low & (score < m_up))
        b_gap = m_up - score[candidates]
        a_curv = diag[i] + diag[candidates] - 2.0 * sign[i] * sign[candidates] * q_i[candidates]
        a_curv = np.where(a_curv > 0, a_curv, TAU)
        j = int(candidates[np.argmin(-(b_gap * b_gap) / a_curv)])
        q_j = q_column(j)

        old_i, old_j = beta[i], beta[j]
        if sign[i] != sign[j]:
            quad = max(diag[i] + diag[j] + 2.0 * q_i[j], TAU)
            delta = (-grad[i] - grad[j]) / quad
            diff = beta[i] - beta[j]
            beta[i] += delta
            beta[j] += delta
            if diff > 0:
                if beta[j] < 0:
                    beta[j] = 0.0
                    beta[i] = diff
            elif beta[i] < 0:
                beta[i] = 0.0
                beta[j] = -diff
            if diff > 0:
                if beta[i] > c:
                    beta[i] = c
                    beta[j] = c - diff
            elif beta[j] > c:
                beta[j] = c
                beta[i] = c + diff
        else:
            quad = max(diag[i] + diag[j] - 2.0 * q_i[j], TAU)
            delta = (grad[i] - grad[j]) / quad
            total = beta[i] + beta[j]
            beta[i] -= delta
            beta[j] += delta
            if total > c:
                if beta[i] > c:
                    beta[i] = c
                    beta[j] = total - c
            elif beta[j] < 0:
                beta[j] = 0.0
                beta[i] = total
            if total > c:
                if beta[j] > c:
                    beta[j] = c
                    beta[i] = total - c
            elif beta[i] < 0:
                beta[i] = 0.0
                beta[j] = total
        grad += q_i * (beta[i] - old_i) + q_j * (beta[j] - old_j)

    # Offset from free variables, else midpoint of the feasible interval.
    ys_grad = sign * grad
    at_upper = beta >= c
    at_lower = beta <= 0
    free = ~at_upper & ~at_lower
    if free.any():
        rho = float(np.mean(ys_grad[free]))
    else:
        ub_mask = (at_upper & (sign < 0)) | (at_lower & (sign > 0))
        lb_mask = (at_upper & (sign > 0)) | (at_lower & (sign < 0))
        ub = float(np.min(ys_grad[ub_mask])) if ub_mask.any() else math.inf
        lb = float(np.max(ys_grad[lb_mask])) if lb_mask.any() else -math.inf
        rho = (ub + lb) / 2.0 if math.isfinite(ub) and math.isfinite(lb) else (ub if math.isfinite(ub) else lb)

    objective = float(0.5 * beta @ (grad + p))
    dual = beta[:n] - beta[n:]
    return dual, rho, float(violation), objective, it


def svr_fit(
    z: np.ndarray,
    y: Sequence[float],
    c: float = 1.0,
    kernel: Union[KernelSpec, str] = KernelSpec("rbf"),
    epsilon: float = 0.1,
    tol: float = 1e-3,
    max_iter: int = 100_000,
) -> SvrModel:
    """Fit an epsilon-SVR; epsilon is expressed on standardised targets."""
    kernel = KernelSpec(kernel) if isinstance(kernel, str) else kernel
    z = np.asarray(z, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64).ravel()
    if z.ndim != 2 or z.shape[0] != y.shape[0]:
        raise ValidationError(f"svr_fit: expected (n, d) features matching n targets, got {z.shape} and {y.shape}")
    if z.shape[0] < 2:
        raise ValidationError("svr_fit: need at least 2 samples")
    if not c > 0:
        raise ValidationError(f"svr_fit: C must be positive, got {c}")
    if epsilon < 0:
        raise ValidationError(f"svr_fit: epsilon must be non-negative, got {epsilon}")

    f_mean, f_scale = _standardize(z)
    zs = (z - f_mean) / f_scale
    y_mean = float(y.mean())
    y_scale = float(y.std())
    if y_scale == 0.0:
        return SvrModel(
            support_indices=np.zeros(0, dtype=np.int64),
            dual_coeffs=np.zeros(0),
            bias=y_mean,
            kernel=kernel,
            c=c,
            epsilon=epsilon,
            support_vectors=np.zeros((0, z.shape[1])),
            feature_mean=f_mean,
            feature_scale=f_scale,
            target_mean=0.0,
            target_scale=1.0,
        )

    ys = (y - y_mean) / y_scale
    dual, rho, violation, objective, iterations = _solve_svr_dual(
        kernel.matrix(zs, zs), ys, c, epsilon, tol, max_iter
    )
    if violation >= tol:
        logger.warning("svr_fit stopped after %d iterations with KKT violation %.3g", iterations, violation)
    support = np.flatnonzero(np.abs(dual) > 0.0)
    return SvrModel(
        support_indices=support,
        dual_coeffs=dual[support],
        bias=-rho,
        kernel=kernel,
        c=c,
        epsilon=epsilon,
        support_vectors=zs[support],
        feature_mean=f_mean,
        feature_scale=f_scale,
        target_mean=y_mean,
        target_scale=y_scale,
        kkt_violation=violation,
        dual_objective=objective,
        iterations=iterations,
    )


def svr_predict(model: SvrModel, z: np.ndarray) -> np.ndarray:
    z = np.atleast_2d(np.asarray(z, dtype=np.float64))
    if z.shape[1] != model.dim:
        raise ValidationError(f"svr_predict: expected {model.dim} columns, got {z.shape[1]}")
    zs = (z - model.feature_mean) / model.feature_scale
    if model.dual_coeffs.size:
        f = model.kernel.matrix(zs, model.support_vectors) @ model.dual_coeffs + model.bias
    else:
        f = np.full(z.shape[0], model.bias)
    return f * model.target_scale + model.target_mean


# ----- Grid search -----
@dataclass(frozen=True, slots=True)
class SvrConfig:
    kernel: str
    c: float


@dataclass(frozen=True)
class CvRow:
    config: SvrConfig
    fold_maes: Tuple[float, ...]

    @property
    def mean_mae(self) -> float:
        return math.fsum(self.fold_maes) / len(self.fold_maes)


@dataclass(frozen=True)
class GridSearchResult:
    best: SvrConfig
    rows: List[CvRow]
    folds: List[np.ndarray] = field(repr=False)


def fold_assignment(n: int, folds: int, seed: int) -> List[np.ndarray]:
    """Seeded partition of range(n) into `folds` disjoint index sets."""
    if folds < 2:
        raise ValidationError(f"folds must be >= 2, got {folds}")
    if n < folds:
        raise ValidationError(f"need at least {folds} samples for {folds}-fold CV, got {n}")
    order = np.random.default_rng(seed).permutation(n)
    return [np.sort(part) for part in np.array_split(order, folds)]


def grid_search_cv(
    z: np.ndarray,
    y: Sequence[float],
    c_grid: Sequence[float] = DEFAULT_C_GRID,
    kernels: Sequence[str] = DEFAULT_KERNELS,
    folds: int = 5,
    seed: int = 0,
    epsilon: float = 0.1,
    workers: int = 1,
) -> GridSearchResult:
    """Pick the (kernel, C) with the lowest mean validation MAE.

    Ties go to the linear kernel, then to the smaller C.
    """
    z = np.asarray(z, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64).ravel()
    if z.shape[0] != y.shape[0]:
        raise ValidationError(f"grid_search_cv: {z.shape[0]} rows but {y.shape[0]} targets")
    parts = fold_assignment(z.shape[0], folds, seed)
    kernel_order = sorted(kernels, key=lambda k: (k != "linear", KERNEL_NAMES.index(k) if k in KERNEL_NAMES else 99))
    configs = [SvrConfig(k, float(c)) for k in kernel_order for c in sorted(c_grid)]
    tasks = [(cfg, f) for cfg in configs for f in range(folds)]

    def run(task: Tuple[SvrConfig, int]) -> float:
        cfg, f = task
        val = parts[f]
        train = np.setdiff1d(np.arange(z.shape[0]), val, assume_unique=True)
        model = svr_fit(z[train], y[train], c=cfg.c, kernel=KernelSpec(cfg.kernel), epsilon=epsilon)
        return mae(y[val], svr_predict(model, z[val]))

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            scores = list(pool.map(run, tasks))
    else:
        scores = [run(t) for t in tasks]

    rows = [CvRow(cfg, tuple(scores[i * folds:(i + 1) * folds])) for i, cfg in enumerate(configs)]
    best = rows[0]
    for row in rows[1:]:
        if row.mean_mae < best.mean_mae:
            best = row
    logger.info("grid search selected kernel=%s C=%g (mean MAE %.4f)", best.config.kernel, best.config.c, best.mean_mae)
    return GridSearchResult(best=best.config, rows=rows, folds=parts)


@dataclass(frozen=True)
class RegressionReport:
    target: str
    best: SvrConfig
    cv_rows: List[CvRow]
    scores: RegressionScores
    epsilon: float


def evaluate_regression(
    z_train: np.ndarray,
    y_train: Sequence[float],
    z_test: np.ndarray,
    y_test: Sequence[float],
    target: str,
    c_grid: Sequence[float] = DEFAULT_C_GRID,
    kernels: Sequence[str] = DEFAULT_KERNELS,
    folds: int = 5,
    seed: int = 0,
    epsilon: float = 0.1,
    workers: int = 1,
) -> RegressionReport:
    """Grid-search on the training split, refit, score on the held-out split."""
    search = grid_search_cv(z_train, y_train, c_grid, kernels, folds, seed, epsilon, workers=workers)
    model = svr_fit(z_train, y_train, c=search.best.c, kernel=KernelSpec(search.best.kernel), epsilon=epsilon)
    scores = regression_scores(y_test, svr_predict(model, z_test))
    return RegressionReport(target, search.best, search.rows, scores, epsilon)


def write_regression_report(report: RegressionReport, path: Union[str, Path]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(["target", "kernel", "c", "epsilon", "mae", "r2", "rmse"])
        writer.writerow([
            report.target, report.best.kernel, repr(report.best.c), repr(report.epsilon),
            repr(report.scores.mae), repr(report.scores.r2), repr(report.scores.rmse),
        ])
        writer.writerow([])
        writer.writerow(["kernel", "c", "mean_mae"] + [f"fold{i}" for i in range(len(report.cv_rows[0].fold_maes))])
        for row in report.cv_rows:
            writer.writerow([row.config.kernel, repr(row.config.c), repr(row.mean_mae)] + [repr(v) for v in row.fold_maes])


# ----- Projections -----
@dataclass(frozen=True)
class ProjectionMatrix:
    """d x 2 projection; coordinates are (z - center) @ w."""

    w: np.ndarray
    method: str
    fitted_on: str
    center: np.ndarray
    explained_variance: np.ndarray
    total_variance: float
    degenerate: bool = False

    @property
    def explained_share(self) -> np.ndarray:
        if self.total_variance <= 0:
            return np.zeros_like(self.explained_variance)
        return self.explained_variance / self.total_variance


def fingerprint(z: np.ndarray) -> str:
    arr = np.ascontiguousarray(z, dtype=np.float64)
    digest = hashlib.sha256(str(arr.shape).encode() + arr.tobytes()).hexdigest()
    return digest[:16]


def _fix_sign(col: np.ndarray) -> np.ndarray:
    return col if col[np.argmax(np.abs(col))] >= 0 else -col


def _orthogonal_unit(first: np.ndarray) -> np.ndarray:
    """Unit vector orthogonal to `first`, from the basis axis it leans on least."""
    axis = int(np.argmin(np.abs(first)))
    e = np.zeros_like(first)
    e[axis] = 1.0
    v = e - (e @ first) * first
    return v / np.linalg.norm(v)


def _power_iteration(cov: np.ndarray, seed: int, tol: float, max_iter: int) -> Tuple[float, Optional[np.ndarray]]:
    rng = np.random.default_rng(seed)
    x = rng.standard_normal(cov.shape[0])
    x /= np.linalg.norm(x)
    scale = max(float(np.max(np.abs(cov))), 1.0)
    lam = 0.0
    for _ in range(max_iter):
        y = cov @ x
        norm = np.linalg.norm(y)
        if norm <= 1e-14 * scale:
            return 0.0, None
        x = y / norm
        y = cov @ x
        lam = float(x @ y)
        if np.linalg.norm(y - lam * x) < tol * max(1.0, abs(lam)):
            break
    return lam, x


def pca_fit(z: np.ndarray, tol: float = 1e-10, max_iter: int = 100_000, seed: int = 0) -> ProjectionMatrix:
    """Top-2 covariance eigenvectors by power iteration with deflation."""
    z = np.asarray(z, dtype=np.float64)
    if z.ndim != 2 or z.shape[0] < 3 or z.shape[1] < 2:
        raise ValidationError(f"pca_fit: need at least 3 rows and 2 columns, got {z.shape}")
    center = z.mean(axis=0)
    zc = z - center
    cov = zc.T @ zc / (z.shape[0] - 1)

    columns: List[np.ndarray] = []
    eigenvalues: List[float] = []
    degenerate = False
    deflated = cov.copy()
    for k in range(2):
        lam, vec = _power_iteration(deflated, seed + k, tol, max_iter)
        if vec is None:
            degenerate = True
            vec = _orthogonal_unit(columns[0]) if columns else np.eye(cov.shape[0])[0]
            lam = 0.0
        elif columns:
            vec = vec - (vec @ columns[0]) * columns[0]
            vec /= np.linalg.norm(vec)
        vec = _fix_sign(vec)
        columns.append(vec)
        eigenvalues.append(lam)
        deflated = deflated - lam * np.outer(vec, vec)

    w = np.column_stack(columns)
    eigenvalues = [float(col @ cov @ col) for col in columns]
    if degenerate:
        logger.warning("pca_fit: covariance has rank < 2; second axis is an arbitrary orthogonal direction")
    return ProjectionMatrix(
        w=w,
        method="pca",
        fitted_on=fingerprint(z),
        center=center,
        explained_variance=np.array(eigenvalues),
        total_variance=float(np.trace(cov)),
        degenerate=degenerate,
    )


def pls_fit(
    z: np.ndarray,
    y: np.ndarray,
    components: int = 2,
    tol: float = 1e-12,
    max_iter: int = 1000,
) -> ProjectionMatrix:
    """NIPALS PLS regression; returns the rotation W (P'W)^-1 so scores = Zc @ w."""
    z = np.asarray(z, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if y.ndim == 1:
        y = y[:, None]
    if z.ndim != 2 or z.shape[0] < 3 or y.shape[0] != z.shape[0] or y.shape[1] < 1:
        raise ValidationError(f"pls_fit: need >= 3 matching rows, got {z.shape} and {y.shape}")
    center = z.mean(axis=0)
    x = z - center
    yc = y - y.mean(axis=0)

    initial = x.T @ yc
    if np.linalg.norm(initial) <= 1e-12 * max(np.linalg.norm(x) * np.linalg.norm(yc), 1e-300):
        raise ValidationError("pls_fit: latent codes have zero covariance with the target")
    x_norms = np.linalg.norm(x, axis=0)
    y_norms = np.linalg.norm(yc, axis=0)
    norms = np.outer(x_norms, y_norms)
    correlation = float(np.max(np.abs(initial) / np.where(norms > 0, norms, np.inf)))
    if correlation < NOISE_CORRELATION_SIGMAS / np.sqrt(z.shape[0]):
        logger.warning(
            "pls_fit: strongest latent-target correlation %.3g is within noise for %d samples",
            correlation,
            z.shape[0],
        )

    weights: List[np.ndarray] = []
    loadings: List[np.ndarray] = []
    degenerate = False
    for k in range(components):
        cov = x.T @ yc
        if np.linalg.norm(cov) <= 1e-12 * max(np.linalg.norm(initial), 1e-300):
            degenerate = True
            w = _orthogonal_unit(weights[0]) if weights else np.eye(z.shape[1])[0]
            for prev in weights[1:]:
                w = w - (w @ prev) * prev
            w /= np.linalg.norm(w)
        else:
            u = yc[:, [int(np.argmax(yc.var(axis=0)))]].ravel()
            w = np.zeros(z.shape[1])
            for _ in range(max_iter):
                w_new = x.T @ u
                w_new /= np.linalg.norm(w_new)
                t = x @ w_new
                q = yc.T @ t / (t @ t)
                u = yc @ q / (q @ q)
                done = np.linalg.norm(w_new - w) < tol
                w = w_new
                if done or yc.shape[1] == 1:
                    break
        t = x @ w
        tt = float(t @ t)
        p = x.T @ t / tt if tt > 0 else np.zeros_like(w)
        weights.append(w)
        loadings.append(p)
        x = x - np.outer(t, p)
        if tt > 0:
            yc = yc - np.outer(t, yc.T @ t / tt)

    w_mat = np.column_stack(weights)
    p_mat = np.column_stack(loadings)
    try:
        rotation = w_mat @ np.linalg.inv(p_mat.T @ w_mat)
    except np.linalg.LinAlgError:
        rotation = w_mat
        degenerate = True
    rotation = np.column_stack([_fix_sign(col) for col in rotation.T])
    if degenerate:
        logger.warning("pls_fit: target covariance exhausted before %d components", components)

    scores = (z - center) @ rotation
    return ProjectionMatrix(
        w=rotation,
        method="pls",
        fitted_on=fingerprint(z),
        center=center,
        explained_variance=scores.var(axis=0, ddof=1),
        total_variance=float(np.sum(z.var(axis=0, ddof=1))),
        degenerate=degenerate,
    )


def project(z: np.ndarray, projection: ProjectionMatrix) -> np.ndarray:
    z = np.atleast_2d(np.asarray(z, dtype=np.float64))
    if z.shape[1] != projection.w.shape[0]:
        raise ValidationError(f"project: expected {projection.w.shape[0]} columns, got {z.shape[1]}")
    return (z - projection.center) @ projection.w


PROJECTION_HEADER = ("record_id", "comp1", "comp2", "age", "sdmt", "sex")


def write_projection(
    path: Union[str, Path],
    record_ids: Sequence[str],
    coords: np.ndarray,
    ages: Sequence[float],
    sdmts: Sequence[Optional[float]],
    sexes: Sequence[int],
) -> None:
    """Plot-ready coordinates with labels; missing sdmt is an empty field."""
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(PROJECTION_HEADER)
        for rid, (c1, c2), age, sdmt, sex in zip(record_ids, coords, ages, sdmts, sexes):
            writer.writerow([rid, repr(float(c1)), repr(float(c2)), repr(float(age)), "" if sdmt is None else repr(float(sdmt)), int(sex)])
