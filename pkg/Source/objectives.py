"""
Training objectives for the encoder-decoder.

All losses are in minimisation form: the reconstruction log-likelihood, the
per-sample KL and the aggregate-posterior divergence are each negated once,
in `compose_total`. The aggregate divergence is estimated with an RBF-kernel
MMD between posterior samples and fresh prior draws.

`mi_decomposition_oracle` evaluates the information decomposition of the
expected per-sample KL exactly on small discrete joints.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Union

import numpy as np
from scipy.special import rel_entr

from . import tensor_engine as te
from .errors import ValidationError
from .tensor_engine import Tensor
from .vae3d import GaussianPosterior, Vae3D, as_batch

TensorLike = Union[Tensor, np.ndarray]

ESTIMATORS = ("biased", "unbiased")


@dataclass(frozen=True, slots=True)
class KernelConfig:
    """RBF kernel k(z, z') = exp(-||z - z'||^2 / bandwidth).

    bandwidth: None means 2 * d, resolved against the latent dimension
    """

    family: str = "rbf"
    bandwidth: Optional[float] = None
    estimator: str = "biased"

    def __post_init__(self) -> None:
        if self.family != "rbf":
            raise ValidationError(f"Unsupported kernel family '{self.family}'")
        if self.estimator not in ESTIMATORS:
            raise ValidationError(f"estimator must be one of {ESTIMATORS}, got '{self.estimator}'")
        if self.bandwidth is not None and not (np.isfinite(self.bandwidth) and self.bandwidth > 0):
            raise ValidationError(f"bandwidth must be finite and positive, got {self.bandwidth}")

    def resolve(self, latent_dim: int) -> float:
        return float(self.bandwidth) if self.bandwidth is not None else 2.0 * latent_dim


@dataclass(frozen=True)
class LossBreakdown:
    """Scalar loss terms of one step; `objective` keeps the graph for backward()."""

    rec: float
    kl: float
    mmd: float
    total: float
    alpha: float = 0.0
    beta: float = 0.0
    objective: Optional[Tensor] = field(default=None, repr=False, compare=False)

    def as_row(self) -> dict:
        return {"rec": self.rec, "kl": self.kl, "mmd": self.mmd, "total": self.total}


def reconstruction_loss(x: TensorLike, xhat: TensorLike) -> Tensor:
    """Mean squared error over voxels (unit-variance Gaussian decoder)."""
    x, xhat = te.as_tensor(x), te.as_tensor(xhat)
    if x.shape != xhat.shape:
        raise ValidationError(f"reconstruction_loss: shape mismatch {x.shape} vs {xhat.shape}")
    return te.reduce_mean(te.square(te.sub(x, xhat)))


def kl_diag_gaussian(post: GaussianPosterior) -> Tensor:
    """KL(q(Z|X) || N(0, I)) summed over latent coordinates, averaged over rows."""
    mu, logvar = post.mu, post.logvar
    terms = te.sub(te.add(te.square(mu), te.exp(logvar)), te.add(logvar, 1.0))
    per_sample = te.mul(te.reduce_sum(terms, axis=-1), 0.5)
    return te.reduce_mean(per_sample)


def _as_rows(z: TensorLike) -> Tensor:
    z = te.as_tensor(z)
    if z.data.ndim == 1:
        z = te.reshape(z, (z.shape[0], 1))
    if z.data.ndim != 2:
        raise ValidationError(f"mmd: expected a batch of latent rows, got shape {z.shape}")
    return z


def _kernel_matrix(a: Tensor, b: Tensor, bandwidth: float) -> Tensor:
    sq_a = te.reduce_sum(te.square(a), axis=1, keepdims=True)
    sq_b = te.reshape(te.reduce_sum(te.square(b), axis=1), (1, b.shape[0]))
    cross = te.matmul(a, te.transpose(b))
    dist = te.sub(te.add(sq_a, sq_b), te.mul(cross, 2.0))
    return te.exp(te.mul(dist, -1.0 / bandwidth))


def mmd(z_post: TensorLike, z_prior: TensorLike, kernel: KernelConfig = KernelConfig()) -> Tensor:
    """Squared MMD between two sample sets under an RBF kernel."""
    a, b = _as_rows(z_post), _as_rows(z_prior)
    n, m = a.shape[0], b.shape[0]
    if n == 0 or m == 0:
        raise ValidationError("mmd: both sample sets must be non-empty")
    if a.shape[1] != b.shape[1]:
        raise ValidationError(f"mmd: dimension mismatch {a.shape} vs {b.shape}")
    bandwidth = kernel.resolve(a.shape[1])

    k_aa = _kernel_matrix(a, a, bandwidth)
    k_bb = _kernel_matrix(b, b, bandwidth)
    k_ab = _kernel_matrix(a, b, bandwidth)
    cross = te.reduce_mean(k_ab)

    if kernel.estimator == "biased":
        within = te.add(te.reduce_mean(k_aa), te.reduce_mean(k_bb))
    else:
        if n < 2 or m < 2:
            raise ValidationError("mmd: the unbiased estimator needs at least 2 samples per set")
        off_a = te.mul(te.reduce_sum(te.mul(k_aa, 1.0 - np.eye(n))), 1.0 / (n * (n - 1)))
        off_b = te.mul(te.reduce_sum(te.mul(k_bb, 1.0 - np.eye(m))), 1.0 / (m * (m - 1)))
        within = te.add(off_a, off_b)
    return te.sub(within, te.mul(cross, 2.0))


def compose_total(rec: Tensor, kl: Tensor, divergence: Tensor, alpha: float, beta: float) -> Tensor:
    """rec + alpha * kl + (beta - alpha) * divergence."""
    return te.add(te.add(rec, te.mul(kl, alpha)), te.mul(divergence, beta - alpha))


def infovae_loss(
    x_batch: TensorLike,
    model: Vae3D,
    alpha: float,
    beta: float,
    kernel: KernelConfig = KernelConfig(),
    noise_stream: Optional[np.random.Generator] = None,
    deterministic: Optional[bool] = None,
) -> LossBreakdown:
    """One evaluation of the InfoVAE objective on a batch.

    Draw order from `noise_stream`: encoder noise (stochastic encoders only),
    then as many prior samples as the batch has rows.
    """
    if noise_stream is None:
        raise ValidationError("infovae_loss: a noise stream is required")
    x = as_batch(x_batch)
    det = model.config.deterministic_encoder if deterministic is None else deterministic
    n, d = x.shape[0], model.config.latent_dim

    noise = None if det else noise_stream.standard_normal((n, d))
    post, z, xhat = model.forward(x, noise=noise, deterministic=det)
    prior = noise_stream.standard_normal((n, d))

    rec = reconstruction_loss(x, xhat)
    kl = kl_diag_gaussian(post)
    divergence = mmd(z, prior, kernel)
    total = compose_total(rec, kl, divergence, alpha, beta)
    return LossBreakdown(
        rec=rec.item(),
        kl=kl.item(),
        mmd=divergence.item(),
        total=total.item(),
        alpha=alpha,
        beta=beta,
        objective=total,
    )


def elbo(x_batch: TensorLike, model: Vae3D, noise_stream: np.random.Generator, kernel: KernelConfig = KernelConfig()) -> float:
    """Maximisation-form ELBO estimate, -(rec + kl), with a sampled latent."""
    breakdown = infovae_loss(x_batch, model, 1.0, 1.0, kernel, noise_stream, deterministic=False)
    return -breakdown.total


@dataclass(frozen=True, slots=True)
class MiDecomposition:
    mi: float
    kl_aggregate: float
    expected_kl: float


def mi_decomposition_oracle(joint: np.ndarray, prior: np.ndarray, atol: float = 1e-9) -> MiDecomposition:
    """Exhaustive MI(X;Z), KL(q(Z)||p(Z)) and E_q(x)[KL(q(Z|x)||p(Z))].

    joint: |X| x |Z| table q(x, z); prior: length-|Z| table p(z)
    """
    joint = np.asarray(joint, dtype=np.float64)
    prior = np.asarray(prior, dtype=np.float64)
    if joint.ndim != 2 or prior.shape != (joint.shape[1],):
        raise ValidationError(f"mi_decomposition_oracle: incompatible shapes {joint.shape} and {prior.shape}")
    if max(joint.shape) > 64:
        raise ValidationError(f"mi_decomposition_oracle: supports are limited to 64 states, got {joint.shape}")
    if np.any(joint < 0) or abs(joint.sum() - 1.0) > atol:
        raise ValidationError(f"mi_decomposition_oracle: joint must be non-negative and sum to 1 (sum={joint.sum()!r})")
    if np.any(prior < 0) or abs(prior.sum() - 1.0) > atol:
        raise ValidationError("mi_decomposition_oracle: prior must be non-negative and sum to 1")

    q_x = joint.sum(axis=1)
    q_z = joint.sum(axis=0)
    if np.any((q_z > 0) & (prior == 0)):
        raise ValidationError("mi_decomposition_oracle: prior has zero mass where q(z) does not")

    outer = np.outer(q_x, q_z)
    mi = float(np.sum(rel_entr(joint, np.where(outer > 0, outer, 1.0))))
    kl_aggregate = float(np.sum(rel_entr(q_z, prior)))

    expected_kl = 0.0
    for px, row in zip(q_x, joint):
        if px == 0:
            continue
        expected_kl += px * float(np.sum(rel_entr(row / px, prior)))
    return MiDecomposition(mi=mi, kl_aggregate=kl_aggregate, expected_kl=expected_kl)


def objective_mi_form(rec: float, mi: float, kl_aggregate: float, alpha: float, beta: float) -> float:
    """Maximisation form weighting mutual information and aggregate KL directly."""
    return rec - alpha * mi - beta * kl_aggregate


def objective_kl_form(rec: float, expected_kl: float, kl_aggregate: float, alpha: float, beta: float) -> float:
    """Equivalent form weighting the expected per-sample KL."""
    return rec - alpha * expected_kl - (beta - alpha) * kl_aggregate
