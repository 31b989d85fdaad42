"""
Optimisation loop for the encoder-decoder.

Batches are drawn with one seeded generator and the encoder/prior noise with
another, so a run is bit-reproducible from (data, config, seed).
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Dict, List, Optional, Union

import numpy as np

from .errors import NumericFailure, ValidationError
from .objectives import KernelConfig, LossBreakdown, infovae_loss
from .tensor_engine import Tensor, backward
from .vae3d import Vae3D

LOSS_LOG_HEADER = ("iteration", "rec", "kl", "mmd", "total")


class Adam:
    """Adam over a name -> Tensor parameter mapping; returns fresh leaf tensors."""

    def __init__(self, learning_rate: float = 1e-4, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        if learning_rate <= 0:
            raise ValidationError(f"learning_rate must be positive, got {learning_rate}")
        self.learning_rate = learning_rate
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step_count = 0
        self._m: Dict[str, np.ndarray] = {}
        self._v: Dict[str, np.ndarray] = {}

    def step(self, parameters: Dict[str, Tensor], grads: Dict[str, np.ndarray]) -> Dict[str, Tensor]:
        self.step_count += 1
        t = self.step_count
        updated: Dict[str, Tensor] = {}
        for name, param in parameters.items():
            g = grads[name]
            m = self._m.get(name, np.zeros_like(g))
            v = self._v.get(name, np.zeros_like(g))
            m = self.beta1 * m + (1.0 - self.beta1) * g
            v = self.beta2 * v + (1.0 - self.beta2) * g * g
            self._m[name], self._v[name] = m, v
            m_hat = m / (1.0 - self.beta1 ** t)
            v_hat = v / (1.0 - self.beta2 ** t)
            updated[name] = Tensor(param.data - self.learning_rate * m_hat / (np.sqrt(v_hat) + self.eps), requires_grad=True)
        return updated


@dataclass(frozen=True, slots=True)
class LossRecord:
    iteration: int
    rec: float
    kl: float
    mmd: float
    total: float


class Trainer:
    """Runs the InfoVAE objective on a fixed volume stack."""

    def __init__(
        self,
        model: Vae3D,
        kernel: KernelConfig = KernelConfig(),
        learning_rate: float = 1e-4,
        batch_size: int = 2,
        seed: int = 0,
    ):
        if batch_size < 1:
            raise ValidationError(f"batch_size must be >= 1, got {batch_size}")
        self.model = model
        self.kernel = kernel
        self.batch_size = batch_size
        self.optimizer = Adam(learning_rate)
        batch_seq, noise_seq = np.random.SeedSequence(seed).spawn(2)
        self._batch_rng = np.random.default_rng(batch_seq)
        self.noise_stream = np.random.default_rng(noise_seq)
        self._log = logging.getLogger(self.__class__.__name__)

    def step(self, batch: np.ndarray) -> LossBreakdown:
        cfg = self.model.config
        breakdown = infovae_loss(batch, self.model, cfg.alpha, cfg.beta, self.kernel, self.noise_stream)
        if not np.isfinite(breakdown.total):
            raise NumericFailure(f"non-finite loss {breakdown.as_row()}")
        names = list(self.model.parameters)
        grads = backward(breakdown.objective, leaves=[self.model.parameters[n] for n in names])
        named = {n: grads[self.model.parameters[n]] for n in names}
        for name, g in named.items():
            if not np.all(np.isfinite(g)):
                raise NumericFailure(f"non-finite gradient for parameter '{name}'")
        self.model.parameters = self.optimizer.step(self.model.parameters, named)
        return breakdown

    def fit(
        self,
        volumes: np.ndarray,
        iterations: int,
        log_every: int = 100,
        callback: Optional[Callable[[LossRecord], None]] = None,
    ) -> List[LossRecord]:
        volumes = np.asarray(volumes, dtype=np.float64)
        n = len(volumes)
        if n == 0:
            raise ValidationError("fit: no training volumes")
        size = min(self.batch_size, n)
        history: List[LossRecord] = []
        for iteration in range(1, iterations + 1):
            idx = np.sort(self._batch_rng.choice(n, size=size, replace=False))
            try:
                b = self.step(volumes[idx])
            except NumericFailure as exc:
                raise NumericFailure(f"iteration {iteration}: {exc}") from None
            record = LossRecord(iteration, b.rec, b.kl, b.mmd, b.total)
            history.append(record)
            if callback is not None:
                callback(record)
            if log_every and iteration % log_every == 0:
                self._log.info(
                    "iter %d rec=%.6f kl=%.6f mmd=%.6f total=%.6f", iteration, b.rec, b.kl, b.mmd, b.total
                )
        return history


def write_loss_log(history: List[LossRecord], path: Union[str, Path]) -> None:
    """Comma-separated loss log; floats use repr so rows re-add exactly."""
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(LOSS_LOG_HEADER)
        for r in history:
            writer.writerow([r.iteration, repr(r.rec), repr(r.kl), repr(r.mmd), repr(r.total)])


def read_loss_log(path: Union[str, Path]) -> List[LossRecord]:
    with open(path, newline="", encoding="utf-8") as f:
        reader = csv.DictReader(f)
        return [
            LossRecord(int(row["iteration"]), float(row["rec"]), float(row["kl"]), float(row["mmd"]), float(row["total"]))
            for row in reader
        ]
