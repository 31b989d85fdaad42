"""
3-D convolutional encoder-decoder with a diagonal Gaussian posterior.

The same network serves every (alpha, beta) parametrisation; only the
objective weights and the deterministic-encoder flag differ between presets.
Volumes enter as (N, E, E, E) arrays (or a single (E, E, E) volume) and are
lifted to (N, 1, E, E, E) tensors.
"""

from __future__ import annotations

import logging
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np

from . import tensor_engine as te
from .errors import ValidationError
from .tensor_engine import Tensor

logger = logging.getLogger(__name__)

KERNEL = 3
STRIDE = 2
PADDING = 1
OUTPUT_PADDING = 1
LOGVAR_BOUND = 20.0
CHECKPOINT_MAGIC = b"LVW1"

LatentVector = Tensor


@dataclass(frozen=True, slots=True)
class ModelConfig:
    """Network shape plus the objective weights it is trained with.

    alpha: weight of the per-sample KL (mutual-information) term
    beta: weight of the aggregate-posterior divergence
    """

    alpha: float = 0.0
    beta: float = 1.0
    latent_dim: int = 32
    input_extent: int = 16
    channels: Tuple[int, ...] = (8, 16, 32, 64)
    deterministic_encoder: bool = False
    seed: int = 0

    def __post_init__(self) -> None:
        object.__setattr__(self, "channels", tuple(int(c) for c in self.channels))
        if self.latent_dim < 2:
            raise ValidationError(f"latent_dim must be >= 2, got {self.latent_dim}")
        if not self.channels or min(self.channels) < 1:
            raise ValidationError(f"channels must be positive widths, got {self.channels}")
        if self.input_extent < 1 or self.input_extent % (2 ** len(self.channels)) != 0:
            raise ValidationError(
                f"input_extent {self.input_extent} must be divisible by 2^{len(self.channels)}"
            )
        if not (np.isfinite(self.alpha) and np.isfinite(self.beta)):
            raise ValidationError(f"alpha/beta must be finite, got ({self.alpha}, {self.beta})")
        if not 0 <= self.seed < 2 ** 64:
            raise ValidationError(f"seed must fit in an unsigned 64-bit integer, got {self.seed}")

    @property
    def stages(self) -> int:
        return len(self.channels)

    @property
    def seed_extent(self) -> int:
        """Spatial extent of the innermost feature map."""
        return self.input_extent // (2 ** self.stages)

    @property
    def flat_features(self) -> int:
        return self.channels[-1] * self.seed_extent ** 3


# name -> (alpha, beta, deterministic encoder)
PRESETS: Dict[str, Tuple[float, float, bool]] = {
    "AE": (0.0, 0.0, True),
    "VAE": (1.0, 1.0, False),
    "BetaVAE": (0.0025, 0.0, False),
    "InfoVAE-best": (0.0, 1.0, False),
    "InfoVAE-a1-b1": (1.0, 1.0, False),
    "InfoVAE-a0.001-b1": (0.001, 1.0, False),
    "InfoVAE-a0-b0.1": (0.0, 0.1, False),
    "InfoVAE-a0-b10": (0.0, 10.0, False),
}


def preset_names() -> List[str]:
    return list(PRESETS)


def preset(name: str, **overrides) -> ModelConfig:
    """Model configuration for a named parametrisation.

    overrides: any other ModelConfig field (latent_dim, input_extent, ...)
    """
    if name not in PRESETS:
        raise ValidationError(f"Unknown preset '{name}'; expected one of {preset_names()}")
    alpha, beta, deterministic = PRESETS[name]
    return ModelConfig(alpha=alpha, beta=beta, deterministic_encoder=deterministic, **overrides)


def parameter_shapes(config: ModelConfig) -> List[Tuple[str, Tuple[int, ...]]]:
    """Parameter names and shapes in declaration (checkpoint) order."""
    k = KERNEL
    shapes: List[Tuple[str, Tuple[int, ...]]] = []
    widths_in = (1,) + config.channels[:-1]
    for i, (c_in, c_out) in enumerate(zip(widths_in, config.channels)):
        shapes.append((f"enc{i}.weight", (c_out, c_in, k, k, k)))
        shapes.append((f"enc{i}.bias", (c_out,)))
    flat, d = config.flat_features, config.latent_dim
    shapes += [
        ("mu.weight", (flat, d)),
        ("mu.bias", (d,)),
        ("logvar.weight", (flat, d)),
        ("logvar.bias", (d,)),
        ("dec.fc.weight", (d, flat)),
        ("dec.fc.bias", (flat,)),
    ]
    reversed_widths = config.channels[::-1]
    widths_out = reversed_widths[1:] + (1,)
    for i, (c_in, c_out) in enumerate(zip(reversed_widths, widths_out)):
        shapes.append((f"dec{i}.weight", (c_in, c_out, k, k, k)))
        shapes.append((f"dec{i}.bias", (c_out,)))
    return shapes


def parameter_count(config: ModelConfig) -> int:
    """Closed-form parameter count for (channels, d, E)."""
    k3 = KERNEL ** 3
    widths = (1,) + config.channels
    encoder = sum(c_in * c_out * k3 + c_out for c_in, c_out in zip(widths[:-1], widths[1:]))
    reversed_widths = config.channels[::-1]
    # decoder biases follow the output widths, ending in a single channel
    decoder = sum(
        c_in * c_out * k3 + c_out for c_in, c_out in zip(reversed_widths, reversed_widths[1:] + (1,))
    )
    flat, d = config.flat_features, config.latent_dim
    heads = 2 * (flat * d + d)
    fc = d * flat + flat
    return encoder + decoder + heads + fc


def _fan_in(name: str, shape: Tuple[int, ...]) -> int:
    if name.startswith("enc"):
        return shape[1] * KERNEL ** 3
    if name.startswith("dec") and not name.startswith("dec.fc"):
        return shape[0] * KERNEL ** 3
    return shape[0]


@dataclass(frozen=True)
class GaussianPosterior:
    """Batched q(Z|X): rows of mean and log-variance, both (N, d)."""

    mu: Tensor
    logvar: Tensor

    @property
    def latent_dim(self) -> int:
        return self.mu.shape[-1]


def as_batch(volumes: Union[np.ndarray, Tensor, Sequence[np.ndarray]]) -> Tensor:
    """Lift (E,E,E), (N,E,E,E) or (N,1,E,E,E) data to an (N, 1, E, E, E) tensor."""
    if isinstance(volumes, Tensor):
        arr = volumes
        if arr.data.ndim == 4:
            return te.reshape(arr, (arr.shape[0], 1) + arr.shape[1:])
        if arr.data.ndim == 5:
            return arr
        raise ValidationError(f"expected a batch of volumes, got tensor of shape {arr.shape}")
    arr = np.asarray(volumes, dtype=np.float64)
    if arr.ndim == 3:
        arr = arr[None]
    if arr.ndim == 4:
        arr = arr[:, None]
    if arr.ndim != 5 or arr.shape[1] != 1:
        raise ValidationError(f"expected a batch of volumes, got array of shape {arr.shape}")
    return Tensor(arr)


class Vae3D:
    """Encoder-decoder network holding its parameters as leaf tensors."""

    def __init__(self, config: ModelConfig, parameters: Optional[Mapping[str, np.ndarray]] = None):
        self.config = config
        self._log = logging.getLogger(self.__class__.__name__)
        self.parameters: Dict[str, Tensor] = {}
        if parameters is None:
            self._initialize()
        else:
            self.set_parameters(parameters)

    def _initialize(self) -> None:
        # He-style centred uniform, scaled by fan-in; biases start at zero.
        rng = np.random.default_rng(self.config.seed)
        for name, shape in parameter_shapes(self.config):
            if name.endswith(".bias"):
                values = np.zeros(shape)
            else:
                bound = np.sqrt(6.0 / _fan_in(name, shape))
                values = rng.uniform(-bound, bound, size=shape)
            self.parameters[name] = Tensor(values, requires_grad=True)
        self._log.debug("initialised %d parameters (seed %d)", parameter_count(self.config), self.config.seed)

    def set_parameters(self, values: Mapping[str, Union[np.ndarray, Tensor]]) -> None:
        """Replace parameters by name; shapes must match the declaration."""
        expected = dict(parameter_shapes(self.config))
        for name, value in values.items():
            if name not in expected:
                raise ValidationError(f"Unknown parameter '{name}'")
            arr = value.data if isinstance(value, Tensor) else np.asarray(value, dtype=np.float64)
            if arr.shape != expected[name]:
                raise ValidationError(f"Parameter '{name}' expects shape {expected[name]}, got {arr.shape}")
            self.parameters[name] = Tensor(arr, requires_grad=True)
        missing = [n for n in expected if n not in self.parameters]
        if missing:
            raise ValidationError(f"Missing parameters: {missing}")

    def parameter_vector(self) -> np.ndarray:
        return np.concatenate([self.parameters[n].data.ravel() for n, _ in parameter_shapes(self.config)])

    # ----- Forward pieces -----
    def encode(self, x: Union[np.ndarray, Tensor]) -> GaussianPosterior:
        cfg = self.config
        h = as_batch(x)
        extent = cfg.input_extent
        if h.shape[2:] != (extent, extent, extent):
            raise ValidationError(f"encode: expected volumes of extent {extent}^3, got {h.shape[2:]}")
        p = self.parameters
        for i in range(cfg.stages):
            h = te.conv3d(h, p[f"enc{i}.weight"], stride=STRIDE, padding=PADDING)
            h = te.leaky_relu(te.add_bias(h, p[f"enc{i}.bias"]))
        h = te.reshape(h, (h.shape[0], cfg.flat_features))
        mu = te.add_bias(te.matmul(h, p["mu.weight"]), p["mu.bias"])
        logvar = te.add_bias(te.matmul(h, p["logvar.weight"]), p["logvar.bias"])
        return GaussianPosterior(mu=mu, logvar=te.clip(logvar, -LOGVAR_BOUND, LOGVAR_BOUND))

    def decode(self, z: Union[np.ndarray, Tensor]) -> Tensor:
        cfg = self.config
        z = te.as_tensor(z)
        if z.data.ndim == 1:
            z = te.reshape(z, (1, z.shape[0]))
        if z.data.ndim != 2 or z.shape[1] != cfg.latent_dim:
            raise ValidationError(f"decode: expected latent rows of length {cfg.latent_dim}, got {z.shape}")
        p = self.parameters
        h = te.add_bias(te.matmul(z, p["dec.fc.weight"]), p["dec.fc.bias"])
        s = cfg.seed_extent
        h = te.reshape(h, (z.shape[0], cfg.channels[-1], s, s, s))
        for i in range(cfg.stages):
            h = te.conv3d_transpose(
                h, p[f"dec{i}.weight"], stride=STRIDE, padding=PADDING, output_padding=OUTPUT_PADDING
            )
            h = te.add_bias(h, p[f"dec{i}.bias"])
            h = te.sigmoid(h) if i == cfg.stages - 1 else te.leaky_relu(h)
        return h

    def forward(
        self,
        x: Union[np.ndarray, Tensor],
        noise: Optional[np.ndarray] = None,
        deterministic: Optional[bool] = None,
    ) -> Tuple[GaussianPosterior, Tensor, Tensor]:
        """Encode, sample and decode; returns (posterior, z, reconstruction)."""
        post = self.encode(x)
        det = self.config.deterministic_encoder if deterministic is None else deterministic
        z = reparameterize(post, noise, deterministic=det)
        return post, z, self.decode(z)

    def embed(self, volumes: np.ndarray) -> np.ndarray:
        """Posterior means for a stack of volumes, in input order.

        Volumes are encoded one at a time so a row never depends on its neighbours.
        """
        volumes = np.asarray(volumes, dtype=np.float64)
        rows = [self.encode(volume[None]).mu.data for volume in volumes]
        if not rows:
            return np.zeros((0, self.config.latent_dim))
        return np.vstack(rows)

    def reconstruct(self, volumes: np.ndarray) -> np.ndarray:
        """Deterministic (mean-path) reconstructions shaped like the input stack."""
        volumes = np.asarray(volumes, dtype=np.float64)
        out = [self.decode(self.encode(volume[None]).mu).data[:, 0] for volume in volumes]
        return np.concatenate(out) if out else np.zeros_like(volumes)


def reparameterize(post: GaussianPosterior, noise: Optional[np.ndarray], deterministic: bool = False) -> Tensor:
    """z = mu (deterministic) or mu + exp(logvar / 2) * noise."""
    if deterministic:
        return post.mu
    if noise is None:
        raise ValidationError("reparameterize: noise is required for a stochastic encoder")
    noise = np.asarray(noise, dtype=np.float64)
    if noise.size != post.mu.size:
        raise ValidationError(f"reparameterize: noise shape {noise.shape} does not match {post.mu.shape}")
    noise = noise.reshape(post.mu.shape)
    sigma = te.exp(te.mul(post.logvar, 0.5))
    return te.add(post.mu, te.mul(sigma, noise))


# ----- Checkpoint (LVW1) -----
def save_checkpoint(model: Vae3D, path: Union[str, Path]) -> None:
    """Magic, config block, then the f64 parameter array in declaration order."""
    cfg = model.config
    header = bytearray(CHECKPOINT_MAGIC)
    header += struct.pack("<dd", cfg.alpha, cfg.beta)
    header += struct.pack("<III", cfg.latent_dim, cfg.input_extent, cfg.stages)
    header += struct.pack(f"<{cfg.stages}I", *cfg.channels)
    header += struct.pack("<IQ", int(cfg.deterministic_encoder), cfg.seed)
    params = model.parameter_vector().astype("<f8")
    header += struct.pack("<Q", params.size)
    Path(path).write_bytes(bytes(header) + params.tobytes())
    logger.debug("Saved checkpoint with %d parameters to %s", params.size, path)


def load_checkpoint(path: Union[str, Path]) -> Vae3D:
    blob = Path(path).read_bytes()
    if blob[:4] != CHECKPOINT_MAGIC:
        raise ValidationError(f"{path}: not an LVW1 checkpoint")
    try:
        offset = 4
        alpha, beta = struct.unpack_from("<dd", blob, offset)
        offset += 16
        latent_dim, extent, stages = struct.unpack_from("<III", blob, offset)
        offset += 12
        channels = struct.unpack_from(f"<{stages}I", blob, offset)
        offset += 4 * stages
        deterministic, seed = struct.unpack_from("<IQ", blob, offset)
        offset += 12
        (count,) = struct.unpack_from("<Q", blob, offset)
        offset += 8
    except struct.error as exc:
        raise ValidationError(f"{path}: truncated checkpoint header ({exc})") from None

    config = ModelConfig(
        alpha=alpha,
        beta=beta,
        latent_dim=latent_dim,
        input_extent=extent,
        channels=channels,
        deterministic_encoder=bool(deterministic),
        seed=seed,
    )
    if count != parameter_count(config) or len(blob) - offset != 8 * count:
        raise ValidationError(f"{path}: parameter payload does not match the stored configuration")
    flat = np.frombuffer(blob, dtype="<f8", count=count, offset=offset).astype(np.float64)
    values: Dict[str, np.ndarray] = {}
    cursor = 0
    for name, shape in parameter_shapes(config):
        size = int(np.prod(shape))
        values[name] = flat[cursor:cursor + size].reshape(shape)
        cursor += size
    return Vae3D(config, values)
