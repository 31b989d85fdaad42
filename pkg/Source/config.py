"""
Experiment configuration.

One JSON or YAML document drives every command. Unknown keys are rejected
with their dotted path; relative paths resolve against the config file.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Dict, Mapping, Optional, Tuple, Type, TypeVar

import yaml
from dotenv import load_dotenv

from .errors import ValidationError
from .objectives import KernelConfig
from .vae3d import ModelConfig, preset

SEED_ENV_VAR = "INFOVAE_SEED"

T = TypeVar("T")


@dataclass(frozen=True)
class ModelSection:
    preset: Optional[str] = None
    alpha: Optional[float] = None
    beta: Optional[float] = None
    latent_dim: int = 32
    input_extent: int = 16
    channels: Tuple[int, ...] = (8, 16, 32, 64)
    deterministic_encoder: Optional[bool] = None
    mmd_bandwidth: Optional[float] = None
    mmd_estimator: str = "biased"

    def build(self, seed: int, preset_name: Optional[str] = None) -> ModelConfig:
        """ModelConfig for this section; `preset_name` overrides the configured preset."""
        shape = dict(latent_dim=self.latent_dim, input_extent=self.input_extent, channels=tuple(self.channels), seed=seed)
        if preset_name is not None:
            return preset(preset_name, **shape)
        if self.preset is not None:
            if self.alpha is not None or self.beta is not None:
                raise ValidationError("model: give either a preset or explicit alpha/beta, not both")
            cfg = preset(self.preset, **shape)
        elif self.alpha is None or self.beta is None:
            raise ValidationError("model: either preset or both alpha and beta are required")
        else:
            cfg = ModelConfig(alpha=float(self.alpha), beta=float(self.beta), **shape)
        if self.deterministic_encoder is not None:
            cfg = replace(cfg, deterministic_encoder=bool(self.deterministic_encoder))
        return cfg

    def kernel(self) -> KernelConfig:
        return KernelConfig(bandwidth=self.mmd_bandwidth, estimator=self.mmd_estimator)


@dataclass(frozen=True)
class TrainingSection:
    iterations: int = 1000
    batch_size: int = 2
    learning_rate: float = 1e-4
    log_every: int = 100

    def __post_init__(self) -> None:
        if self.iterations < 1:
            raise ValidationError(f"training.iterations must be >= 1, got {self.iterations}")
        if self.batch_size < 1:
            raise ValidationError(f"training.batch_size must be >= 1, got {self.batch_size}")
        if not self.learning_rate > 0:
            raise ValidationError(f"training.learning_rate must be positive, got {self.learning_rate}")


@dataclass(frozen=True)
class DataSection:
    root: Path = Path("data")
    manifest: Optional[Path] = None
    n_subjects: int = 200
    max_sessions: int = 3
    extent: int = 16
    noise_sigma: float = 0.02
    with_sdmt: bool = True
    workers: int = 1

    @property
    def manifest_path(self) -> Path:
        return self.manifest if self.manifest is not None else self.root / "manifest.csv"

    def split_manifest(self, name: str) -> Path:
        base = self.manifest_path
        return base.with_name(f"{base.stem}_{name}{base.suffix}")


@dataclass(frozen=True)
class AnalysisSection:
    c_grid: Tuple[float, ...] = (0.1, 1.0, 10.0)
    kernels: Tuple[str, ...] = ("linear", "rbf")
    folds: int = 5
    epsilon: float = 0.1
    workers: int = 1


@dataclass(frozen=True)
class OutputsSection:
    dir: Path = Path("runs")
    checkpoint: Optional[Path] = None
    loss_log: Optional[Path] = None
    latents: Optional[Path] = None
    reports: Optional[Path] = None

    def resolved(self, name: str, default: str) -> Path:
        value = getattr(self, name)
        return value if value is not None else self.dir / default


@dataclass(frozen=True)
class ExperimentConfig:
    model: ModelSection = field(default_factory=ModelSection)
    training: TrainingSection = field(default_factory=TrainingSection)
    data: DataSection = field(default_factory=DataSection)
    analysis: AnalysisSection = field(default_factory=AnalysisSection)
    outputs: OutputsSection = field(default_factory=OutputsSection)
    seed: int = 0
    source: Optional[Path] = None

    def model_config(self, preset_name: Optional[str] = None) -> ModelConfig:
        return self.model.build(self.seed, preset_name)


_PATH_FIELDS = {
    DataSection: ("root", "manifest"),
    OutputsSection: ("dir", "checkpoint", "loss_log", "latents", "reports"),
}


def _section(cls: Type[T], raw: Any, where: str, base: Path) -> T:
    if raw is None:
        raw = {}
    if not isinstance(raw, Mapping):
        raise ValidationError(f"{where}: expected a mapping, got {type(raw).__name__}")
    known = {f.name for f in fields(cls)}  # type: ignore[arg-type]
    for key in raw:
        if key not in known:
            raise ValidationError(f"unknown config key '{where}.{key}'")
    values: Dict[str, Any] = {}
    for key, value in raw.items():
        if key in _PATH_FIELDS.get(cls, ()) and value is not None:
            path = Path(str(value))
            value = path if path.is_absolute() else base / path
        elif isinstance(value, list):
            value = tuple(value)
        values[key] = value
    for f in fields(cls):  # type: ignore[arg-type]
        if f.name in _PATH_FIELDS.get(cls, ()) and f.name not in values and isinstance(f.default, Path):
            values[f.name] = base / f.default
    try:
        return cls(**values)
    except TypeError as exc:
        raise ValidationError(f"{where}: {exc}") from None


def default_seed() -> int:
    """Seed from INFOVAE_SEED (a local .env is honoured), else 0."""
    load_dotenv(".env", override=False)
    raw = os.environ.get(SEED_ENV_VAR)
    if raw is None or raw.strip() == "":
        return 0
    try:
        seed = int(raw)
    except ValueError:
        raise ValidationError(f"{SEED_ENV_VAR}={raw!r} is not an integer") from None
    if seed < 0:
        raise ValidationError(f"{SEED_ENV_VAR} must be non-negative, got {seed}")
    return seed


def parse_config(document: Any, base_dir: Path, source: Optional[Path] = None) -> ExperimentConfig:
    if document is None:
        document = {}
    if not isinstance(document, Mapping):
        raise ValidationError("config: top level must be a mapping")
    sections = {"model": ModelSection, "training": TrainingSection, "data": DataSection,
                "analysis": AnalysisSection, "outputs": OutputsSection}
    for key in document:
        if key not in sections and key != "seed":
            raise ValidationError(f"unknown config key '{key}'")
    parsed = {name: _section(cls, document.get(name), name, base_dir) for name, cls in sections.items()}
    seed = document.get("seed")
    if seed is None:
        seed = default_seed()
    elif isinstance(seed, bool) or not isinstance(seed, int) or seed < 0:
        raise ValidationError(f"seed must be a non-negative integer, got {seed!r}")
    return ExperimentConfig(seed=seed, source=source, **parsed)


def load_config(path: str | Path) -> ExperimentConfig:
    """Load a JSON config, falling back to YAML for non-JSON text."""
    path = Path(path)
    if not path.is_file():
        raise ValidationError(f"config file not found: {path}")
    text = path.read_text(encoding="utf-8")
    try:
        document = json.loads(text)
    except json.JSONDecodeError:
        try:
            document = yaml.safe_load(text)
        except yaml.YAMLError as exc:
            raise ValidationError(f"{path}: not valid JSON or YAML ({exc})") from None
    return parse_config(document, path.resolve().parent, source=path)
