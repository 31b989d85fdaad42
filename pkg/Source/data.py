"""
Synthetic cohorts, the MVOL volume format, manifests and subject-grouped splits.

Phantom geometry is an affine function of three normalised factors:
age -> ventricle volume, sex -> outer radii, score -> cortical texture
contrast. The coefficients live in `GeneratorSpec` and are written next to
every generated cohort.
"""

from __future__ import annotations

import csv
import hashlib
import logging
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import yaml
from scipy.ndimage import map_coordinates

from .errors import MvolFormatError, ValidationError

logger = logging.getLogger(__name__)

AGE_RANGE = (18.0, 97.0)
SDMT_RANGE = (16.0, 97.0)
MANIFEST_HEADER = ("subject_id", "session_id", "path", "age", "sdmt", "sex")

MVOL_MAGIC = b"MVOL"
MVOL_VERSION = 1
MVOL_HEADER = struct.Struct("<4sIIII")
MAX_EXTENT = 2**32 - 1

PathLike = Union[str, Path]


@dataclass(frozen=True, slots=True)
class VolumeRecord:
    subject_id: str
    session_id: str
    path: str
    age: float
    sdmt: Optional[float]
    sex: int

    def __post_init__(self) -> None:
        if not self.subject_id or not self.session_id:
            raise ValidationError("subject_id and session_id must be non-empty")
        if not AGE_RANGE[0] <= self.age <= AGE_RANGE[1]:
            raise ValidationError(f"age {self.age} outside [{AGE_RANGE[0]:g}, {AGE_RANGE[1]:g}]")
        if self.sdmt is not None and not SDMT_RANGE[0] <= self.sdmt <= SDMT_RANGE[1]:
            raise ValidationError(f"sdmt {self.sdmt} outside [{SDMT_RANGE[0]:g}, {SDMT_RANGE[1]:g}]")
        if self.sex not in (0, 1):
            raise ValidationError(f"sex must be 0 or 1, got {self.sex}")

    @property
    def key(self) -> Tuple[str, str]:
        return self.subject_id, self.session_id

    @property
    def record_id(self) -> str:
        return f"{self.subject_id}/{self.session_id}"


@dataclass(frozen=True, slots=True)
class PhantomParams:
    extent: int = 16
    age: float = 57.5
    sex: int = 0
    score: float = 56.5
    noise_sigma: float = 0.0
    seed: int = 0

    def __post_init__(self) -> None:
        if self.extent < 8:
            raise ValidationError(f"phantom extent must be >= 8, got {self.extent}")
        if not AGE_RANGE[0] <= self.age <= AGE_RANGE[1]:
            raise ValidationError(f"age factor {self.age} outside {AGE_RANGE}")
        if not SDMT_RANGE[0] <= self.score <= SDMT_RANGE[1]:
            raise ValidationError(f"score factor {self.score} outside {SDMT_RANGE}")
        if self.sex not in (0, 1):
            raise ValidationError(f"sex factor must be 0 or 1, got {self.sex}")
        if self.noise_sigma < 0:
            raise ValidationError(f"noise_sigma must be >= 0, got {self.noise_sigma}")


@dataclass(frozen=True)
class GeneratorSpec:
    """Affine factor -> geometry coefficients; coordinates span [-1, 1]^3."""

    outer_radii: Tuple[float, float, float] = (0.78, 0.70, 0.74)
    sex_radius_gain: float = 0.08
    skull_inner: float = 0.88
    skull_intensity: float = 0.95
    tissue_intensity: float = 0.6
    ventricle_radii: Tuple[float, float, float] = (0.22, 0.26, 0.18)
    ventricle_volume_slope: float = 3.0
    ventricle_intensity: float = 0.15
    cortex_inner: float = 0.6
    texture_contrast_intercept: float = 0.05
    texture_contrast_slope: float = 0.2
    texture_frequency: float = 2.0
    session_age_jitter: float = 0.5
    session_score_jitter: float = 1.0

    def as_dict(self) -> Dict[str, object]:
        out = asdict(self)
        for k, v in out.items():
            if isinstance(v, tuple):
                out[k] = list(v)
        out["age_normalisation"] = f"(age - {AGE_RANGE[0]:g}) / {AGE_RANGE[1] - AGE_RANGE[0]:g}"
        out["score_normalisation"] = f"(score - {SDMT_RANGE[0]:g}) / {SDMT_RANGE[1] - SDMT_RANGE[0]:g}"
        out["ventricle_volume"] = "base_volume * (1 + ventricle_volume_slope * age_n)"
        out["outer_radius_scale"] = "1 + sex_radius_gain * sex"
        out["texture_contrast"] = "texture_contrast_intercept + texture_contrast_slope * score_n"
        return out


DEFAULT_GENERATOR = GeneratorSpec()


def _normalised(value: float, bounds: Tuple[float, float]) -> float:
    return (value - bounds[0]) / (bounds[1] - bounds[0])


def generate_phantom(
    p: PhantomParams,
    subject_id: str = "phantom",
    session_id: str = "1",
    spec: GeneratorSpec = DEFAULT_GENERATOR,
) -> Tuple[np.ndarray, VolumeRecord]:
    """Deterministic phantom volume and its labels.

    Values are clipped to [0, 1] and rounded through float32 so the volume
    survives an MVOL round trip unchanged.
    """
    age_n = _normalised(p.age, AGE_RANGE)
    score_n = _normalised(p.score, SDMT_RANGE)
    axis = np.linspace(-1.0, 1.0, p.extent)
    x, y, z = np.meshgrid(axis, axis, axis, indexing="ij")

    scale = 1.0 + spec.sex_radius_gain * p.sex
    rx, ry, rz = (r * scale for r in spec.outer_radii)
    r_outer = np.sqrt((x / rx) ** 2 + (y / ry) ** 2 + (z / rz) ** 2)

    vol = np.zeros_like(x)
    vol[r_outer < 1.0] = spec.skull_intensity
    vol[r_outer < spec.skull_inner] = spec.tissue_intensity

    band = (r_outer >= spec.cortex_inner) & (r_outer < spec.skull_inner)
    contrast = spec.texture_contrast_intercept + spec.texture_contrast_slope * score_n
    omega = 2.0 * np.pi * spec.texture_frequency
    texture = contrast * np.sin(omega * x) * np.sin(omega * y) * np.sin(omega * z)
    vol[band] += texture[band]

    growth = (1.0 + spec.ventricle_volume_slope * age_n) ** (1.0 / 3.0)
    vx, vy, vz = (r * growth for r in spec.ventricle_radii)
    vol[(x / vx) ** 2 + (y / vy) ** 2 + (z / vz) ** 2 < 1.0] = spec.ventricle_intensity

    if p.noise_sigma > 0:
        vol = vol + np.random.default_rng(p.seed).normal(0.0, p.noise_sigma, vol.shape)
    vol = np.clip(vol, 0.0, 1.0).astype(np.float32).astype(np.float64)

    record = VolumeRecord(subject_id, session_id, "", float(p.age), float(p.score), int(p.sex))
    return vol, record


def ventricle_voxel_count(volume: np.ndarray, threshold: float = 0.3, radius: float = 0.7) -> int:
    """Voxels darker than `threshold` within `radius` of the centre (unit-cube coordinates)."""
    axis = np.linspace(-1.0, 1.0, volume.shape[0])
    x, y, z = np.meshgrid(axis, axis, axis, indexing="ij")
    inner = x * x + y * y + z * z < radius * radius
    return int(np.count_nonzero(inner & (volume < threshold)))


def derive_seed(seed: int, subject_id: str, session_id: str) -> int:
    digest = hashlib.sha256(f"{seed}:{subject_id}:{session_id}".encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")


def generate_cohort(
    root: PathLike,
    n_subjects: int = 200,
    max_sessions: int = 3,
    extent: int = 16,
    noise_sigma: float = 0.02,
    seed: int = 0,
    with_sdmt: bool = True,
    workers: int = 1,
    spec: GeneratorSpec = DEFAULT_GENERATOR,
) -> List[VolumeRecord]:
    """Write a phantom cohort: volumes/, manifest.csv and generator_spec.yaml under `root`."""
    if n_subjects < 1 or max_sessions < 1:
        raise ValidationError(f"need n_subjects >= 1 and max_sessions >= 1, got {n_subjects}, {max_sessions}")
    root = Path(root)
    (root / "volumes").mkdir(parents=True, exist_ok=True)

    rng = np.random.default_rng(seed)
    plan: List[Tuple[str, str, PhantomParams]] = []
    for s in range(n_subjects):
        subject = f"sub-{s + 1:04d}"
        age = float(rng.uniform(*AGE_RANGE))
        score = float(rng.uniform(*SDMT_RANGE))
        sex = int(rng.integers(0, 2))
        for k in range(int(rng.integers(1, max_sessions + 1))):
            session = f"ses-{k + 1}"
            session_seed = derive_seed(seed, subject, session)
            jitter = np.random.default_rng(session_seed)
            params = PhantomParams(
                extent=extent,
                age=float(np.clip(age + jitter.normal(0.0, spec.session_age_jitter), *AGE_RANGE)),
                sex=sex,
                score=float(np.clip(score + jitter.normal(0.0, spec.session_score_jitter), *SDMT_RANGE)),
                noise_sigma=noise_sigma,
                seed=session_seed,
            )
            plan.append((subject, session, params))

    def build(item: Tuple[str, str, PhantomParams]) -> VolumeRecord:
        subject, session, params = item
        vol, labels = generate_phantom(params, subject, session, spec)
        rel = f"volumes/{subject}_{session}.mvol"
        write_mvol(vol, root / rel)
        return VolumeRecord(subject, session, rel, labels.age, labels.sdmt if with_sdmt else None, labels.sex)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            records = list(pool.map(build, plan))
    else:
        records = [build(item) for item in plan]

    save_manifest(records, root / "manifest.csv")
    write_generator_spec(root / "generator_spec.yaml", spec, seed=seed, extent=extent, noise_sigma=noise_sigma)
    logger.info("generated %d sessions for %d subjects under %s", len(records), n_subjects, root)
    return records


def write_generator_spec(path: PathLike, spec: GeneratorSpec, **run: object) -> None:
    document = {"generator": spec.as_dict(), "run": dict(run)}
    Path(path).write_text(yaml.safe_dump(document, sort_keys=False), encoding="utf-8")


# ----- MVOL -----
def write_mvol(volume: np.ndarray, path: PathLike) -> None:
    """Magic, u32 version, u32 H, W, D, then little-endian f32 voxels, x fastest."""
    v = np.asarray(volume)
    if v.ndim != 3:
        raise ValidationError(f"write_mvol: expected a 3-D volume, got shape {v.shape}")
    if any(n < 1 or n > MAX_EXTENT for n in v.shape):
        raise ValidationError(f"write_mvol: extents {v.shape} must lie in [1, {MAX_EXTENT}]")
    h, w, d = v.shape
    payload = np.asarray(v, dtype="<f4").tobytes(order="F")
    with open(path, "wb") as f:
        f.write(MVOL_HEADER.pack(MVOL_MAGIC, MVOL_VERSION, h, w, d))
        f.write(payload)


def read_mvol(path: PathLike) -> np.ndarray:
    data = Path(path).read_bytes()
    if len(data) < MVOL_HEADER.size:
        raise MvolFormatError(f"{path}: truncated header ({len(data)} bytes)", offset=len(data))
    magic, version, h, w, d = MVOL_HEADER.unpack_from(data, 0)
    if magic != MVOL_MAGIC:
        raise MvolFormatError(f"{path}: bad magic {magic!r}", offset=0)
    if version != MVOL_VERSION:
        raise MvolFormatError(f"{path}: unsupported version {version}", offset=4)
    if 0 in (h, w, d):
        raise MvolFormatError(f"{path}: zero extent in {(h, w, d)}", offset=8)
    count = h * w * d
    expected = MVOL_HEADER.size + 4 * count
    if len(data) < expected:
        raise MvolFormatError(f"{path}: truncated payload, expected {expected} bytes, found {len(data)}", offset=len(data))
    if len(data) > expected:
        raise MvolFormatError(f"{path}: {len(data) - expected} trailing bytes", offset=expected)
    voxels = np.frombuffer(data, dtype="<f4", count=count, offset=MVOL_HEADER.size)
    return voxels.reshape((h, w, d), order="F").astype(np.float64)


# ----- Volume preprocessing -----
def resample_trilinear(volume: np.ndarray, target_extent: int) -> np.ndarray:
    """Corner-aligned trilinear resampling to a target_extent^3 grid."""
    v = np.asarray(volume, dtype=np.float64)
    if v.ndim != 3:
        raise ValidationError(f"resample_trilinear: expected a 3-D volume, got shape {v.shape}")
    if target_extent < 2 or min(v.shape) < 2:
        raise ValidationError(f"resample_trilinear: extents must be >= 2, got {v.shape} -> {target_extent}")
    if v.shape == (target_extent,) * 3:
        return v.copy()
    axes = [np.linspace(0.0, n - 1.0, target_extent) for n in v.shape]
    grid = np.stack(np.meshgrid(*axes, indexing="ij"))
    return map_coordinates(v, grid, order=1, mode="nearest")


def normalize_minmax(volume: np.ndarray) -> np.ndarray:
    """Per-volume rescale to [0, 1]; constant volumes map to zeros."""
    v = np.asarray(volume, dtype=np.float64)
    lo, hi = float(v.min()), float(v.max())
    if hi == lo:
        return np.zeros_like(v)
    return (v - lo) / (hi - lo)


def load_volumes(records: Sequence[VolumeRecord], base_dir: PathLike, extent: int) -> np.ndarray:
    """Read, resample and normalise every record; returns (n, E, E, E)."""
    base = Path(base_dir)
    out = np.empty((len(records), extent, extent, extent))
    for i, rec in enumerate(records):
        path = Path(rec.path)
        vol = read_mvol(path if path.is_absolute() else base / path)
        if vol.shape != (extent,) * 3:
            vol = resample_trilinear(vol, extent)
        out[i] = normalize_minmax(vol)
    return out


# ----- Splits -----
@dataclass(frozen=True)
class SplitResult:
    train: List[VolumeRecord]
    val: List[VolumeRecord]
    test: List[VolumeRecord]
    achieved: Tuple[float, float, float] = field(default=(0.0, 0.0, 0.0))

    def parts(self) -> Tuple[List[VolumeRecord], List[VolumeRecord], List[VolumeRecord]]:
        return self.train, self.val, self.test


SPLIT_NAMES = ("train", "val", "test")


def group_split(
    records: Sequence[VolumeRecord],
    ratios: Tuple[float, float, float] = (8.0, 1.0, 1.0),
    seed: int = 0,
) -> SplitResult:
    """Subject-grouped split; session-count ratios are met greedily.

    Subjects are shuffled with `seed`, then ordered by descending session
    count, and each goes to the split with the largest remaining deficit.
    Ties go to train, then val, then test. Once the subjects left equal the
    splits still empty, they fill those splits.
    """
    if len(ratios) != 3 or any(r <= 0 for r in ratios):
        raise ValidationError(f"group_split: need three positive ratios, got {ratios}")
    sessions: Dict[str, int] = {}
    for rec in records:
        sessions[rec.subject_id] = sessions.get(rec.subject_id, 0) + 1
    subjects = sorted(sessions)
    if len(subjects) < 3:
        raise ValidationError(f"group_split: need at least 3 distinct subjects, got {len(subjects)}")

    order = [subjects[i] for i in np.random.default_rng(seed).permutation(len(subjects))]
    order.sort(key=lambda s: -sessions[s])

    total = len(records)
    weight = sum(ratios)
    targets = [total * r / weight for r in ratios]
    filled = [0, 0, 0]
    members = [0, 0, 0]
    assignment: Dict[str, int] = {}
    for i, subject in enumerate(order):
        deficits = [t - f for t, f in zip(targets, filled)]
        empty = [k for k in range(3) if members[k] == 0]
        pool = empty if len(order) - i <= len(empty) else [0, 1, 2]
        chosen = max(pool, key=lambda k: (deficits[k], -k))
        assignment[subject] = chosen
        filled[chosen] += sessions[subject]
        members[chosen] += 1

    split: Tuple[List[VolumeRecord], ...] = ([], [], [])
    for rec in records:
        split[assignment[rec.subject_id]].append(rec)
    achieved = tuple(f / total for f in filled)
    logger.info("group_split achieved ratios train=%.3f val=%.3f test=%.3f", *achieved)
    return SplitResult(split[0], split[1], split[2], achieved)  # type: ignore[arg-type]


# ----- Manifests -----
def _fmt(value: float) -> str:
    return repr(float(value))


def save_manifest(records: Sequence[VolumeRecord], path: PathLike) -> None:
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(MANIFEST_HEADER)
        for r in records:
            writer.writerow([r.subject_id, r.session_id, r.path, _fmt(r.age), "" if r.sdmt is None else _fmt(r.sdmt), r.sex])


def load_manifest(path: PathLike) -> List[VolumeRecord]:
    records: List[VolumeRecord] = []
    seen: Dict[Tuple[str, str], int] = {}
    with open(path, newline="", encoding="utf-8") as f:
        reader = csv.reader(f)
        header = next(reader, None)
        if header is None or tuple(h.strip() for h in header) != MANIFEST_HEADER:
            raise ValidationError(f"{path}:1: expected header {','.join(MANIFEST_HEADER)}")
        for row in reader:
            line = reader.line_num
            if not row:
                continue
            if len(row) != len(MANIFEST_HEADER):
                raise ValidationError(f"{path}:{line}: expected {len(MANIFEST_HEADER)} fields, got {len(row)}")
            subject, session, vol_path, age, sdmt, sex = (c.strip() for c in row)
            try:
                rec = VolumeRecord(
                    subject_id=subject,
                    session_id=session,
                    path=vol_path,
                    age=float(age),
                    sdmt=float(sdmt) if sdmt else None,
                    sex=int(sex),
                )
            except ValueError as exc:
                raise ValidationError(f"{path}:{line}: {exc}") from None
            if rec.key in seen:
                raise ValidationError(f"{path}:{line}: duplicate session {rec.record_id} (first on line {seen[rec.key]})")
            seen[rec.key] = line
            records.append(rec)
    return records
