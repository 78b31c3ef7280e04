"""Procedural multi-modal tumor phantoms arranged as a sequence of shifted tasks.

Each task draws 2D, 4-modality images with a nested tumor (edema, necrotic
core, enhancing tissue) on a smoothly varying background. Later tasks change
the tumor shape family, the per-modality intensity gains and the noise level.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Literal

import numpy as np

N_MODALITIES = 4
N_CLASSES = 4  # background, edema, necrotic core, enhancing
MODALITY_NAMES = ("t1", "t1ce", "t2", "flair")
DATASET_FORMAT = "serdiff-dataset/1"

ShapeFamily = Literal["ellipse", "lobulated", "ring"]
Split = Literal["train", "val", "test"]

# Class-dependent intensity templates, rows = class, columns = modality.
INTENSITY_TEMPLATES = np.array(
    [
        [0.45, 0.40, 0.35, 0.30],  # background tissue
        [0.40, 0.42, 0.62, 0.72],  # edema
        [0.22, 0.30, 0.78, 0.48],  # necrotic core
        [0.48, 0.85, 0.55, 0.58],  # enhancing
    ]
)

_TASK_TABLE: dict[int, tuple[str, float, float]] = {
    1: ("ellipse", 0.0, 0.05),
    2: ("lobulated", 0.20, 0.08),
    3: ("ring", 0.35, 0.10),
}
_MAX_PLACEMENT_TRIES = 16


@dataclass(frozen=True)
class TaskSpec:
    task_id: int
    n_samples: int
    image_size: int = 64
    shape_family: ShapeFamily = "ellipse"
    modality_gains: tuple[float, float, float, float] = (1.0, 1.0, 1.0, 1.0)
    noise_sigma: float = 0.05
    seed: int = 0

    def __post_init__(self) -> None:
        if self.task_id < 1:
            raise ValueError(f"task_id must be >= 1, got {self.task_id}")
        if self.n_samples <= 0:
            raise ValueError("n_samples must be positive")
        if self.image_size < 16:
            raise ValueError("image_size must be >= 16")
        if self.shape_family not in ("ellipse", "lobulated", "ring"):
            raise ValueError(f"unknown shape family {self.shape_family!r}")
        if len(self.modality_gains) != N_MODALITIES:
            raise ValueError("exactly 4 modality gains are required")
        if not all(0.0 < g <= 2.0 for g in self.modality_gains):
            raise ValueError("modality gains must lie in (0, 2]")
        if not 0.0 <= self.noise_sigma < 1.0:
            raise ValueError("noise_sigma must lie in [0, 1)")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["modality_gains"] = list(self.modality_gains)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TaskSpec":
        d = dict(d)
        d["modality_gains"] = tuple(float(g) for g in d["modality_gains"])
        return cls(**d)


@dataclass
class Sample:
    modalities: np.ndarray  # float32 [4, H, W] in [0, 1]
    mask: np.ndarray  # float32 one-hot [N_CLASSES, H, W]
    task_id: int
    index: int = -1

    @property
    def labels(self) -> np.ndarray:
        return self.mask.argmax(axis=0)


@dataclass
class Dataset:
    samples: list[Sample]
    split: Split
    task_id: int = field(init=False)

    def __post_init__(self) -> None:
        if not self.samples:
            raise ValueError("a Dataset needs at least one sample")
        ids = {s.task_id for s in self.samples}
        shapes = {s.modalities.shape for s in self.samples}
        if len(ids) != 1 or len(shapes) != 1:
            raise ValueError("samples must share task_id and image shape")
        self.task_id = ids.pop()

    def __len__(self) -> int:
        return len(self.samples)

    @property
    def indices(self) -> list[int]:
        return [s.index for s in self.samples]

    def arrays(self) -> tuple[np.ndarray, np.ndarray]:
        """Stacked ``(modalities [N,4,H,W], masks [N,C,H,W])``."""
        x = np.stack([s.modalities for s in self.samples])
        y = np.stack([s.mask for s in self.samples])
        return x, y


def make_task_spec(
    task_id: int, base_seed: int, n_samples: int = 200, image_size: int = 64
) -> TaskSpec:
    """Deterministic task definition for position ``task_id`` in the sequence.

    Tasks beyond 3 keep cycling the shape families with the largest shift.
    """
    if task_id < 1:
        raise ValueError(f"task_id must be >= 1, got {task_id}")
    family, spread, sigma = _TASK_TABLE.get(
        task_id, (("ellipse", "lobulated", "ring")[(task_id - 1) % 3], 0.35, 0.10)
    )
    seed = base_seed + task_id
    if spread == 0.0:
        gains = (1.0, 1.0, 1.0, 1.0)
    else:
        rng = np.random.default_rng([seed, 7919])
        # Random signs, magnitudes in [spread/2, spread], so every modality moves.
        mags = rng.uniform(spread / 2, spread, size=N_MODALITIES)
        signs = rng.choice([-1.0, 1.0], size=N_MODALITIES)
        gains = tuple(round(float(1.0 + s * m), 6) for s, m in zip(signs, mags))
    return TaskSpec(
        task_id=task_id,
        n_samples=n_samples,
        image_size=image_size,
        shape_family=family,
        modality_gains=gains,
        noise_sigma=sigma,
        seed=seed,
    )


def _radial_region(yy, xx, cy, cx, ry, rx, angle, lobes=0, lobe_amp=0.0, phase=0.0):
    c, s = np.cos(angle), np.sin(angle)
    dy, dx = yy - cy, xx - cx
    u = (c * dx + s * dy) / rx
    v = (-s * dx + c * dy) / ry
    r = np.hypot(u, v)
    if lobes:
        theta = np.arctan2(v, u)
        return r <= 1.0 + lobe_amp * np.sin(lobes * theta + phase)
    return r <= 1.0


def _tumor_labels(rng: np.random.Generator, size: int, family: str) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    ry = rng.uniform(0.16, 0.28) * size
    rx = rng.uniform(0.16, 0.28) * size
    margin = max(ry, rx) * 1.3 + 1
    cy = rng.uniform(margin, size - margin)
    cx = rng.uniform(margin, size - margin)
    angle = rng.uniform(0, np.pi)
    labels = np.zeros((size, size), dtype=np.int64)

    if family == "lobulated":
        lobes = int(rng.integers(3, 6))
        amp = rng.uniform(0.15, 0.3)
        phase = rng.uniform(0, 2 * np.pi)
        whole = _radial_region(yy, xx, cy, cx, ry, rx, angle, lobes, amp, phase)
        core = _radial_region(yy, xx, cy, cx, 0.55 * ry, 0.55 * rx, angle, lobes, amp, phase)
    else:
        whole = _radial_region(yy, xx, cy, cx, ry, rx, angle)
        core = _radial_region(yy, xx, cy, cx, 0.55 * ry, 0.55 * rx, angle)
    labels[whole] = 1
    labels[core] = 2

    if family == "ring":
        inner = _radial_region(yy, xx, cy, cx, 0.35 * ry, 0.35 * rx, angle)
        labels[core & ~inner] = 3
    else:
        oy, ox = rng.uniform(-0.15, 0.15, size=2) * np.array([ry, rx])
        enh = _radial_region(yy, xx, cy + oy, cx + ox, 0.25 * ry, 0.25 * rx, angle)
        labels[core & enh] = 3
    return labels


def generate_sample(spec: TaskSpec, sample_index: int) -> Sample:
    """Draw sample ``sample_index`` of a task; a pure function of (spec, index)."""
    if not 0 <= sample_index < spec.n_samples:
        raise ValueError(f"sample_index {sample_index} outside [0, {spec.n_samples})")
    rng = np.random.default_rng([spec.seed, sample_index])
    size = spec.image_size

    for _ in range(_MAX_PLACEMENT_TRIES):
        labels = _tumor_labels(rng, size, spec.shape_family)
        if (labels > 0).any():
            break
    else:  # pragma: no cover - geometry makes this unreachable for size >= 16
        raise RuntimeError("could not place a non-empty tumor")

    # Smooth background ramp: low-amplitude linear gradient, independent per modality.
    yy, xx = np.mgrid[0:size, 0:size] / (size - 1) - 0.5
    slopes = rng.uniform(-0.08, 0.08, size=(N_MODALITIES, 2))
    ramp = slopes[:, 0, None, None] * yy + slopes[:, 1, None, None] * xx

    gains = np.asarray(spec.modality_gains)[:, None, None]
    template = INTENSITY_TEMPLATES[labels].transpose(2, 0, 1)  # [4, H, W]
    img = gains * (template + ramp)
    if spec.noise_sigma > 0:
        img = img + rng.normal(0.0, spec.noise_sigma, size=img.shape)
    img = np.clip(img, 0.0, 1.0).astype(np.float32)

    mask = np.eye(N_CLASSES, dtype=np.float32)[labels].transpose(2, 0, 1)
    return Sample(np.ascontiguousarray(img), np.ascontiguousarray(mask), spec.task_id, sample_index)


def split_sizes(n: int, fractions: tuple[float, float, float]) -> tuple[int, int, int]:
    if len(fractions) != 3 or any(f <= 0 for f in fractions):
        raise ValueError("split fractions must be three positive numbers")
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise ValueError(f"split fractions must sum to 1, got {sum(fractions)}")
    n_val = int(np.floor(fractions[1] * n))
    n_test = int(np.floor(fractions[2] * n))
    return n - n_val - n_test, n_val, n_test


def generate_task(
    spec: TaskSpec, split_fractions: tuple[float, float, float] = (0.8, 0.1, 0.1)
) -> tuple[Dataset, Dataset, Dataset]:
    n_train, n_val, _ = split_sizes(spec.n_samples, split_fractions)
    samples = [generate_sample(spec, i) for i in range(spec.n_samples)]
    return (
        Dataset(samples[:n_train], "train"),
        Dataset(samples[n_train : n_train + n_val], "val"),
        Dataset(samples[n_train + n_val :], "test"),
    )


def dataset_checksum(ds: Dataset) -> str:
    h = hashlib.sha256()
    for s in ds.samples:
        h.update(np.int64(s.index).tobytes())
        h.update(s.modalities.tobytes())
        h.update(s.mask.tobytes())
    return h.hexdigest()


def save_dataset(ds: Dataset, directory: str | Path, spec: TaskSpec | None = None) -> Path:
    """Write one ``.npz`` per sample plus ``manifest.json``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for s in ds.samples:
        np.savez(directory / f"sample_{s.index:05d}.npz", modalities=s.modalities, mask=s.mask)
    manifest = {
        "format": DATASET_FORMAT,
        "task_id": ds.task_id,
        "split": ds.split,
        "spec": spec.to_dict() if spec is not None else None,
        "n_samples": len(ds),
        "indices": ds.indices,
        "checksum": dataset_checksum(ds),
    }
    (directory / "manifest.json").write_text(json.dumps(manifest, indent=2))
    return directory


def load_dataset(directory: str | Path, verify: bool = True) -> Dataset:
    directory = Path(directory)
    manifest_path = directory / "manifest.json"
    if not manifest_path.exists():
        raise FileNotFoundError(f"no dataset manifest in {directory}")
    manifest = json.loads(manifest_path.read_text())
    if manifest.get("format") != DATASET_FORMAT:
        raise ValueError(f"unsupported dataset format {manifest.get('format')!r}")
    samples = []
    for idx in manifest["indices"]:
        with np.load(directory / f"sample_{idx:05d}.npz") as z:
            samples.append(Sample(z["modalities"], z["mask"], manifest["task_id"], idx))
    ds = Dataset(samples, manifest["split"])
    if verify and dataset_checksum(ds) != manifest["checksum"]:
        raise ValueError(f"checksum mismatch for dataset in {directory}")
    return ds
