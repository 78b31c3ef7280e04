"""Overlap and surface metrics plus forgetting bookkeeping."""

from __future__ import annotations

import csv
import io
import math
from pathlib import Path

import numpy as np
from scipy import ndimage


class UndefinedMetricError(ValueError):
    """Raised when a metric has no value for the given inputs."""


ACC_FORMAT = "# serdiff-accmatrix/1"

_CROSS = ndimage.generate_binary_structure(2, 1)


def _pair(pred, gt) -> tuple[np.ndarray, np.ndarray]:
    p = np.asarray(pred, dtype=bool)
    g = np.asarray(gt, dtype=bool)
    if p.shape != g.shape:
        raise ValueError(f"shape mismatch: {p.shape} vs {g.shape}")
    return p, g


def dice(pred, gt) -> float:
    p, g = _pair(pred, gt)
    denom = int(p.sum()) + int(g.sum())
    if denom == 0:
        return 1.0
    return 2.0 * int(np.logical_and(p, g).sum()) / denom


def iou(pred, gt) -> float:
    p, g = _pair(pred, gt)
    union = int(np.logical_or(p, g).sum())
    if union == 0:
        return 1.0
    return int(np.logical_and(p, g).sum()) / union


def boundary(mask: np.ndarray) -> np.ndarray:
    """Foreground pixels with a 4-neighbour outside the mask (image edge counts as outside)."""
    mask = np.asarray(mask, dtype=bool)
    return mask & ~ndimage.binary_erosion(mask, structure=_CROSS, border_value=0)


def surface_distances(pred, gt, spacing_mm: float = 1.0) -> np.ndarray:
    """Pooled directed boundary distances P->G and G->P, in mm."""
    p, g = _pair(pred, gt)
    if spacing_mm <= 0:
        raise ValueError("spacing_mm must be positive")
    if not p.any() or not g.any():
        raise UndefinedMetricError("surface distance is undefined for an empty mask")
    bp, bg = boundary(p), boundary(g)
    # EDT of the complement gives, at every pixel, the distance to the nearest boundary pixel.
    to_g = ndimage.distance_transform_edt(~bg, sampling=spacing_mm)
    to_p = ndimage.distance_transform_edt(~bp, sampling=spacing_mm)
    return np.concatenate([to_g[bp], to_p[bg]])


def hd95(pred, gt, spacing_mm: float = 1.0) -> float:
    d = surface_distances(pred, gt, spacing_mm)
    return float(np.percentile(d, 95, method="linear"))


def check_one_hot(mask: np.ndarray) -> np.ndarray:
    m = np.asarray(mask)
    if m.ndim != 3:
        raise ValueError(f"expected a [C, H, W] one-hot mask, got shape {m.shape}")
    if not np.isin(m, (0, 1)).all() or not (m.sum(axis=0) == 1).all():
        raise ValueError("mask is not one-hot along the class axis")
    return m.astype(bool)


def mean_class_dice(pred_mask, gt_mask) -> float:
    """Mean Dice over the tumor classes (channel 0 is background and is skipped)."""
    p = check_one_hot(pred_mask)
    g = check_one_hot(gt_mask)
    if p.shape != g.shape:
        raise ValueError(f"shape mismatch: {p.shape} vs {g.shape}")
    return float(np.mean([dice(p[c], g[c]) for c in range(1, p.shape[0])]))


def labels_to_one_hot(labels: np.ndarray, n_classes: int) -> np.ndarray:
    return np.eye(n_classes, dtype=np.float32)[labels].transpose(2, 0, 1)


class AccMatrix:
    """Upper-triangular accuracy table: ``acc[i, t]`` is task ``i`` after stage ``t``.

    Indices are 0-based internally; entries with ``t < i`` are NaN.
    """

    def __init__(self, K: int):
        if K < 1:
            raise ValueError("AccMatrix needs K >= 1")
        self.K = K
        self.acc = np.full((K, K), np.nan)

    @classmethod
    def from_rows(cls, rows) -> "AccMatrix":
        """Build from rows where row ``i`` lists stages ``i..K`` (blank entries omitted)."""
        K = len(rows)
        m = cls(K)
        for i, row in enumerate(rows):
            if len(row) != K - i:
                raise ValueError(f"row {i + 1} must have {K - i} entries, got {len(row)}")
            for j, v in enumerate(row):
                m.set(i, i + j, v)
        return m

    def set(self, task: int, stage: int, value: float) -> None:
        if stage < task:
            raise ValueError("accuracy is only defined for stage >= task")
        if not 0.0 <= value <= 1.0:
            raise ValueError(f"accuracy {value} outside [0, 1]")
        self.acc[task, stage] = value

    def is_complete(self) -> bool:
        iu = np.triu_indices(self.K)
        return bool(np.isfinite(self.acc[iu]).all())

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write(ACC_FORMAT + "\n")
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["task"] + [f"stage_{t + 1}" for t in range(self.K)])
        for i in range(self.K):
            w.writerow(
                [i + 1] + ["" if t < i else repr(float(self.acc[i, t])) for t in range(self.K)]
            )
        return buf.getvalue()

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_csv())

    @classmethod
    def from_csv(cls, text: str) -> "AccMatrix":
        lines = text.splitlines()
        if not lines or lines[0].strip() != ACC_FORMAT:
            raise ValueError("missing accmatrix format tag")
        rows = list(csv.reader(lines[1:]))[1:]
        m = cls(len(rows))
        for i, row in enumerate(rows):
            for t, cell in enumerate(row[1:]):
                if cell != "":
                    m.set(i, t, float(cell))
        return m

    @classmethod
    def load(cls, path: str | Path) -> "AccMatrix":
        return cls.from_csv(Path(path).read_text())


def forgetting_rate(m: AccMatrix) -> float:
    """Average drop from each earlier task's best accuracy to its final accuracy."""
    K = m.K
    if K < 2:
        raise UndefinedMetricError("forgetting rate needs at least two tasks")
    if not m.is_complete():
        raise ValueError("AccMatrix has missing entries")
    drops = [np.max(m.acc[i, i:]) - m.acc[i, K - 1] for i in range(K - 1)]
    return math.fsum(drops) / (K - 1)
