"""Voxel-grid containers and per-class mask operations.

Conventions shared by the whole package:

* grids are indexed ``(ix, iy, iz)`` and linearized x-fastest, i.e. the
  linear index of a voxel is ``ix + nx * (iy + ny * iz)``
* spacings and physical distances are always millimeters
* class ids are small contiguous integers, id 0 is background

All containers are immutable after construction (the wrapped numpy
arrays are marked read-only) so they can be shared freely between
threads.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

__all__ = [
    "DEFAULT_CLASS_NAMES",
    "VoxelSpacing",
    "ClassTable",
    "LabelVolume",
    "BinaryMask",
    "ProbVolume",
    "ConfusionCounts",
    "class_mask",
    "one_hot",
    "argmax_labels",
    "apply_region_mask",
    "confusion_counts",
]

DEFAULT_CLASS_NAMES = (
    "background",
    "Bronchiectasis",
    "Peribronchial Thickening",
    "Bronchial mucus",
    "Bronchiolar mucus",
    "Consolidation",
)


def _frozen(arr: np.ndarray) -> np.ndarray:
    arr.flags.writeable = False
    return arr


@dataclass(frozen=True)
class VoxelSpacing:
    """Physical voxel size in millimeters along x, y and z."""

    dx: float
    dy: float
    dz: float

    def __post_init__(self):
        for name in ("dx", "dy", "dz"):
            v = float(getattr(self, name))
            if not (np.isfinite(v) and v > 0.0):
                raise ValueError(f"spacing {name} must be positive and finite, got {getattr(self, name)!r}")
            object.__setattr__(self, name, v)

    @classmethod
    def of(cls, value) -> "VoxelSpacing":
        if isinstance(value, VoxelSpacing):
            return value
        sx, sy, sz = value
        return cls(float(sx), float(sy), float(sz))

    def as_array(self) -> np.ndarray:
        return np.array([self.dx, self.dy, self.dz], dtype=np.float64)

    @property
    def voxel_volume_mm3(self) -> float:
        return self.dx * self.dy * self.dz


@dataclass(frozen=True)
class ClassTable:
    """Ordered (id, name) pairs; ids contiguous from 0, id 0 is background."""

    entries: tuple

    def __post_init__(self):
        entries = tuple((int(i), str(n)) for i, n in self.entries)
        if not entries:
            raise ValueError("class table must not be empty")
        ids = [i for i, _ in entries]
        if ids != list(range(len(entries))):
            raise ValueError(f"class ids must be unique and contiguous from 0, got {ids}")
        object.__setattr__(self, "entries", entries)

    @classmethod
    def default(cls) -> "ClassTable":
        return cls.from_names(DEFAULT_CLASS_NAMES)

    @classmethod
    def from_names(cls, names: Sequence[str]) -> "ClassTable":
        return cls(tuple(enumerate(names)))

    @classmethod
    def generic(cls, num_classes: int) -> "ClassTable":
        if num_classes == len(DEFAULT_CLASS_NAMES):
            return cls.default()
        return cls.from_names(["background"] + [f"class_{k}" for k in range(1, num_classes)])

    @property
    def num_classes(self) -> int:
        return len(self.entries)

    @property
    def ids(self) -> tuple:
        return tuple(i for i, _ in self.entries)

    @property
    def names(self) -> tuple:
        return tuple(n for _, n in self.entries)

    @property
    def foreground_ids(self) -> tuple:
        return tuple(i for i, _ in self.entries if i != 0)

    def name_of(self, class_id: int) -> str:
        if class_id not in self:
            raise ValueError(f"unknown class id {class_id}; table has ids 0..{self.num_classes - 1}")
        return self.entries[class_id][1]

    def __contains__(self, class_id: int) -> bool:
        return 0 <= int(class_id) < self.num_classes


@dataclass(frozen=True)
class LabelVolume:
    """3D grid of integer class labels with physical spacing."""

    data: np.ndarray  # (nx, ny, nz) uint8
    spacing: VoxelSpacing
    class_table: ClassTable

    def __post_init__(self):
        arr = np.asarray(self.data)
        if arr.ndim != 3:
            raise ValueError(f"label volume must be 3D, got shape {arr.shape}")
        if arr.dtype != np.uint8:
            if not np.issubdtype(arr.dtype, np.integer):
                raise ValueError(f"label data must be integer, got dtype {arr.dtype}")
            if arr.size and (arr.min() < 0 or arr.max() > 255):
                raise ValueError("label values outside uint8 range")
            arr = arr.astype(np.uint8)
        if arr.size and int(arr.max()) >= self.class_table.num_classes:
            raise ValueError(
                f"label {int(arr.max())} not present in class table "
                f"(ids 0..{self.class_table.num_classes - 1})"
            )
        object.__setattr__(self, "data", _frozen(arr))
        object.__setattr__(self, "spacing", VoxelSpacing.of(self.spacing))

    @classmethod
    def from_array(cls, arr, spacing, class_table: ClassTable | None = None) -> "LabelVolume":
        arr = np.asarray(arr)
        if class_table is None:
            top = int(arr.max()) if arr.size else 0
            n = max(top + 1, len(DEFAULT_CLASS_NAMES))
            class_table = ClassTable.generic(n)
        return cls(arr, VoxelSpacing.of(spacing), class_table)

    @property
    def dims(self) -> tuple:
        return self.data.shape

    @property
    def voxel_volume_mm3(self) -> float:
        return self.spacing.voxel_volume_mm3


@dataclass(frozen=True)
class BinaryMask:
    """Boolean voxel grid aligned with the volume it was derived from."""

    data: np.ndarray  # (nx, ny, nz) bool
    spacing: VoxelSpacing

    def __post_init__(self):
        arr = np.asarray(self.data)
        if arr.ndim != 3:
            raise ValueError(f"mask must be 3D, got shape {arr.shape}")
        if arr.dtype != bool:
            arr = arr.astype(bool)
        object.__setattr__(self, "data", _frozen(arr))
        object.__setattr__(self, "spacing", VoxelSpacing.of(self.spacing))

    @property
    def dims(self) -> tuple:
        return self.data.shape

    def count(self) -> int:
        return int(np.count_nonzero(self.data))


@dataclass(frozen=True)
class ProbVolume:
    """Per-class probability grids, channel-major: shape (C, nx, ny, nz)."""

    data: np.ndarray
    spacing: VoxelSpacing
    normalized: bool = False

    def __post_init__(self):
        arr = np.asarray(self.data, dtype=np.float64)
        if arr.ndim != 4:
            raise ValueError(f"probability volume must have shape (C, nx, ny, nz), got {arr.shape}")
        if arr.shape[0] < 1:
            raise ValueError("probability volume needs at least one class channel")
        if not np.isfinite(arr).all():
            raise ValueError("probability volume contains non-finite values")
        if arr.size and (arr.min() < 0.0 or arr.max() > 1.0):
            raise ValueError("probabilities must lie in [0, 1]")
        if self.normalized and arr.size:
            sums = arr.sum(axis=0)
            if np.abs(sums - 1.0).max() > 1e-6:
                raise ValueError("normalized flag set but per-voxel class sums deviate from 1")
        object.__setattr__(self, "data", _frozen(arr))
        object.__setattr__(self, "spacing", VoxelSpacing.of(self.spacing))

    @property
    def num_classes(self) -> int:
        return self.data.shape[0]

    @property
    def dims(self) -> tuple:
        return self.data.shape[1:]

    def channel(self, class_id: int) -> np.ndarray:
        if not 0 <= class_id < self.num_classes:
            raise ValueError(f"unknown class channel {class_id}; volume has {self.num_classes}")
        return self.data[class_id]


@dataclass(frozen=True)
class ConfusionCounts:
    """Voxel tallies of a 2x2 confusion table for one class."""

    tp: int
    fp: int
    fn: int
    tn: int

    def __post_init__(self):
        for name in ("tp", "fp", "fn", "tn"):
            v = int(getattr(self, name))
            if v < 0:
                raise ValueError(f"confusion count {name} must be non-negative, got {v}")
            object.__setattr__(self, name, v)

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn


def _require_same_grid(a, b, what: str = "grids"):
    if a.dims != b.dims:
        raise ValueError(f"{what} have mismatched shapes {a.dims} vs {b.dims}")
    if a.spacing != b.spacing:
        raise ValueError(f"{what} have mismatched spacings {a.spacing} vs {b.spacing}")


def class_mask(vol: LabelVolume, class_id: int) -> BinaryMask:
    """Binary mask of the voxels carrying ``class_id`` (one-vs-rest)."""
    if class_id not in vol.class_table:
        raise ValueError(
            f"unknown class id {class_id}; table has ids 0..{vol.class_table.num_classes - 1}"
        )
    return BinaryMask(vol.data == np.uint8(class_id), vol.spacing)


def one_hot(vol: LabelVolume) -> ProbVolume:
    """One-hot encode a label volume into a normalized probability volume."""
    c = vol.class_table.num_classes
    data = np.zeros((c,) + vol.dims, dtype=np.float64)
    for k in range(c):
        data[k] = vol.data == np.uint8(k)
    return ProbVolume(data, vol.spacing, normalized=True)


def argmax_labels(p: ProbVolume, class_table: ClassTable | None = None) -> LabelVolume:
    """Hard labels from per-class probabilities.

    Ties resolve to the smallest class id, so the result is deterministic
    and independent of voxel storage order.
    """
    if p.num_classes < 2:
        raise ValueError("argmax over class channels needs at least 2 channels")
    if class_table is None:
        class_table = ClassTable.generic(p.num_classes)
    if class_table.num_classes != p.num_classes:
        raise ValueError(
            f"class table has {class_table.num_classes} entries but volume has "
            f"{p.num_classes} channels"
        )
    labels = np.argmax(p.data, axis=0).astype(np.uint8)
    return LabelVolume(labels, p.spacing, class_table)


def apply_region_mask(x, region: BinaryMask):
    """Zero out everything outside ``region``; returns the same type as ``x``."""
    if isinstance(x, BinaryMask):
        _require_same_grid(x, region, "mask and region")
        return BinaryMask(x.data & region.data, x.spacing)
    if isinstance(x, ProbVolume):
        if x.dims != region.dims:
            raise ValueError(f"volume and region have mismatched shapes {x.dims} vs {region.dims}")
        if x.spacing != region.spacing:
            raise ValueError(f"volume and region have mismatched spacings {x.spacing} vs {region.spacing}")
        data = np.where(region.data[None, ...], x.data, 0.0)
        return ProbVolume(data, x.spacing, normalized=False)
    raise TypeError(f"cannot apply region mask to {type(x).__name__}")


def confusion_counts(gt: BinaryMask, pred: BinaryMask, region: BinaryMask | None = None) -> ConfusionCounts:
    """TP/FP/FN/TN voxel counts, restricted to ``region`` when given."""
    _require_same_grid(gt, pred, "ground truth and prediction")
    g = gt.data
    p = pred.data
    if region is not None:
        _require_same_grid(gt, region, "mask and region")
        g = g & region.data
        p = p & region.data
        total = region.count()
    else:
        total = g.size
    tp = int(np.count_nonzero(g & p))
    cg = int(np.count_nonzero(g))
    cp = int(np.count_nonzero(p))
    fn = cg - tp
    fp = cp - tp
    tn = total - tp - fp - fn
    return ConfusionCounts(tp=tp, fp=fp, fn=fn, tn=tn)
