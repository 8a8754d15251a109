"""Core dense 3D grid types with physical spacing.

All grids are numpy arrays of shape (w, h, d) indexed ``data[x, y, z]``.
The canonical linear (raster) order used for serialization and for every
"first voxel" tie-break in this package is x fastest, then y, then z,
i.e. Fortran order of the (w, h, d) array. Grids are frozen after
construction: the wrapped array is a private read-only copy, so instances
are safe to share across workers.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np

__all__ = [
    "Spacing",
    "Connectivity",
    "VoxelGrid",
    "BinaryMask",
    "ProbMap",
    "LabelMap",
    "OffsetField",
    "binarize",
    "instance_voxels",
    "bbox_extent_mm",
    "volume_mm3",
    "center_of_mass",
    "relabel_by_first_voxel",
]

PROB_TOL = 1e-6


@dataclass(frozen=True)
class Spacing:
    """Physical voxel size in millimeters along x, y, z."""

    sx: float
    sy: float
    sz: float

    def __post_init__(self):
        for name, value in (("sx", self.sx), ("sy", self.sy), ("sz", self.sz)):
            if not np.isfinite(value) or value <= 0:
                raise ValueError(f"spacing component {name} must be a positive finite real, got {value}")

    def as_array(self) -> np.ndarray:
        return np.array([self.sx, self.sy, self.sz], dtype=np.float64)

    def as_tuple(self) -> tuple[float, float, float]:
        return (float(self.sx), float(self.sy), float(self.sz))

    @property
    def voxel_volume_mm3(self) -> float:
        return float(self.sx * self.sy * self.sz)


class Connectivity(Enum):
    """3D neighborhood: 6 face, 18 face+edge, or 26 face+edge+vertex neighbors."""

    FACE6 = 6
    EDGE18 = 18
    VERTEX26 = 26

    def offsets(self) -> np.ndarray:
        """Neighbor offsets as an (n, 3) int array, excluding (0, 0, 0)."""
        rank = {Connectivity.FACE6: 1, Connectivity.EDGE18: 2, Connectivity.VERTEX26: 3}[self]
        offs = []
        for dx in (-1, 0, 1):
            for dy in (-1, 0, 1):
                for dz in (-1, 0, 1):
                    if (dx, dy, dz) == (0, 0, 0):
                        continue
                    if abs(dx) + abs(dy) + abs(dz) <= rank:
                        offs.append((dx, dy, dz))
        return np.array(offs, dtype=np.int64)

    def structure(self) -> np.ndarray:
        """3x3x3 boolean structuring element (center included)."""
        struct = np.zeros((3, 3, 3), dtype=bool)
        struct[1, 1, 1] = True
        for dx, dy, dz in self.offsets():
            struct[dx + 1, dy + 1, dz + 1] = True
        return struct


def _freeze(arr: np.ndarray) -> np.ndarray:
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class VoxelGrid:
    """Dense scalar field over the voxel domain, with physical spacing."""

    data: np.ndarray
    spacing: Spacing

    _dtype = np.float64

    def __post_init__(self):
        arr = np.array(self.data, dtype=type(self)._dtype, copy=True, order="C")
        if arr.ndim != 3 or min(arr.shape) < 1:
            raise ValueError(f"grid data must be 3D with positive dims, got shape {arr.shape}")
        arr = self._validate(arr)
        object.__setattr__(self, "data", _freeze(arr))

    def _validate(self, arr: np.ndarray) -> np.ndarray:
        return arr

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.data.shape

    @property
    def n_voxels(self) -> int:
        return int(self.data.size)

    def value_at(self, x: int, y: int, z: int):
        return self.data[x, y, z]

    def same_geometry(self, other: "VoxelGrid") -> bool:
        return self.dims == other.dims and self.spacing == other.spacing


class BinaryMask(VoxelGrid):
    """VoxelGrid whose values are exactly 0 or 1."""

    _dtype = np.uint8

    def _validate(self, arr: np.ndarray) -> np.ndarray:
        raw = np.asarray(self.data)
        if raw.dtype.kind == "f" and not np.isfinite(raw).all():
            raise ValueError("binary mask contains non-finite values")
        if not np.isin(raw, (0, 1)).all():
            raise ValueError("binary mask values must be exactly 0 or 1")
        return arr

    def foreground_count(self) -> int:
        return int(np.count_nonzero(self.data))


class ProbMap(VoxelGrid):
    """VoxelGrid of probabilities in [0, 1]; values within 1e-6 of the range are clamped."""

    _dtype = np.float64

    def _validate(self, arr: np.ndarray) -> np.ndarray:
        if not np.isfinite(arr).all():
            raise ValueError("probability map contains non-finite values")
        if arr.min() < -PROB_TOL or arr.max() > 1.0 + PROB_TOL:
            raise ValueError("probability map values fall outside [0, 1] by more than 1e-6")
        return np.clip(arr, 0.0, 1.0)


class LabelMap(VoxelGrid):
    """VoxelGrid of non-negative integer instance ids; 0 is background."""

    _dtype = np.int32

    def _validate(self, arr: np.ndarray) -> np.ndarray:
        raw = np.asarray(self.data)
        if raw.dtype.kind == "f":
            if not np.isfinite(raw).all() or not (raw == np.floor(raw)).all():
                raise ValueError("label map values must be integers")
        if raw.dtype.kind not in "fiub":
            raise ValueError(f"label map values must be integers, got dtype {raw.dtype}")
        if (raw < 0).any():
            raise ValueError("label map values must be non-negative")
        return arr

    def labels(self) -> tuple[int, ...]:
        """Sorted instance ids present in the map (background excluded)."""
        uniq = np.unique(self.data)
        return tuple(int(v) for v in uniq if v > 0)

    def n_instances(self) -> int:
        return len(self.labels())

    def foreground(self) -> BinaryMask:
        return BinaryMask((self.data > 0).astype(np.uint8), self.spacing)


@dataclass(frozen=True, eq=False)
class OffsetField:
    """Per-voxel 3D displacement in voxel units, stored as three co-registered grids."""

    dx: VoxelGrid
    dy: VoxelGrid
    dz: VoxelGrid

    def __post_init__(self):
        if not (self.dx.same_geometry(self.dy) and self.dx.same_geometry(self.dz)):
            raise ValueError("offset components must share dims and spacing")

    @classmethod
    def from_arrays(cls, dx, dy, dz, spacing: Spacing) -> "OffsetField":
        return cls(VoxelGrid(dx, spacing), VoxelGrid(dy, spacing), VoxelGrid(dz, spacing))

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.dx.dims

    @property
    def spacing(self) -> Spacing:
        return self.dx.spacing

    def vectors_at(self, coords: np.ndarray) -> np.ndarray:
        """Offset vectors for an (n, 3) array of voxel coordinates, as (n, 3) floats."""
        x, y, z = coords[:, 0], coords[:, 1], coords[:, 2]
        return np.stack(
            [self.dx.data[x, y, z], self.dy.data[x, y, z], self.dz.data[x, y, z]], axis=1
        )


def binarize(p: ProbMap, threshold: float) -> BinaryMask:
    """Threshold a probability map; values >= threshold become foreground."""
    if not (0.0 < threshold < 1.0):
        raise ValueError(f"threshold must lie in (0, 1), got {threshold}")
    return BinaryMask((p.data >= threshold).astype(np.uint8), p.spacing)


def instance_voxels(m: LabelMap, k: int) -> set[tuple[int, int, int]]:
    """Coordinate set of instance k; empty set if k is absent."""
    if k < 1:
        raise ValueError(f"instance id must be >= 1, got {k}")
    xs, ys, zs = np.nonzero(m.data == k)
    return {(int(x), int(y), int(z)) for x, y, z in zip(xs, ys, zs)}


def _instance_coords(m: LabelMap, k: int) -> np.ndarray:
    if k < 1:
        raise ValueError(f"instance id must be >= 1, got {k}")
    coords = np.argwhere(m.data == k)
    if coords.size == 0:
        raise ValueError(f"unknown instance id: {k}")
    return coords


def bbox_extent_mm(m: LabelMap, k: int) -> tuple[float, float, float]:
    """Axis-aligned bounding-box extent of instance k in millimeters."""
    coords = _instance_coords(m, k)
    span = coords.max(axis=0) - coords.min(axis=0) + 1
    ext = span * m.spacing.as_array()
    return (float(ext[0]), float(ext[1]), float(ext[2]))


def volume_mm3(m: LabelMap, k: int) -> float:
    """Physical volume of instance k in cubic millimeters."""
    coords = _instance_coords(m, k)
    return coords.shape[0] * m.spacing.voxel_volume_mm3


def center_of_mass(m: LabelMap, k: int) -> tuple[float, float, float]:
    """Unweighted mean voxel coordinate of instance k (real-valued, not rounded)."""
    coords = _instance_coords(m, k)
    com = coords.mean(axis=0)
    return (float(com[0]), float(com[1]), float(com[2]))


def relabel_by_first_voxel(m: LabelMap) -> LabelMap:
    """Relabel instances 1..K by raster order (x fastest) of each instance's first voxel.

    This is the canonical deterministic labeling used by every pipeline in
    this package, so that voxel-identical instance maps compare equal.
    """
    flat = m.data.ravel(order="F")
    uniq, first = np.unique(flat, return_index=True)
    fg = uniq > 0
    uniq, first = uniq[fg], first[fg]
    order = np.argsort(first, kind="stable")
    mapping = np.zeros(int(uniq.max()) + 1 if uniq.size else 1, dtype=np.int32)
    mapping[uniq[order]] = np.arange(1, uniq.size + 1, dtype=np.int32)
    return LabelMap(mapping[m.data], m.spacing)
