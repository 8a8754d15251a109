"""Instance-splitting pipelines and reference target generation.

Three ways to turn dense network outputs into an instance map:

* :func:`cc_split` - threshold, then plain connected components.
* :func:`acls_split` - threshold, detect per-lesion probability peaks via the
  Hessian test, then assign every foreground voxel to the nearest detected
  center (automated confluent lesion splitting).
* :func:`center_offset_split` - threshold, pick centers off a heatmap with
  max-pool NMS, then cluster voxels by their offset-shifted position.

All pipelines end with the clinical size filter (instances thinner than
3 mm on any axis or under 14 mm^3 are dropped) and label surviving
instances 1..K in raster order of each instance's first voxel.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .morphology import connected_components, hessian_negative_candidates, maxpool_nms
from .volume import (
    BinaryMask,
    Connectivity,
    LabelMap,
    OffsetField,
    ProbMap,
    binarize,
    relabel_by_first_voxel,
)

__all__ = [
    "SplitConfig",
    "CenterList",
    "NoCentersError",
    "cc_split",
    "acls_centers",
    "acls_split",
    "cluster_with_offsets",
    "center_offset_split",
    "filter_small_instances",
    "reference_center_heatmap",
    "reference_offsets",
]


class NoCentersError(RuntimeError):
    """Raised when foreground voxels exist but no centers were detected."""


@dataclass(frozen=True)
class SplitConfig:
    """Knobs shared by the splitting pipelines.

    Defaults follow the evaluation protocol: probability threshold 0.5,
    6-connectivity for plain components, 26-connectivity when clustering
    peak candidates, and the 3 mm / 14 mm^3 minimum instance size.
    """

    prob_threshold: float = 0.5
    cc_connectivity: Connectivity = Connectivity.FACE6
    acls_center_connectivity: Connectivity = Connectivity.VERTEX26
    acls_center_mode: str = "centroid"  # or "max_prob"
    acls_smoothing_sigma: float | None = None
    nms_kernel: int = 3
    nms_threshold: float = 0.1
    nms_top_k: int | None = None
    min_axis_mm: float = 3.0
    min_volume_mm3: float = 14.0

    def __post_init__(self):
        if not (0.0 < self.prob_threshold < 1.0):
            raise ValueError(f"prob_threshold must lie in (0, 1), got {self.prob_threshold}")
        if self.acls_center_mode not in ("centroid", "max_prob"):
            raise ValueError(f"unknown acls_center_mode: {self.acls_center_mode}")
        if self.min_axis_mm < 0 or self.min_volume_mm3 < 0:
            raise ValueError("minimum instance sizes must be >= 0")


@dataclass(frozen=True)
class CenterList:
    """Ordered detected centers: (id, voxel coordinates, score) with ids 1..N."""

    entries: tuple[tuple[int, tuple[float, float, float], float], ...]

    def __post_init__(self):
        for i, (cid, _, _) in enumerate(self.entries, start=1):
            if cid != i:
                raise ValueError("center ids must be consecutive 1..N")

    @classmethod
    def from_peaks(cls, peaks: list[tuple[tuple[int, int, int], float]]) -> "CenterList":
        return cls(
            tuple(
                (i, (float(v[0]), float(v[1]), float(v[2])), float(score))
                for i, (v, score) in enumerate(peaks, start=1)
            )
        )

    def __len__(self) -> int:
        return len(self.entries)

    def coords(self) -> np.ndarray:
        """Center coordinates as an (N, 3) float array, row i for id i+1."""
        if not self.entries:
            return np.empty((0, 3), dtype=np.float64)
        return np.array([c for _, c, _ in self.entries], dtype=np.float64)


def filter_small_instances(
    m: LabelMap, min_axis_mm: float = 3.0, min_volume_mm3: float = 14.0
) -> LabelMap:
    """Drop instances below the clinical size floor.

    An instance is removed iff its bounding box is thinner than min_axis_mm
    along some axis or its volume is under min_volume_mm3. Survivors keep
    their relative order and are relabeled 1..K.
    """
    data = m.data
    out = np.zeros_like(data)
    spacing = m.spacing.as_array()
    vox_vol = m.spacing.voxel_volume_mm3
    next_id = 1
    for k in m.labels():
        coords = np.argwhere(data == k)
        extent = (coords.max(axis=0) - coords.min(axis=0) + 1) * spacing
        volume = coords.shape[0] * vox_vol
        if extent.min() < min_axis_mm or volume < min_volume_mm3:
            continue
        out[data == k] = next_id
        next_id += 1
    return LabelMap(out, m.spacing)


def cc_split(p: ProbMap, cfg: SplitConfig = SplitConfig()) -> LabelMap:
    """Threshold and label connected components, then size-filter."""
    s = binarize(p, cfg.prob_threshold)
    comps = connected_components(s, cfg.cc_connectivity)
    return filter_small_instances(comps.label_map, cfg.min_axis_mm, cfg.min_volume_mm3)


def acls_centers(p: ProbMap, cfg: SplitConfig = SplitConfig()) -> CenterList:
    """Detect lesion centers: Hessian peak candidates clustered by connectivity.

    Candidate voxels (local maxima of p with negative-definite Hessian inside
    the thresholded mask) are grouped with cfg.acls_center_connectivity; each
    cluster yields one center, either its centroid or its highest-probability
    voxel depending on cfg.acls_center_mode. Coordinates are in voxel units.
    """
    s = binarize(p, cfg.prob_threshold)
    cand = hessian_negative_candidates(p, s, smoothing_sigma=cfg.acls_smoothing_sigma)
    clusters = connected_components(cand, cfg.acls_center_connectivity)
    entries = []
    for cid in range(1, clusters.n_components + 1):
        coords = np.argwhere(clusters.label_map.data == cid)
        scores = p.data[coords[:, 0], coords[:, 1], coords[:, 2]]
        if cfg.acls_center_mode == "centroid":
            cx, cy, cz = coords.mean(axis=0)
        else:
            best = int(np.argmax(scores))
            cx, cy, cz = coords[best]
        entries.append((cid, (float(cx), float(cy), float(cz)), float(scores.max())))
    return CenterList(tuple(entries))


def acls_split(p: ProbMap, cfg: SplitConfig = SplitConfig()) -> LabelMap:
    """Split the thresholded mask by nearest detected probability-peak center.

    Every foreground voxel is assigned to the Euclidean-nearest center (in
    millimeters) among the centers whose candidate cluster touches the
    voxel's connected region; a region containing no candidate keeps a
    single fresh label. Assignment never crosses regions, so a region with
    exactly one center comes out identical to plain connected components.
    """
    s = binarize(p, cfg.prob_threshold)
    cand = hessian_negative_candidates(p, s, smoothing_sigma=cfg.acls_smoothing_sigma)
    clusters = connected_components(cand, cfg.acls_center_connectivity)
    regions = connected_components(s, cfg.cc_connectivity)

    spacing = p.spacing.as_array()
    cluster_centers = np.zeros((clusters.n_components, 3), dtype=np.float64)
    for cid in range(1, clusters.n_components + 1):
        coords = np.argwhere(clusters.label_map.data == cid)
        if cfg.acls_center_mode == "centroid":
            cluster_centers[cid - 1] = coords.mean(axis=0)
        else:
            scores = p.data[coords[:, 0], coords[:, 1], coords[:, 2]]
            cluster_centers[cid - 1] = coords[int(np.argmax(scores))]

    # clusters intersecting each region (a 26-connected cluster may touch
    # several 6-connected regions; it then serves each of them)
    region_clusters: dict[int, list[int]] = {r: [] for r in range(1, regions.n_components + 1)}
    overlap = (clusters.label_map.data > 0) & (regions.label_map.data > 0)
    if overlap.any():
        pair_codes = np.unique(
            regions.label_map.data[overlap].astype(np.int64) * (clusters.n_components + 1)
            + clusters.label_map.data[overlap].astype(np.int64)
        )
        for code in pair_codes:
            region_clusters[int(code // (clusters.n_components + 1))].append(
                int(code % (clusters.n_components + 1))
            )

    out = np.zeros(p.dims, dtype=np.int32)
    next_label = clusters.n_components + 1
    for rid in range(1, regions.n_components + 1):
        coords = np.argwhere(regions.label_map.data == rid)
        local = region_clusters[rid]
        if not local:
            out[coords[:, 0], coords[:, 1], coords[:, 2]] = next_label
            next_label += 1
            continue
        centers_mm = cluster_centers[np.array(local) - 1] * spacing
        d2 = ((coords[:, None, :] * spacing - centers_mm[None, :, :]) ** 2).sum(axis=2)
        chosen = np.array(local, dtype=np.int32)[np.argmin(d2, axis=1)]
        out[coords[:, 0], coords[:, 1], coords[:, 2]] = chosen

    relabeled = relabel_by_first_voxel(LabelMap(out, p.spacing))
    return filter_small_instances(relabeled, cfg.min_axis_mm, cfg.min_volume_mm3)


def cluster_with_offsets(s: BinaryMask, centers: CenterList, offsets: OffsetField) -> LabelMap:
    """Assign each foreground voxel to the center nearest its offset-shifted position.

    Distances are squared Euclidean in voxel coordinates; ties go to the
    lowest center id. Raises NoCentersError if s has foreground but no
    centers were supplied.
    """
    if s.dims != offsets.dims:
        raise ValueError(f"dimension mismatch: mask {s.dims} vs offsets {offsets.dims}")
    coords = np.argwhere(s.data > 0)
    out = np.zeros(s.dims, dtype=np.int32)
    if coords.shape[0] == 0:
        return LabelMap(out, s.spacing)
    if len(centers) == 0:
        raise NoCentersError("no centers detected")
    embedded = coords.astype(np.float64) + offsets.vectors_at(coords)
    cc = centers.coords()
    # chunk to bound the (n_voxels x n_centers) distance matrix
    chunk = max(1, int(4e6) // max(1, len(centers)))
    for start in range(0, coords.shape[0], chunk):
        part = embedded[start : start + chunk]
        d2 = ((part[:, None, :] - cc[None, :, :]) ** 2).sum(axis=2)
        ids = np.argmin(d2, axis=1).astype(np.int32) + 1
        sel = coords[start : start + chunk]
        out[sel[:, 0], sel[:, 1], sel[:, 2]] = ids
    return LabelMap(out, s.spacing)


def center_offset_split(
    p: ProbMap, h: ProbMap, o: OffsetField, cfg: SplitConfig = SplitConfig()
) -> LabelMap:
    """Full center+offset pipeline: threshold, NMS centers, offset clustering, size filter.

    Raises NoCentersError when the mask has foreground but NMS finds no
    centers; callers wanting a fallback catch it and use cc_split.
    """
    s = binarize(p, cfg.prob_threshold)
    peaks = maxpool_nms(h, cfg.nms_kernel, cfg.nms_threshold, cfg.nms_top_k)
    clustered = cluster_with_offsets(s, CenterList.from_peaks(peaks), o)
    relabeled = relabel_by_first_voxel(clustered)
    return filter_small_instances(relabeled, cfg.min_axis_mm, cfg.min_volume_mm3)


def _round_half_away(v: np.ndarray) -> np.ndarray:
    return np.sign(v) * np.floor(np.abs(v) + 0.5)


def reference_center_heatmap(refs: LabelMap, sigma: float = 2.0) -> ProbMap:
    """Gaussian center heatmap: impulses at rounded lesion centers of mass,
    blurred with an isotropic Gaussian of sigma voxels, rescaled to peak 1.

    Centers are rounded half-away-from-zero per axis before placement.
    """
    if sigma <= 0:
        raise ValueError(f"sigma must be > 0, got {sigma}")
    impulses = np.zeros(refs.dims, dtype=np.float64)
    data = refs.data
    for k in refs.labels():
        com = np.argwhere(data == k).mean(axis=0)
        x, y, z = _round_half_away(com).astype(int)
        impulses[x, y, z] = 1.0
    if not impulses.any():
        return ProbMap(impulses, refs.spacing)
    heat = ndimage.gaussian_filter(impulses, sigma=sigma, mode="constant", cval=0.0)
    return ProbMap(heat / heat.max(), refs.spacing)


def reference_offsets(refs: LabelMap) -> OffsetField:
    """Per-voxel displacement to the (real-valued) center of mass of the voxel's lesion.

    Background voxels carry (0, 0, 0).
    """
    dx = np.zeros(refs.dims, dtype=np.float64)
    dy = np.zeros(refs.dims, dtype=np.float64)
    dz = np.zeros(refs.dims, dtype=np.float64)
    data = refs.data
    for k in refs.labels():
        coords = np.argwhere(data == k)
        com = coords.mean(axis=0)
        dx[coords[:, 0], coords[:, 1], coords[:, 2]] = com[0] - coords[:, 0]
        dy[coords[:, 0], coords[:, 1], coords[:, 2]] = com[1] - coords[:, 1]
        dz[coords[:, 0], coords[:, 1], coords[:, 2]] = com[2] - coords[:, 2]
    return OffsetField.from_arrays(dx, dy, dz, refs.spacing)
