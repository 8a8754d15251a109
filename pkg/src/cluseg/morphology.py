"""Connected components, binary dilation, max-pool NMS, and Hessian peak candidates."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .volume import BinaryMask, Connectivity, LabelMap, ProbMap, relabel_by_first_voxel

__all__ = [
    "ComponentSet",
    "connected_components",
    "binary_dilate",
    "maxpool_nms",
    "hessian_negative_candidates",
]


@dataclass(frozen=True, eq=False)
class ComponentSet:
    """Connected components of a binary mask: a label map plus component count.

    Labels run 1..n_components in raster order (x fastest) of each
    component's first voxel. Components partition the source foreground.
    """

    label_map: LabelMap
    n_components: int

    def voxel_sets(self) -> list[frozenset[tuple[int, int, int]]]:
        """Components as voxel-coordinate sets, index j-1 for component j."""
        sets: list[set] = [set() for _ in range(self.n_components)]
        for x, y, z in np.argwhere(self.label_map.data > 0):
            sets[self.label_map.data[x, y, z] - 1].add((int(x), int(y), int(z)))
        return [frozenset(s) for s in sets]


def connected_components(s: BinaryMask, c: Connectivity = Connectivity.FACE6) -> ComponentSet:
    """Label the connected components of a binary mask.

    Labels are assigned 1..J in deterministic raster order of each
    component's first voxel, so the result is invariant to how the
    underlying labeling pass scans the volume.
    """
    raw, _ = ndimage.label(s.data, structure=c.structure())
    relabeled = relabel_by_first_voxel(LabelMap(raw, s.spacing))
    return ComponentSet(relabeled, relabeled.n_instances())


def binary_dilate(s: BinaryMask, c: Connectivity = Connectivity.FACE6, iterations: int = 1) -> BinaryMask:
    """Grow the foreground by the given structuring element, applied iteratively."""
    if iterations < 1:
        raise ValueError(f"iterations must be >= 1, got {iterations}")
    out = ndimage.binary_dilation(s.data.astype(bool), structure=c.structure(), iterations=iterations)
    return BinaryMask(out.astype(np.uint8), s.spacing)


def maxpool_nms(
    h: ProbMap,
    kernel: int = 3,
    threshold: float = 0.1,
    top_k: int | None = None,
) -> list[tuple[tuple[int, int, int], float]]:
    """Detect peaks of a heatmap as voxels equal to their kernel-window maximum.

    A voxel survives if its value equals the maximum over the kernel window
    (clipped at the volume boundary) and is >= threshold. Results are sorted
    by descending score, ties broken by raster order; if top_k is given only
    the top_k best survive.
    """
    if kernel < 3 or kernel % 2 == 0:
        raise ValueError(f"kernel must be an odd integer >= 3, got {kernel}")
    if not (0.0 <= threshold <= 1.0):
        raise ValueError(f"threshold must lie in [0, 1], got {threshold}")
    window_max = ndimage.maximum_filter(h.data, size=kernel, mode="nearest")
    keep = (h.data >= window_max) & (h.data >= threshold)
    coords = np.argwhere(keep)
    if coords.shape[0] == 0:
        return []
    scores = h.data[coords[:, 0], coords[:, 1], coords[:, 2]]
    w, hh, _ = h.dims
    raster = coords[:, 0] + w * (coords[:, 1] + hh * coords[:, 2])
    order = np.lexsort((raster, -scores))
    if top_k is not None:
        order = order[:top_k]
    return [
        ((int(coords[i, 0]), int(coords[i, 1]), int(coords[i, 2])), float(scores[i]))
        for i in order
    ]


def _hessian_at(padded: np.ndarray, coords: np.ndarray) -> np.ndarray:
    """Central-difference Hessians (voxel units) at given coords of an edge-padded array.

    Second derivatives use the 3-point stencil, mixed terms the 4-point
    cross stencil; edge padding replicates border values.
    """
    x, y, z = coords[:, 0] + 1, coords[:, 1] + 1, coords[:, 2] + 1
    c = padded[x, y, z]
    dxx = padded[x + 1, y, z] - 2 * c + padded[x - 1, y, z]
    dyy = padded[x, y + 1, z] - 2 * c + padded[x, y - 1, z]
    dzz = padded[x, y, z + 1] - 2 * c + padded[x, y, z - 1]
    dxy = (
        padded[x + 1, y + 1, z] - padded[x + 1, y - 1, z]
        - padded[x - 1, y + 1, z] + padded[x - 1, y - 1, z]
    ) / 4.0
    dxz = (
        padded[x + 1, y, z + 1] - padded[x + 1, y, z - 1]
        - padded[x - 1, y, z + 1] + padded[x - 1, y, z - 1]
    ) / 4.0
    dyz = (
        padded[x, y + 1, z + 1] - padded[x, y + 1, z - 1]
        - padded[x, y - 1, z + 1] + padded[x, y - 1, z - 1]
    ) / 4.0
    hess = np.empty((coords.shape[0], 3, 3), dtype=np.float64)
    hess[:, 0, 0] = dxx
    hess[:, 1, 1] = dyy
    hess[:, 2, 2] = dzz
    hess[:, 0, 1] = hess[:, 1, 0] = dxy
    hess[:, 0, 2] = hess[:, 2, 0] = dxz
    hess[:, 1, 2] = hess[:, 2, 1] = dyz
    return hess


def hessian_negative_candidates(
    p: ProbMap,
    within: BinaryMask,
    eig_threshold: float = 0.0,
    smoothing_sigma: float | None = None,
) -> BinaryMask:
    """Peak-candidate voxels: local maxima of p with a negative-definite Hessian.

    A voxel qualifies iff it is foreground in `within`, its value is >= every
    26-neighbor (plateaus allowed), and all three eigenvalues of the
    central-difference Hessian are < -eig_threshold. No smoothing is applied
    unless smoothing_sigma is set.
    """
    if not p.same_geometry(within):
        raise ValueError("probability map and mask must share dims and spacing")
    data = p.data
    if smoothing_sigma is not None:
        if smoothing_sigma <= 0:
            raise ValueError(f"smoothing sigma must be > 0, got {smoothing_sigma}")
        data = ndimage.gaussian_filter(p.data, sigma=smoothing_sigma, mode="nearest")
    window_max = ndimage.maximum_filter(data, size=3, mode="nearest")
    local_max = (data >= window_max) & (within.data > 0)
    coords = np.argwhere(local_max)
    out = np.zeros(p.dims, dtype=np.uint8)
    if coords.shape[0] == 0:
        return BinaryMask(out, p.spacing)
    padded = np.pad(data, 1, mode="edge")
    eigs = np.linalg.eigvalsh(_hessian_at(padded, coords))
    neg_definite = (eigs < -eig_threshold).all(axis=1)
    sel = coords[neg_definite]
    out[sel[:, 0], sel[:, 1], sel[:, 2]] = 1
    return BinaryMask(out, p.spacing)
