"""Confluent-lesion machinery: confluent components, CLU and CLU+ sets.

A connected component of the semantic mask is *confluent* when it overlaps
at least two distinct reference lesion instances. Reference lesions inside
confluent components are *confluent lesion units* (CLUs). The extended set
(CLU+) repeats the analysis after a single binary dilation of the semantic
mask, so lesions separated by a one-voxel gap also count.

Components always use 6-connectivity here. When only an instance mask is
available, the semantic mask defaults to its foreground
(:func:`default_semantic_of`); that reference-derived convention is also
what the CLI uses when annotating reference CLUs.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .morphology import binary_dilate, connected_components
from .volume import BinaryMask, Connectivity, LabelMap

__all__ = [
    "ConfluenceReport",
    "confluent_components",
    "clu_set",
    "clu_plus_set",
    "default_semantic_of",
    "confluence_report",
]


@dataclass(frozen=True)
class ConfluenceReport:
    """Confluent component ids plus CLU and CLU+ lesion id sets."""

    confluent_components: frozenset[int]
    clu_ids: frozenset[int]
    clu_plus_ids: frozenset[int]

    def __post_init__(self):
        if not self.clu_ids <= self.clu_plus_ids:
            raise ValueError("clu_ids must be a subset of clu_plus_ids")

    @property
    def n_confluent_components(self) -> int:
        return len(self.confluent_components)

    @property
    def n_clu(self) -> int:
        return len(self.clu_ids)

    @property
    def n_clu_plus(self) -> int:
        return len(self.clu_plus_ids)


def _check_geometry(refs: LabelMap, s: BinaryMask) -> None:
    if refs.dims != s.dims:
        raise ValueError(f"dimension mismatch: refs {refs.dims} vs mask {s.dims}")


def _overlap_pairs(refs: LabelMap, comp_labels: np.ndarray) -> np.ndarray:
    """Unique (component id, lesion id) pairs with nonzero voxel overlap."""
    both = (refs.data > 0) & (comp_labels > 0)
    if not both.any():
        return np.empty((0, 2), dtype=np.int64)
    comp = comp_labels[both].astype(np.int64)
    les = refs.data[both].astype(np.int64)
    codes = np.unique(comp * (les.max() + 1) + les)
    return np.stack([codes // (les.max() + 1), codes % (les.max() + 1)], axis=1)


def _confluent_from_pairs(pairs: np.ndarray) -> frozenset[int]:
    if pairs.shape[0] == 0:
        return frozenset()
    comp_ids, counts = np.unique(pairs[:, 0], return_counts=True)
    return frozenset(int(c) for c in comp_ids[counts >= 2])


def confluent_components(
    refs: LabelMap, s: BinaryMask, c: Connectivity = Connectivity.FACE6
) -> frozenset[int]:
    """Component ids of s overlapped by at least two distinct reference lesions."""
    _check_geometry(refs, s)
    comps = connected_components(s, c)
    return _confluent_from_pairs(_overlap_pairs(refs, comps.label_map.data))


def clu_set(refs: LabelMap, s: BinaryMask) -> frozenset[int]:
    """Reference lesion ids that overlap a confluent component of s (6-connectivity)."""
    _check_geometry(refs, s)
    comps = connected_components(s, Connectivity.FACE6)
    pairs = _overlap_pairs(refs, comps.label_map.data)
    confluent = _confluent_from_pairs(pairs)
    if not confluent:
        return frozenset()
    conf_arr = np.array(sorted(confluent), dtype=np.int64)
    hit = np.isin(pairs[:, 0], conf_arr)
    return frozenset(int(k) for k in np.unique(pairs[hit, 1]))


def clu_plus_set(
    refs: LabelMap,
    s: BinaryMask,
    dilation_connectivity: Connectivity = Connectivity.FACE6,
) -> frozenset[int]:
    """CLU analysis after one binary dilation of s: lesions whose shared
    connectivity only appears once the mask is grown by one voxel."""
    _check_geometry(refs, s)
    return clu_set(refs, binary_dilate(s, dilation_connectivity, iterations=1))


def default_semantic_of(refs: LabelMap) -> BinaryMask:
    """Semantic mask derived from an instance mask: foreground where any id > 0."""
    return refs.foreground()


def confluence_report(
    refs: LabelMap,
    s: BinaryMask | None = None,
    dilation_connectivity: Connectivity = Connectivity.FACE6,
) -> ConfluenceReport:
    """Full confluence annotation of a reference instance mask.

    When s is omitted the reference-derived semantic mask is used.
    """
    semantic = default_semantic_of(refs) if s is None else s
    return ConfluenceReport(
        confluent_components=confluent_components(refs, semantic),
        clu_ids=clu_set(refs, semantic),
        clu_plus_ids=clu_plus_set(refs, semantic, dilation_connectivity),
    )
