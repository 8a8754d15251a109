"""Instance segmentation evaluation: matching, metrics, and CLU-aware detection.

Predicted and reference instances are paired by mutual best IoU overlap:
each side's best match is computed independently and only bidirectional
agreements (at IoU >= the threshold) become true-positive pairs. From the
pair set we derive detection precision/recall/F1, panoptic quality, voxel
Dice and its lesion-load-normalized variant, the absolute count difference,
and the CLU-aware detection metrics with their boundary conventions.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields

import numpy as np

from .confluence import clu_plus_set, clu_set, default_semantic_of
from .volume import BinaryMask, LabelMap

__all__ = [
    "MatchConfig",
    "MatchResult",
    "CluDetectionSets",
    "MetricsReport",
    "MetricStats",
    "CohortSummary",
    "iou",
    "match_instances",
    "detection_metrics",
    "panoptic_quality",
    "dice",
    "ndsc",
    "clu_detection_sets",
    "clu_metrics",
    "evaluate_subject",
    "aggregate_cohort",
    "METRIC_FIELDS",
    "COUNT_FIELDS",
    "FLAG_FIELDS",
]


@dataclass(frozen=True)
class MatchConfig:
    """Matching threshold plus the empty-subject convention value.

    iou_threshold is the minimum IoU for a directional best match.
    empty_value is what precision (no predictions), recall (no references),
    and recognition quality (nothing on either side) evaluate to; the
    default 1.0 scores a lesion-free subject predicted lesion-free as
    perfect.
    """

    iou_threshold: float = 0.1
    empty_value: float = 1.0

    def __post_init__(self):
        if not (0.0 < self.iou_threshold <= 1.0):
            raise ValueError(f"iou_threshold must lie in (0, 1], got {self.iou_threshold}")


@dataclass(frozen=True, eq=False)
class MatchResult:
    """Mutual best-overlap pairing between predicted and reference instances."""

    pairs: tuple[tuple[int, int, float], ...]  # (pred id, ref id, IoU)
    fp_pred_ids: frozenset[int]
    fn_ref_ids: frozenset[int]
    pred_best: dict  # pred id -> ref id or None (directional best match)
    ref_best: dict  # ref id -> pred id or None
    pred_ids: tuple[int, ...]
    ref_ids: tuple[int, ...]
    config: MatchConfig

    @property
    def n_tp(self) -> int:
        return len(self.pairs)

    @property
    def n_fp(self) -> int:
        return len(self.fp_pred_ids)

    @property
    def n_fn(self) -> int:
        return len(self.fn_ref_ids)


def iou(a: set, b: set) -> float:
    """Intersection over union of two voxel-coordinate sets; 0 when both empty."""
    union = len(a | b)
    if union == 0:
        return 0.0
    return len(a & b) / union


def _overlap_iou_table(pred: LabelMap, refs: LabelMap) -> dict[tuple[int, int], float]:
    """IoU for every (pred id, ref id) pair with nonzero voxel overlap."""
    pd, rd = pred.data, refs.data
    both = (pd > 0) & (rd > 0)
    if not both.any():
        return {}
    p_sizes = dict(zip(*[arr.tolist() for arr in np.unique(pd[pd > 0], return_counts=True)]))
    r_sizes = dict(zip(*[arr.tolist() for arr in np.unique(rd[rd > 0], return_counts=True)]))
    base = int(rd.max()) + 1
    codes, inter = np.unique(
        pd[both].astype(np.int64) * base + rd[both].astype(np.int64), return_counts=True
    )
    table = {}
    for code, n in zip(codes.tolist(), inter.tolist()):
        i, j = code // base, code % base
        table[(i, j)] = n / (p_sizes[i] + r_sizes[j] - n)
    return table


def _best_match(candidates: list[tuple[int, float]], threshold: float) -> int | None:
    """Best partner by IoU, ties to the lowest id; None when below threshold."""
    best_id, best_iou = None, -1.0
    for other, val in sorted(candidates):
        if val > best_iou:
            best_id, best_iou = other, val
    if best_id is None or best_iou < threshold:
        return None
    return best_id


def match_instances(
    pred: LabelMap, refs: LabelMap, cfg: MatchConfig = MatchConfig()
) -> MatchResult:
    """Pair instances by mutually consistent best IoU.

    Both directional best-match tables are built over instances with
    nonzero overlap (zero-overlap pairs can never reach a positive
    threshold); only bidirectional agreements are retained as pairs.
    Unmatched predictions are false positives, unmatched references false
    negatives.
    """
    if pred.dims != refs.dims:
        raise ValueError(f"dimension mismatch: pred {pred.dims} vs refs {refs.dims}")
    table = _overlap_iou_table(pred, refs)
    pred_ids, ref_ids = pred.labels(), refs.labels()

    by_pred: dict[int, list] = {i: [] for i in pred_ids}
    by_ref: dict[int, list] = {j: [] for j in ref_ids}
    for (i, j), val in table.items():
        by_pred[i].append((j, val))
        by_ref[j].append((i, val))

    pred_best = {i: _best_match(by_pred[i], cfg.iou_threshold) for i in pred_ids}
    ref_best = {j: _best_match(by_ref[j], cfg.iou_threshold) for j in ref_ids}

    pairs = tuple(
        (i, pred_best[i], table[(i, pred_best[i])])
        for i in pred_ids
        if pred_best[i] is not None and ref_best[pred_best[i]] == i
    )
    matched_pred = {i for i, _, _ in pairs}
    matched_ref = {j for _, j, _ in pairs}
    return MatchResult(
        pairs=pairs,
        fp_pred_ids=frozenset(set(pred_ids) - matched_pred),
        fn_ref_ids=frozenset(set(ref_ids) - matched_ref),
        pred_best=pred_best,
        ref_best=ref_best,
        pred_ids=pred_ids,
        ref_ids=ref_ids,
        config=cfg,
    )


def detection_metrics(m: MatchResult) -> tuple[float, float, float]:
    """(precision, recall, f1) with the empty-subject conventions applied."""
    tp, fp, fn = m.n_tp, m.n_fp, m.n_fn
    empty = m.config.empty_value
    precision = empty if tp + fp == 0 else tp / (tp + fp)
    recall = empty if tp + fn == 0 else tp / (tp + fn)
    f1 = 0.0 if precision + recall == 0 else 2 * precision * recall / (precision + recall)
    return (precision, recall, f1)


def panoptic_quality(m: MatchResult) -> tuple[float, float, float]:
    """(pq, sq, rq): mean matched IoU times the detection F-measure form.

    sq is 0 when there are no true positives; an empty-vs-empty subject
    scores the configured empty value on both factors. pq is always the
    exact product sq * rq.
    """
    tp, fp, fn = m.n_tp, m.n_fp, m.n_fn
    if tp + fp + fn == 0:
        sq = rq = m.config.empty_value
    else:
        sq = sum(v for _, _, v in m.pairs) / tp if tp > 0 else 0.0
        rq = tp / (tp + 0.5 * fp + 0.5 * fn)
    return (sq * rq, sq, rq)


def dice(pred: BinaryMask, refs: BinaryMask) -> float:
    """Voxel Dice coefficient of two binary masks; 1 when both are empty."""
    if pred.dims != refs.dims:
        raise ValueError(f"dimension mismatch: pred {pred.dims} vs refs {refs.dims}")
    a, b = pred.data > 0, refs.data > 0
    total = int(a.sum()) + int(b.sum())
    if total == 0:
        return 1.0
    return 2.0 * int((a & b).sum()) / total


def ndsc(
    pred: BinaryMask,
    refs: BinaryMask,
    r: float = 0.001,
    domain: BinaryMask | None = None,
) -> float:
    """Dice normalized to a fixed reference lesion load r.

    False positives are reweighted by kappa = h * (1 - r) / r where h is the
    subject's actual lesion-to-background voxel ratio inside the domain, so
    subjects with very different lesion loads become comparable. With an
    empty reference the score is 1 if the prediction is empty, else 0.
    """
    if not (0.0 < r < 1.0):
        raise ValueError(f"r must lie in (0, 1), got {r}")
    if pred.dims != refs.dims:
        raise ValueError(f"dimension mismatch: pred {pred.dims} vs refs {refs.dims}")
    if domain is not None and domain.dims != refs.dims:
        raise ValueError(f"dimension mismatch: domain {domain.dims} vs refs {refs.dims}")
    dom = np.ones(refs.dims, dtype=bool) if domain is None else domain.data > 0
    n_dom = int(dom.sum())
    if n_dom == 0:
        raise ValueError("empty domain")
    a = (pred.data > 0) & dom
    g = (refs.data > 0) & dom
    n_lesion = int(g.sum())
    if n_lesion == 0:
        return 1.0 if not a.any() else 0.0
    if n_lesion == n_dom:
        raise ValueError("domain contains no non-lesion voxels")
    tp = int((a & g).sum())
    fp = int((a & ~g).sum())
    fn = int((~a & g).sum())
    h = n_lesion / (n_dom - n_lesion)
    kappa = h * (1.0 - r) / r
    return 2.0 * tp / (2.0 * tp + kappa * fp + fn)


@dataclass(frozen=True)
class CluDetectionSets:
    """TP pairs, missed CLU ids, and over-split prediction ids for CLU scoring."""

    tp_pairs: tuple[tuple[int, int], ...]
    fn_ref_ids: frozenset[int]
    fp_pred_ids: frozenset[int]

    @property
    def n_ref_clus(self) -> int:
        return len(self.tp_pairs) + len(self.fn_ref_ids)


def clu_detection_sets(m: MatchResult, clu_ids: frozenset[int]) -> CluDetectionSets:
    """Split the match result into CLU detection sets.

    True positives are matched pairs whose reference is a CLU; false
    negatives are CLUs no pair covers; false positives are predictions
    whose best reference did not choose them back (over-split detections,
    regardless of whether that reference is a CLU).
    """
    if not clu_ids <= set(m.ref_ids):
        raise ValueError("clu_ids must be a subset of the reference label set")
    tp_pairs = tuple((i, j) for i, j, _ in m.pairs if j in clu_ids)
    matched_ref = {j for _, j, _ in m.pairs}
    fn = frozenset(j for j in clu_ids if j not in matched_ref)
    fp = frozenset(
        i
        for i in m.pred_ids
        if m.pred_best[i] is not None and m.ref_best[m.pred_best[i]] != i
    )
    return CluDetectionSets(tp_pairs=tp_pairs, fn_ref_ids=fn, fp_pred_ids=fp)


def clu_metrics(sets: CluDetectionSets) -> tuple[float, float, float]:
    """(f1, recall, precision) over CLU detection sets.

    Boundary conventions: recall is 1 when the reference has no CLUs at
    all, and precision is 1 when true and false positive CLU detections
    are both absent.
    """
    tp = len(sets.tp_pairs)
    fn = len(sets.fn_ref_ids)
    fp = len(sets.fp_pred_ids)
    recall = 1.0 if sets.n_ref_clus == 0 else tp / (tp + fn)
    precision = 1.0 if tp + fp == 0 else tp / (tp + fp)
    f1 = 0.0 if precision + recall == 0 else 2 * precision * recall / (precision + recall)
    return (f1, recall, precision)


METRIC_FIELDS = (
    "dsc",
    "ndsc",
    "pq",
    "sq",
    "rq",
    "f1",
    "recall",
    "precision",
    "dic",
    "f1_clu",
    "recall_clu",
    "precision_clu",
    "f1_clu_plus",
    "recall_clu_plus",
    "precision_clu_plus",
)

COUNT_FIELDS = (
    "n_pred",
    "n_ref",
    "n_ref_clu",
    "n_ref_clu_plus",
    "n_pred_clu",
    "n_pred_clu_plus",
    "tp",
    "fp",
    "fn",
    "tp_clu",
    "fp_clu",
    "fn_clu",
    "tp_clu_plus",
    "fp_clu_plus",
    "fn_clu_plus",
)

FLAG_FIELDS = (
    "no_predicted_instances",
    "no_reference_instances",
    "no_reference_clus",
    "no_reference_clu_plus",
)


@dataclass(frozen=True)
class MetricsReport:
    """Per-subject record of semantic, detection, instance, and CLU(+) metrics."""

    dsc: float
    ndsc: float
    pq: float
    sq: float
    rq: float
    f1: float
    recall: float
    precision: float
    dic: int
    f1_clu: float
    recall_clu: float
    precision_clu: float
    f1_clu_plus: float
    recall_clu_plus: float
    precision_clu_plus: float
    n_pred: int
    n_ref: int
    n_ref_clu: int
    n_ref_clu_plus: int
    n_pred_clu: int
    n_pred_clu_plus: int
    tp: int
    fp: int
    fn: int
    tp_clu: int
    fp_clu: int
    fn_clu: int
    tp_clu_plus: int
    fp_clu_plus: int
    fn_clu_plus: int
    no_predicted_instances: bool
    no_reference_instances: bool
    no_reference_clus: bool
    no_reference_clu_plus: bool

    def __post_init__(self):
        for name in METRIC_FIELDS:
            if name == "dic":
                continue
            v = getattr(self, name)
            if not (-1e-9 <= v <= 1.0 + 1e-9):
                raise ValueError(f"metric {name} out of [0, 1]: {v}")
        if self.dic < 0:
            raise ValueError("dic must be >= 0")

    def as_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}


def evaluate_subject(
    pred: LabelMap,
    refs: LabelMap,
    domain: BinaryMask | None = None,
    cfg: MatchConfig = MatchConfig(),
    ndsc_r: float = 0.001,
    semantic: BinaryMask | None = None,
) -> MetricsReport:
    """Evaluate one subject's predicted instances against the reference.

    The CLU and CLU+ id sets are derived from the reference-derived
    semantic mask unless an explicit semantic mask is supplied. Predicted
    CLU counts (for count-agreement analyses) always use the prediction's
    own foreground.
    """
    m = match_instances(pred, refs, cfg)
    precision, recall, f1 = detection_metrics(m)
    pq, sq, rq = panoptic_quality(m)
    pred_fg, ref_fg = pred.foreground(), refs.foreground()
    dsc = dice(pred_fg, ref_fg)
    nd = ndsc(pred_fg, ref_fg, ndsc_r, domain)

    sem = default_semantic_of(refs) if semantic is None else semantic
    ref_clu = clu_set(refs, sem)
    ref_clu_plus = clu_plus_set(refs, sem)
    sets_clu = clu_detection_sets(m, ref_clu)
    sets_plus = clu_detection_sets(m, ref_clu_plus)
    f1_clu, recall_clu, precision_clu = clu_metrics(sets_clu)
    f1_plus, recall_plus, precision_plus = clu_metrics(sets_plus)

    pred_sem = default_semantic_of(pred)
    n_pred_clu = len(clu_set(pred, pred_sem))
    n_pred_clu_plus = len(clu_plus_set(pred, pred_sem))

    n_pred, n_ref = len(m.pred_ids), len(m.ref_ids)
    return MetricsReport(
        dsc=dsc,
        ndsc=nd,
        pq=pq,
        sq=sq,
        rq=rq,
        f1=f1,
        recall=recall,
        precision=precision,
        dic=abs(n_pred - n_ref),
        f1_clu=f1_clu,
        recall_clu=recall_clu,
        precision_clu=precision_clu,
        f1_clu_plus=f1_plus,
        recall_clu_plus=recall_plus,
        precision_clu_plus=precision_plus,
        n_pred=n_pred,
        n_ref=n_ref,
        n_ref_clu=len(ref_clu),
        n_ref_clu_plus=len(ref_clu_plus),
        n_pred_clu=n_pred_clu,
        n_pred_clu_plus=n_pred_clu_plus,
        tp=m.n_tp,
        fp=m.n_fp,
        fn=m.n_fn,
        tp_clu=len(sets_clu.tp_pairs),
        fp_clu=len(sets_clu.fp_pred_ids),
        fn_clu=len(sets_clu.fn_ref_ids),
        tp_clu_plus=len(sets_plus.tp_pairs),
        fp_clu_plus=len(sets_plus.fp_pred_ids),
        fn_clu_plus=len(sets_plus.fn_ref_ids),
        no_predicted_instances=n_pred == 0,
        no_reference_instances=n_ref == 0,
        no_reference_clus=len(ref_clu) == 0,
        no_reference_clu_plus=len(ref_clu_plus) == 0,
    )


@dataclass(frozen=True)
class MetricStats:
    mean: float
    sd: float
    median: float


@dataclass(frozen=True, eq=False)
class CohortSummary:
    """Patient-wise metric statistics plus lesion-wise pooled detection rates."""

    n_subjects: int
    per_metric: dict  # metric name -> MetricStats
    pooled: dict  # "detection" | "clu" | "clu_plus" -> (precision, recall, f1)


def _pooled_rates(tp: int, fp: int, fn: int) -> tuple[float, float, float]:
    precision = 1.0 if tp + fp == 0 else tp / (tp + fp)
    recall = 1.0 if tp + fn == 0 else tp / (tp + fn)
    f1 = 0.0 if precision + recall == 0 else 2 * precision * recall / (precision + recall)
    return (precision, recall, f1)


def aggregate_cohort(reports: list[MetricsReport]) -> CohortSummary:
    """Patient-wise mean/sd/median per metric plus pooled CLU rates.

    Pooled rates sum true/false positives and negatives across all subjects
    before computing precision, recall, and F1, so subjects with many
    lesions weigh more than lesion-poor ones.
    """
    if not reports:
        raise ValueError("empty cohort")
    per_metric = {}
    for name in METRIC_FIELDS:
        values = np.array([float(getattr(rep, name)) for rep in reports], dtype=np.float64)
        sd = float(values.std(ddof=1)) if len(values) > 1 else 0.0
        per_metric[name] = MetricStats(
            mean=float(values.mean()), sd=sd, median=float(np.median(values))
        )
    pooled = {}
    for key, names in (
        ("detection", ("tp", "fp", "fn")),
        ("clu", ("tp_clu", "fp_clu", "fn_clu")),
        ("clu_plus", ("tp_clu_plus", "fp_clu_plus", "fn_clu_plus")),
    ):
        sums = [sum(getattr(rep, n) for rep in reports) for n in names]
        pooled[key] = _pooled_rates(*sums)
    return CohortSummary(n_subjects=len(reports), per_metric=per_metric, pooled=pooled)
