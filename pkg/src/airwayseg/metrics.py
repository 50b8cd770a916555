"""Internal-evaluation metric suite: Dice, NSD, sensitivity, specificity, AUC.

Surface handling follows the surface-element formulation: the boundary
of a binary mask is the set of voxel faces separating foreground from
background under 6-connectivity, with the volume border counting as
background. Each face is represented by its center point in physical
millimeters, which keeps a millimeter tolerance meaningful on
anisotropic grids. The normalized surface distance at tolerance ``tau``
is the fraction of boundary elements of either mask lying within
``tau`` (inclusive) of the other mask's boundary.

Nearest-surface distances are exact Euclidean distances obtained from a
k-d tree over the face centers; no distance-transform approximation is
involved, so results match an all-pairs computation bitwise.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .volgrid import (
    BinaryMask,
    ConfusionCounts,
    LabelVolume,
    ProbVolume,
    apply_region_mask,
    class_mask,
    confusion_counts,
    _require_same_grid,
)

__all__ = [
    "SurfacePointSet",
    "MetricRow",
    "CaseReport",
    "AggregateReport",
    "METRIC_KEYS",
    "REASON_BOTH_EMPTY",
    "REASON_NO_GT",
    "REASON_ALL_GT",
    "REASON_NO_PROB",
    "dice_score",
    "extract_boundary",
    "nsd",
    "sensitivity",
    "specificity",
    "auc",
    "evaluate_case",
    "aggregate",
]

METRIC_KEYS = ("dice", "nsd", "sensitivity", "specificity", "auc")

REASON_BOTH_EMPTY = "class absent in both volumes"
REASON_NO_GT = "class absent in ground truth"
REASON_ALL_GT = "class covers every evaluated voxel"
REASON_NO_PROB = "no probabilities supplied"


@dataclass(frozen=True)
class SurfacePointSet:
    """Face-center points (mm) of a mask boundary, in a fixed order."""

    points: np.ndarray  # (n, 3) float64

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        pts.flags.writeable = False
        object.__setattr__(self, "points", pts)

    @property
    def element_count(self) -> int:
        return self.points.shape[0]


@dataclass(frozen=True)
class MetricRow:
    """Per-class metric values for one case; None marks an undefined metric."""

    class_id: int
    class_name: str
    dice: float | None
    nsd: float | None
    sensitivity: float | None
    specificity: float | None
    auc: float | None
    gt_voxels: int
    pred_voxels: int
    reasons: dict = field(default_factory=dict)

    def value(self, metric: str) -> float | None:
        return getattr(self, metric)


@dataclass(frozen=True)
class CaseReport:
    case_id: str
    rows: tuple
    region_used: bool
    tolerance_mm: float
    voxel_volume_mm3: float


@dataclass(frozen=True)
class AggregateReport:
    """Per-class means across cases plus the mean-of-means Avg column."""

    class_ids: tuple
    class_names: tuple
    means: dict       # metric -> tuple of per-class means (None when never defined)
    avg: dict         # metric -> mean over the defined per-class means, or None
    excluded: dict    # metric -> tuple of per-class undefined-case counts
    case_count: int
    tolerance_mm: float | None


def dice_score(gt: BinaryMask, pred: BinaryMask) -> float | None:
    """Overlap coefficient 2|A∩B| / (|A|+|B|); None when both masks are empty."""
    _require_same_grid(gt, pred, "ground truth and prediction")
    cg = gt.count()
    cp = pred.count()
    if cg + cp == 0:
        return None
    inter = int(np.count_nonzero(gt.data & pred.data))
    return 2.0 * inter / (cg + cp)


# Face scan order per boundary voxel: -x, +x, -y, +y, -z, +z.
_FACE_SPECS = (
    (0, -1), (0, +1),
    (1, -1), (1, +1),
    (2, -1), (2, +1),
)


def extract_boundary(mask: BinaryMask) -> SurfacePointSet:
    """Boundary face centers of a mask, ordered by voxel index then face.

    A face is emitted wherever a foreground voxel meets background or the
    volume border along one of the six axis directions. Voxel centers sit
    at ``(i + 0.5) * spacing``; a face center is offset half a spacing
    along the face axis, so all points stay inside the physical bounding
    box ``[0, dims * spacing]``.
    """
    m = mask.data
    nx, ny, nz = m.shape
    sp = mask.spacing.as_array()
    all_pts = []
    all_lin = []
    all_codes = []
    for code, (axis, sign) in enumerate(_FACE_SPECS):
        nb = np.zeros_like(m)
        src = [slice(None)] * 3
        dst = [slice(None)] * 3
        if sign < 0:
            dst[axis] = slice(1, None)
            src[axis] = slice(None, -1)
        else:
            dst[axis] = slice(None, -1)
            src[axis] = slice(1, None)
        nb[tuple(dst)] = m[tuple(src)]
        faces = m & ~nb
        idx = np.nonzero(faces)
        if idx[0].size == 0:
            continue
        coords = np.stack(idx, axis=1).astype(np.float64)
        pts = (coords + 0.5) * sp
        pts[:, axis] += 0.5 * sign * sp[axis]
        lin = idx[0] + nx * (idx[1] + ny * idx[2])
        all_pts.append(pts)
        all_lin.append(lin)
        all_codes.append(np.full(lin.shape, code, dtype=np.int64))
    if not all_pts:
        return SurfacePointSet(np.empty((0, 3), dtype=np.float64))
    pts = np.concatenate(all_pts)
    lin = np.concatenate(all_lin)
    codes = np.concatenate(all_codes)
    order = np.lexsort((codes, lin))
    return SurfacePointSet(pts[order])


def nsd(gt: BinaryMask, pred: BinaryMask, tolerance_mm: float, workers: int = 1) -> float | None:
    """Normalized surface distance at a physical tolerance.

    Returns the fraction of boundary face centers (of both masks pooled)
    that lie within ``tolerance_mm`` of the other mask's boundary,
    inclusive. None when both masks are empty, 0 when exactly one is.
    """
    if tolerance_mm < 0:
        raise ValueError(f"tolerance must be non-negative, got {tolerance_mm}")
    _require_same_grid(gt, pred, "ground truth and prediction")
    sg = extract_boundary(gt)
    sp = extract_boundary(pred)
    if sg.element_count == 0 and sp.element_count == 0:
        return None
    if sg.element_count == 0 or sp.element_count == 0:
        return 0.0
    d_gt = cKDTree(sp.points).query(sg.points, k=1, workers=workers)[0]
    d_pred = cKDTree(sg.points).query(sp.points, k=1, workers=workers)[0]
    near = int(np.count_nonzero(d_gt <= tolerance_mm)) + int(np.count_nonzero(d_pred <= tolerance_mm))
    return near / (sg.element_count + sp.element_count)


def sensitivity(c: ConfusionCounts) -> float | None:
    """tp / (tp + fn); None when the class is absent from the ground truth."""
    denom = c.tp + c.fn
    if denom == 0:
        return None
    return c.tp / denom


def specificity(c: ConfusionCounts) -> float | None:
    """tn / (tn + fp); None when there are no true-background voxels."""
    denom = c.tn + c.fp
    if denom == 0:
        return None
    return c.tn / denom


def _doubled_average_ranks(values: np.ndarray) -> np.ndarray:
    """Fractional ranks times two, as exact integers (ties share the mean rank)."""
    order = np.argsort(values, kind="stable")
    svals = values[order]
    n = values.size
    boundaries = np.flatnonzero(svals[1:] != svals[:-1]) + 1
    starts = np.concatenate(([0], boundaries))
    ends = np.concatenate((boundaries, [n]))
    doubled = np.empty(n, dtype=np.int64)
    group_doubled = starts + ends + 1  # 2 * mean(start+1 .. end) for the tie span
    doubled[order] = np.repeat(group_doubled, ends - starts)
    return doubled


def _stratified_indices(count: int, cap: int) -> np.ndarray:
    if count <= cap:
        return np.arange(count)
    return np.unique(np.round(np.linspace(0, count - 1, cap)).astype(np.int64))


def auc(gt: BinaryMask, prob: np.ndarray, region: BinaryMask | None = None,
        subsample: int | None = None) -> float | None:
    """Voxel-level one-vs-rest AUC via the rank-sum statistic with ties.

    Equivalent to the fraction of (positive, negative) voxel pairs where
    the positive scores strictly higher, counting ties as half. Integer
    rank arithmetic keeps the result exactly equal to direct pair
    enumeration. ``subsample`` caps each group at a deterministic,
    evenly spaced (by linear voxel index) subset. None when either group
    is empty.
    """
    prob = np.asarray(prob, dtype=np.float64)
    if prob.shape != gt.dims:
        raise ValueError(f"probability channel shape {prob.shape} does not match mask {gt.dims}")
    labels = gt.data.ravel(order="F")
    scores = prob.ravel(order="F")
    if region is not None:
        _require_same_grid(gt, region, "mask and region")
        keep = region.data.ravel(order="F")
        labels = labels[keep]
        scores = scores[keep]
    pos = scores[labels]
    neg = scores[~labels]
    if subsample is not None:
        pos = pos[_stratified_indices(pos.size, subsample)]
        neg = neg[_stratified_indices(neg.size, subsample)]
    p_count = pos.size
    q_count = neg.size
    if p_count == 0 or q_count == 0:
        return None
    doubled = _doubled_average_ranks(np.concatenate((pos, neg)))
    pos_rank_sum = int(doubled[:p_count].sum())
    numer = pos_rank_sum - p_count * (p_count + 1)  # = 2 * (#greater + 0.5 * #ties)
    return numer / (2 * p_count * q_count)


def _metric_or_reason(reasons: dict, metric: str, value: float | None, reason: str):
    if value is None:
        reasons[metric] = reason
    return value


def evaluate_case(gt: LabelVolume, pred: LabelVolume, prob: ProbVolume | None = None,
                  region: BinaryMask | None = None, tolerance_mm: float = 1.8,
                  case_id: str = "", workers: int = 1,
                  auc_subsample: int | None = None) -> CaseReport:
    """All per-class metrics for one case, one row per foreground class."""
    _require_same_grid(gt, pred, "ground truth and prediction")
    if gt.class_table != pred.class_table:
        raise ValueError("ground truth and prediction use different class tables")
    if prob is not None:
        if prob.dims != gt.dims:
            raise ValueError(f"probability volume shape {prob.dims} does not match labels {gt.dims}")
        if prob.num_classes != gt.class_table.num_classes:
            raise ValueError(
                f"probability volume has {prob.num_classes} channels, class table needs "
                f"{gt.class_table.num_classes}"
            )
    if region is not None:
        _require_same_grid(gt, region, "labels and region")

    rows = []
    for k in gt.class_table.foreground_ids:
        g = class_mask(gt, k)
        p = class_mask(pred, k)
        if region is not None:
            g = apply_region_mask(g, region)
            p = apply_region_mask(p, region)
        reasons: dict = {}
        dice_v = _metric_or_reason(reasons, "dice", dice_score(g, p), REASON_BOTH_EMPTY)
        nsd_v = _metric_or_reason(reasons, "nsd", nsd(g, p, tolerance_mm, workers=workers),
                                  REASON_BOTH_EMPTY)
        cc = confusion_counts(g, p, region)
        sens_v = _metric_or_reason(reasons, "sensitivity", sensitivity(cc), REASON_NO_GT)
        spec_v = _metric_or_reason(reasons, "specificity", specificity(cc), REASON_ALL_GT)
        if prob is None:
            auc_v = None
            reasons["auc"] = REASON_NO_PROB
        else:
            auc_v = auc(g, prob.channel(k), region, subsample=auc_subsample)
            if auc_v is None:
                reasons["auc"] = REASON_NO_GT if cc.tp + cc.fn == 0 else REASON_ALL_GT
        rows.append(MetricRow(
            class_id=k,
            class_name=gt.class_table.name_of(k),
            dice=dice_v,
            nsd=nsd_v,
            sensitivity=sens_v,
            specificity=spec_v,
            auc=auc_v,
            gt_voxels=g.count(),
            pred_voxels=p.count(),
            reasons=reasons,
        ))
    return CaseReport(
        case_id=case_id,
        rows=tuple(rows),
        region_used=region is not None,
        tolerance_mm=float(tolerance_mm),
        voxel_volume_mm3=gt.voxel_volume_mm3,
    )


def aggregate(reports: list) -> AggregateReport:
    """Mean of each metric per class over the cases where it is defined.

    The Avg column is the arithmetic mean of the per-class means that are
    actually defined; undefined case-class pairs are counted, not imputed.
    """
    if not reports:
        raise ValueError("cannot aggregate an empty report list")
    first = reports[0]
    ids = tuple(r.class_id for r in first.rows)
    names = tuple(r.class_name for r in first.rows)
    for rep in reports:
        if tuple(r.class_id for r in rep.rows) != ids or tuple(r.class_name for r in rep.rows) != names:
            raise ValueError(f"case {rep.case_id!r} uses a different class table")
    means = {}
    excluded = {}
    avg = {}
    for metric in METRIC_KEYS:
        per_class = []
        per_class_excluded = []
        for i in range(len(ids)):
            vals = [rep.rows[i].value(metric) for rep in reports]
            defined = [v for v in vals if v is not None]
            per_class_excluded.append(len(vals) - len(defined))
            per_class.append(sum(defined) / len(defined) if defined else None)
        means[metric] = tuple(per_class)
        excluded[metric] = tuple(per_class_excluded)
        shown = [v for v in per_class if v is not None]
        avg[metric] = sum(shown) / len(shown) if shown else None
    tolerances = {rep.tolerance_mm for rep in reports}
    return AggregateReport(
        class_ids=ids,
        class_names=names,
        means=means,
        avg=avg,
        excluded=excluded,
        case_count=len(reports),
        tolerance_mm=tolerances.pop() if len(tolerances) == 1 else None,
    )
