"""Volumetric and lesion-wise segmentation metrics.

DSC and HD95 follow the usual challenge conventions: empty-vs-empty
scores perfectly, empty-vs-nonempty takes the penalty (374 mm by
default, roughly the diagonal of a 240x240x155 grid at 1 mm). HD95 pools
both directed surface-distance sets and takes the nearest-rank 95th
percentile; surfaces are mask voxels with at least one six-neighbour
outside the mask, with the volume border counting as outside.

Lesion-wise scoring matches connected components by overlap (ground-truth
components may be dilated for the overlap test only). Each matched
ground-truth lesion is scored against the union of its matched predicted
components; misses score 0 / penalty. In ``lesion-wise`` mode every
false-positive component also contributes a 0 / penalty term; in
``semi-lesion-wise`` mode false positives are not penalised.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass

import numpy as np

from .errors import ContractError
from .schemes import LabelScheme, region_mask, validate_labels
from .volume import (
    BinaryMask,
    ComponentSet,
    LabelVolume,
    VolumeGeometry,
    connected_components,
    dilate,
    edt_grid,
)

MODES = ("volumetric", "lesion-wise", "semi-lesion-wise")
DEFAULT_PENALTY_MM = 374.0


def _check_same_geometry(pred: BinaryMask, gt: BinaryMask) -> None:
    if not pred.geometry.matches(gt.geometry):
        raise ContractError("prediction and ground-truth geometries differ")


def dice(pred: BinaryMask, gt: BinaryMask) -> float:
    """2|A.B| / (|A|+|B|); both empty -> 1.0, exactly one empty -> 0.0."""
    _check_same_geometry(pred, gt)
    a = int(np.count_nonzero(pred.data))
    b = int(np.count_nonzero(gt.data))
    if a == 0 and b == 0:
        return 1.0
    inter = int(np.count_nonzero(pred.data & gt.data))
    return 2.0 * inter / (a + b)


def surface(mask_data: np.ndarray) -> np.ndarray:
    """Mask voxels with >= 1 six-neighbour outside the mask; the volume
    border counts as outside."""
    m = mask_data
    eroded = m.copy()
    for axis in range(3):
        lo = [slice(None)] * 3
        hi = [slice(None)] * 3
        lo[axis] = slice(0, -1)
        hi[axis] = slice(1, None)
        shifted = np.zeros_like(m)
        shifted[tuple(lo)] = m[tuple(hi)]
        eroded &= shifted
        shifted = np.zeros_like(m)
        shifted[tuple(hi)] = m[tuple(lo)]
        eroded &= shifted
    return m & ~eroded


@dataclass(frozen=True, eq=False)
class SurfaceDistanceSet:
    """Directed surface distances in mm, one array per direction."""

    pred_to_gt: np.ndarray
    gt_to_pred: np.ndarray

    @property
    def pooled(self) -> np.ndarray:
        return np.concatenate([self.pred_to_gt, self.gt_to_pred])


def _union_bbox(a: np.ndarray, b: np.ndarray):
    coords = np.nonzero(a | b)
    return tuple(slice(int(c.min()), int(c.max()) + 1) for c in coords)


def surface_distances(pred: BinaryMask, gt: BinaryMask) -> SurfaceDistanceSet:
    """Distances from each pred-surface voxel to the nearest gt-surface
    voxel and vice versa. Both masks must be non-empty."""
    _check_same_geometry(pred, gt)
    if not pred.data.any() or not gt.data.any():
        raise ContractError("surface distances require two non-empty masks")
    sp = surface(pred.data)
    sg = surface(gt.data)
    box = _union_bbox(sp, sg)  # distances depend only on voxel offsets, so cropping is exact
    sp = sp[box]
    sg = sg[box]
    spacing = pred.geometry.spacing_mm
    d_to_gt = edt_grid(sg, spacing)
    d_to_pred = edt_grid(sp, spacing)
    return SurfaceDistanceSet(d_to_gt[sp], d_to_pred[sg])


def nearest_rank_percentile(values: np.ndarray, percent: int) -> float:
    """Nearest-rank percentile: ceil(percent * N / 100)-th smallest value."""
    n = values.shape[0]
    if n == 0:
        raise ContractError("percentile of an empty distance set")
    rank = -((-percent * n) // 100)  # ceil without float arithmetic
    return float(np.sort(values)[rank - 1])


def hd95(pred: BinaryMask, gt: BinaryMask, penalty_mm: float = DEFAULT_PENALTY_MM) -> float:
    """Pooled symmetric 95th-percentile surface distance in mm."""
    _check_same_geometry(pred, gt)
    p_empty = not pred.data.any()
    g_empty = not gt.data.any()
    if p_empty and g_empty:
        return 0.0
    if p_empty or g_empty:
        return float(penalty_mm)
    distances = surface_distances(pred, gt).pooled
    return nearest_rank_percentile(distances, 95)


@dataclass(frozen=True, eq=False)
class LesionMatch:
    """Overlap matching between predicted and ground-truth components.

    ``pairs`` holds (gt_id, pred_id) tuples; a predicted component may
    match several ground-truth components and vice versa.
    """

    gt_components: ComponentSet
    pred_components: ComponentSet
    pairs: tuple[tuple[int, int], ...]
    dilation_voxels: int

    @property
    def matched_gt_ids(self) -> frozenset[int]:
        return frozenset(g for g, _ in self.pairs)

    @property
    def matched_pred_ids(self) -> frozenset[int]:
        return frozenset(p for _, p in self.pairs)

    def pred_ids_for_gt(self, gt_id: int) -> tuple[int, ...]:
        return tuple(sorted(p for g, p in self.pairs if g == gt_id))

    @property
    def tp(self) -> int:
        return len(self.matched_gt_ids)

    @property
    def fn(self) -> int:
        return self.gt_components.n_components - self.tp

    @property
    def fp(self) -> int:
        return self.pred_components.n_components - len(self.matched_pred_ids)


def match_lesions(
    pred: BinaryMask,
    gt: BinaryMask,
    connectivity: int = 26,
    dilation_voxels: int = 0,
) -> LesionMatch:
    """Match components by >= 1 voxel overlap; ground-truth components are
    dilated by ``dilation_voxels`` (Chebyshev) for the overlap test only."""
    _check_same_geometry(pred, gt)
    gt_comps = connected_components(gt, connectivity)
    pred_comps = connected_components(pred, connectivity)
    pairs: list[tuple[int, int]] = []
    if gt_comps.n_components and pred_comps.n_components:
        if dilation_voxels == 0:
            both = (gt_comps.component_id > 0) & (pred_comps.component_id > 0)
            stacked = np.stack([gt_comps.component_id[both], pred_comps.component_id[both]])
            if stacked.shape[1]:
                pairs = [tuple(int(v) for v in pair) for pair in np.unique(stacked.T, axis=0)]
        else:
            geometry = gt.geometry
            for gid in range(1, gt_comps.n_components + 1):
                comp = gt_comps.component_id == gid
                # dilation only ever adds voxels inside this padded box
                box = tuple(
                    slice(max(0, int(c.min()) - dilation_voxels), int(c.max()) + 1 + dilation_voxels)
                    for c in np.nonzero(comp)
                )
                window = comp[box]
                local_geom = VolumeGeometry(window.shape, geometry.spacing_mm, geometry.affine)
                grown = dilate(BinaryMask(local_geom, window), dilation_voxels)
                overlapped = np.unique(pred_comps.component_id[box][grown.data])
                pairs.extend((gid, int(p)) for p in overlapped if p != 0)
            pairs = sorted(set(pairs))
    return LesionMatch(gt_comps, pred_comps, tuple(pairs), dilation_voxels)


def _lesion_terms(
    match: LesionMatch,
    pred: BinaryMask,
    gt: BinaryMask,
    mode: str,
    penalty_mm: float,
) -> tuple[list[float], list[float]]:
    dsc_terms: list[float] = []
    hd_terms: list[float] = []
    geometry = gt.geometry
    for gid in range(1, match.gt_components.n_components + 1):
        pred_ids = match.pred_ids_for_gt(gid)
        if not pred_ids:
            dsc_terms.append(0.0)
            hd_terms.append(float(penalty_mm))
            continue
        gt_mask = BinaryMask(geometry, match.gt_components.component_id == gid)
        pred_mask = BinaryMask(
            geometry, np.isin(match.pred_components.component_id, pred_ids)
        )
        dsc_terms.append(dice(pred_mask, gt_mask))
        hd_terms.append(hd95(pred_mask, gt_mask, penalty_mm))
    if mode == "lesion-wise":
        for _ in range(match.fp):
            dsc_terms.append(0.0)
            hd_terms.append(float(penalty_mm))
    return dsc_terms, hd_terms


def lesion_wise_scores(
    pred: BinaryMask,
    gt: BinaryMask,
    mode: str,
    penalty_mm: float = DEFAULT_PENALTY_MM,
    connectivity: int = 26,
    dilation_voxels: int = 0,
) -> tuple[float, float]:
    """Mean per-lesion (dsc, hd95). With no ground-truth lesions and no
    penalised false positives the scores are perfect (1.0, 0.0)."""
    if mode not in ("lesion-wise", "semi-lesion-wise"):
        raise ContractError(f"mode must be lesion-wise or semi-lesion-wise, got {mode!r}")
    match = match_lesions(pred, gt, connectivity, dilation_voxels)
    dsc_terms, hd_terms = _lesion_terms(match, pred, gt, mode, penalty_mm)
    if not dsc_terms:
        return 1.0, 0.0
    return float(np.mean(dsc_terms)), float(np.mean(hd_terms))


@dataclass(frozen=True)
class RegionScores:
    region: str
    dsc: float
    hd95: float
    tp: int
    fp: int
    fn: int


@dataclass(frozen=True)
class MetricsReport:
    """Per-region scores and lesion counts for one case."""

    case_id: str
    mode: str
    rows: tuple[RegionScores, ...]

    @property
    def regions(self) -> tuple[str, ...]:
        return tuple(r.region for r in self.rows)


def evaluate_case(
    case_id: str,
    pred_labels: LabelVolume,
    gt_labels: LabelVolume,
    scheme: LabelScheme,
    mode: str = "volumetric",
    penalty_mm: float = DEFAULT_PENALTY_MM,
    connectivity: int = 26,
    dilation_voxels: int = 0,
) -> MetricsReport:
    """Score every report region of the scheme for one case.

    Lesion counts (tp/fp/fn) come from overlap matching in all modes;
    dsc/hd95 are volumetric or lesion-wise depending on ``mode``.
    """
    if mode not in MODES:
        raise ContractError(f"mode must be one of {MODES}, got {mode!r}")
    if not pred_labels.geometry.matches(gt_labels.geometry):
        raise ContractError("prediction and ground-truth geometries differ")
    validate_labels(pred_labels, scheme)
    validate_labels(gt_labels, scheme)
    rows = []
    for region in scheme.report_regions:
        pmask = region_mask(pred_labels, region)
        gmask = region_mask(gt_labels, region)
        match = match_lesions(pmask, gmask, connectivity, dilation_voxels)
        if mode == "volumetric":
            d = dice(pmask, gmask)
            h = hd95(pmask, gmask, penalty_mm)
        else:
            dsc_terms, hd_terms = _lesion_terms(match, pmask, gmask, mode, penalty_mm)
            d = float(np.mean(dsc_terms)) if dsc_terms else 1.0
            h = float(np.mean(hd_terms)) if hd_terms else 0.0
        rows.append(RegionScores(region.name, d, h, match.tp, match.fp, match.fn))
    return MetricsReport(case_id, mode, tuple(rows))


@dataclass(frozen=True)
class RegionSummary:
    region: str
    dsc_mean: float
    dsc_std: float
    hd95_mean: float
    hd95_std: float
    tp: int
    fp: int
    fn: int


@dataclass(frozen=True)
class AggregateSummary:
    n_cases: int
    rows: tuple[RegionSummary, ...]


def aggregate_reports(reports: list[MetricsReport]) -> AggregateSummary:
    """Per-region mean and population std of dsc/hd95; counts summed."""
    if not reports:
        raise ContractError("cannot aggregate an empty report list")
    regions = reports[0].regions
    for report in reports:
        if report.regions != regions:
            raise ContractError(
                f"case {report.case_id}: regions {report.regions} differ from {regions}"
            )
    rows = []
    for i, region in enumerate(regions):
        dscs = np.array([r.rows[i].dsc for r in reports], dtype=np.float64)
        hds = np.array([r.rows[i].hd95 for r in reports], dtype=np.float64)
        rows.append(
            RegionSummary(
                region=region,
                dsc_mean=float(dscs.mean()),
                dsc_std=float(dscs.std()),
                hd95_mean=float(hds.mean()),
                hd95_std=float(hds.std()),
                tp=sum(r.rows[i].tp for r in reports),
                fp=sum(r.rows[i].fp for r in reports),
                fn=sum(r.rows[i].fn for r in reports),
            )
        )
    return AggregateSummary(len(reports), tuple(rows))


CASE_CSV_COLUMNS = ("case", "region", "mode", "dsc", "hd95", "tp", "fp", "fn")
SUMMARY_CSV_COLUMNS = (
    "Region",
    "DSC (Mean)",
    "DSC (Std)",
    "HD95 (Mean)",
    "HD95 (Std)",
    "TP",
    "FP",
    "FN",
)


def reports_to_csv(reports: list[MetricsReport]) -> str:
    """One row per case x region."""
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CASE_CSV_COLUMNS)
    for report in reports:
        for row in report.rows:
            writer.writerow(
                [
                    report.case_id,
                    row.region,
                    report.mode,
                    f"{row.dsc:.6f}",
                    f"{row.hd95:.6f}",
                    row.tp,
                    row.fp,
                    row.fn,
                ]
            )
    return buf.getvalue()


def reports_from_csv(text: str) -> list[MetricsReport]:
    """Inverse of ``reports_to_csv`` (used by the aggregate command)."""
    reader = csv.reader(io.StringIO(text))
    header = next(reader, None)
    if header != list(CASE_CSV_COLUMNS):
        raise ContractError(f"unexpected per-case CSV header {header!r}")
    by_case: dict[tuple[str, str], list[RegionScores]] = {}
    order: list[tuple[str, str]] = []
    for parts in reader:
        if not parts:
            continue
        case, region, mode, d, h, tp, fp, fn = parts
        key = (case, mode)
        if key not in by_case:
            by_case[key] = []
            order.append(key)
        by_case[key].append(RegionScores(region, float(d), float(h), int(tp), int(fp), int(fn)))
    return [MetricsReport(case, mode, tuple(rows)) for (case, mode), rows in
            ((key, by_case[key]) for key in order)]


def reports_to_json(reports: list[MetricsReport]) -> str:
    payload = {
        "cases": [
            {
                "case": report.case_id,
                "mode": report.mode,
                "regions": [
                    {
                        "region": row.region,
                        "dsc": round(row.dsc, 6),
                        "hd95": round(row.hd95, 6),
                        "tp": row.tp,
                        "fp": row.fp,
                        "fn": row.fn,
                    }
                    for row in report.rows
                ],
            }
            for report in reports
        ]
    }
    return json.dumps(payload, indent=2, sort_keys=True) + "\n"


def summary_to_csv(summary: AggregateSummary) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(SUMMARY_CSV_COLUMNS)
    for row in summary.rows:
        writer.writerow(
            [
                row.region,
                f"{row.dsc_mean:.6f}",
                f"{row.dsc_std:.6f}",
                f"{row.hd95_mean:.6f}",
                f"{row.hd95_std:.6f}",
                row.tp,
                row.fp,
                row.fn,
            ]
        )
    return buf.getvalue()


def summary_to_json(summary: AggregateSummary) -> str:
    payload = {
        "n_cases": summary.n_cases,
        "regions": [
            {
                "region": row.region,
                "dsc_mean": round(row.dsc_mean, 6),
                "dsc_std": round(row.dsc_std, 6),
                "hd95_mean": round(row.hd95_mean, 6),
                "hd95_std": round(row.hd95_std, 6),
                "tp": row.tp,
                "fp": row.fp,
                "fn": row.fn,
            }
            for row in summary.rows
        ],
    }
    return json.dumps(payload, indent=2, sort_keys=True) + "\n"
