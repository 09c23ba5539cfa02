"""Evaluation metrics: overlap, directed surface distances, and HD95.

Surfaces are the centers of occupied voxels with at least one unoccupied
6-neighbor (the grid border counts as unoccupied). Distances are Euclidean
between surface points, scaled to mm by the voxel size.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

from .errors import EmptyGrid, EmptySurface, SpecMismatch
from .grids import ProbGrid, VoxelGrid


@dataclass(frozen=True, eq=False)
class SurfacePointSet:
    """Boundary voxel centers in voxel units, lexicographically ordered."""

    points: np.ndarray
    voxel_size: float

    def __post_init__(self):
        pts = np.ascontiguousarray(self.points, dtype=np.float64).reshape(-1, 3)
        pts.flags.writeable = False
        object.__setattr__(self, "points", pts)

    def __len__(self):
        return len(self.points)


@dataclass(frozen=True)
class MetricsReport:
    dsc: float
    comp_mm: float
    acc_mm: float
    hd95_mm: float
    empty_prediction: bool = False


def extract_surface(g: VoxelGrid) -> SurfacePointSet:
    """Centers of set voxels exposed on at least one face."""
    if g.count == 0:
        raise EmptyGrid("cannot extract a surface from an empty grid")
    occ = g.data.astype(bool)
    padded = np.pad(occ, 1, mode="constant", constant_values=False)
    interior = np.ones_like(occ)
    for axis in range(3):
        lo = np.roll(padded, 1, axis=axis)[1:-1, 1:-1, 1:-1]
        hi = np.roll(padded, -1, axis=axis)[1:-1, 1:-1, 1:-1]
        interior &= lo & hi
    boundary = occ & ~interior
    points = np.argwhere(boundary).astype(np.float64)
    return SurfacePointSet(points, g.spec.voxel_size)


def _check_surfaces(a: SurfacePointSet, b: SurfacePointSet):
    if len(a) == 0 or len(b) == 0:
        raise EmptySurface("surface distance needs two nonempty point sets")
    if a.voxel_size != b.voxel_size:
        raise SpecMismatch("surface point sets use different voxel sizes")


def directed_avg_distance(a: SurfacePointSet, b: SurfacePointSet) -> float:
    """Mean over points of ``a`` of the distance to the nearest point of
    ``b``, in mm."""
    _check_surfaces(a, b)
    dists, _ = cKDTree(b.points).query(a.points)
    return float(dists.mean() * a.voxel_size)


def hd95(a: SurfacePointSet, b: SurfacePointSet, convention: str = "union") -> float:
    """95th percentile Hausdorff distance in mm.

    ``union`` pools both directed distance multisets before taking the
    percentile; ``per_direction_max`` takes the max of the two per-direction
    percentiles.
    """
    _check_surfaces(a, b)
    d_ab = cKDTree(b.points).query(a.points)[0]
    d_ba = cKDTree(a.points).query(b.points)[0]
    if convention == "union":
        q = np.percentile(np.concatenate([d_ab, d_ba]), 95)
    elif convention == "per_direction_max":
        q = max(np.percentile(d_ab, 95), np.percentile(d_ba, 95))
    else:
        raise ValueError(f"unknown hd95 convention {convention!r}")
    return float(q * a.voxel_size)


def hard_dice(a: VoxelGrid, b: VoxelGrid) -> float:
    """Overlap coefficient 2|a&b| / (|a|+|b|); 1.0 when both are empty."""
    if a.spec != b.spec:
        raise SpecMismatch("grids differ in spec")
    na, nb = a.count, b.count
    if na + nb == 0:
        return 1.0
    inter = int((a.data & b.data).sum())
    return 2.0 * inter / (na + nb)


def evaluate(pred: ProbGrid, target: VoxelGrid, threshold: float = 0.5) -> MetricsReport:
    """Binarize the prediction and compare against the target.

    When the binarized prediction is empty the distance metrics are
    reported as +inf and the report is flagged.
    """
    if pred.spec != target.spec:
        raise SpecMismatch("prediction and target differ in spec")
    pred_bin = pred.binarize(threshold)
    dsc = hard_dice(pred_bin, target)
    if pred_bin.count == 0 or target.count == 0:
        return MetricsReport(dsc, math.inf, math.inf, math.inf, True)
    surf_pred = extract_surface(pred_bin)
    surf_target = extract_surface(target)
    comp = directed_avg_distance(surf_target, surf_pred)
    acc = directed_avg_distance(surf_pred, surf_target)
    h = hd95(surf_pred, surf_target)
    return MetricsReport(dsc, comp, acc, h, False)


# ---------------------------------------------------------------------------
# report aggregation and export
# ---------------------------------------------------------------------------

_METRIC_FIELDS = ("dsc", "comp_mm", "acc_mm", "hd95_mm")


def aggregate_reports(reports) -> dict:
    """Mean and standard deviation per metric over a batch of cases.

    Distance metrics average only the cases with nonempty predictions;
    their count is reported alongside. An all-empty batch yields NaN means.
    """
    out = {"n_cases": len(reports), "n_empty": sum(r.empty_prediction for r in reports)}
    for name in _METRIC_FIELDS:
        values = np.array([getattr(r, name) for r in reports], dtype=np.float64)
        finite = values[np.isfinite(values)]
        if len(finite):
            out[f"{name}_mean"] = float(finite.mean())
            out[f"{name}_std"] = float(finite.std())
        else:
            out[f"{name}_mean"] = math.nan
            out[f"{name}_std"] = math.nan
        out[f"{name}_n"] = int(len(finite))
    return out


def _fmt(v) -> str:
    if isinstance(v, float) and not math.isfinite(v):
        return "N/A"
    if isinstance(v, float):
        return f"{v:.6f}"
    return str(v)


def write_case_reports_json(reports, path):
    rows = [asdict(r) for r in reports]
    for row in rows:
        for k, v in row.items():
            if isinstance(v, float) and not math.isfinite(v):
                row[k] = None
    payload = {"cases": rows, "aggregate": aggregate_reports(reports)}
    for k, v in payload["aggregate"].items():
        if isinstance(v, float) and not math.isfinite(v):
            payload["aggregate"][k] = None
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)


def write_metrics_csv(rows, path, label_field="method"):
    """One row per labelled aggregate: mean +/- std columns per metric."""
    path = Path(path)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        header = [label_field]
        for name in _METRIC_FIELDS:
            header += [f"{name}_mean", f"{name}_std"]
        writer.writerow(header)
        for label, agg in rows:
            out = [label]
            for name in _METRIC_FIELDS:
                out += [_fmt(agg[f"{name}_mean"]), _fmt(agg[f"{name}_std"])]
            writer.writerow(out)
