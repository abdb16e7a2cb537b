"""Evaluation protocol: MAE/RMSE/MedAE with truncation and class masks.

Residuals beyond the truncation threshold are discarded before any statistic
is computed, for every class. The building class uses the building mask
dilated by two cells to keep aliased wall pixels out of the terrain class.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .raster import HeightField

DEFAULT_TRUNCATION_M = 20.0
BUILDING_DILATION_CELLS = 2
CLASS_NAMES = ("overall", "buildings", "terrain")


@dataclass(frozen=True)
class ClassMetrics:
    """Error statistics over one cell class; nan marks an empty class."""

    mae: float
    rmse: float
    medae: float
    cell_count: int

    @property
    def defined(self) -> bool:
        return self.cell_count > 0


@dataclass(frozen=True)
class MetricsReport:
    """Per-class statistics plus the cell bookkeeping of one evaluation."""

    overall: ClassMetrics
    buildings: ClassMetrics
    terrain: ClassMetrics
    evaluated_cell_count: int
    truncated_cell_count: int
    excluded_cell_count: int
    total_cell_count: int
    truncation_threshold: float

    def classes(self) -> dict[str, ClassMetrics]:
        return {"overall": self.overall, "buildings": self.buildings, "terrain": self.terrain}


def dilate_mask(mask: np.ndarray, radius: int = BUILDING_DILATION_CELLS) -> np.ndarray:
    """Morphological dilation with a (2*radius+1) square structuring element."""
    out = np.asarray(mask, dtype=bool)
    if radius < 0:
        raise ValueError("radius must be nonnegative")
    if radius == 0 or not out.any():
        return out.copy()
    structure = np.ones((2 * radius + 1, 2 * radius + 1), dtype=bool)
    return ndimage.binary_dilation(out, structure=structure)


def _lower_median(values: np.ndarray) -> float:
    # even counts take the lower of the two central values, never interpolate
    k = (values.size - 1) // 2
    return float(np.partition(values, k)[k])


def _class_metrics(residuals: np.ndarray) -> ClassMetrics:
    if residuals.size == 0:
        return ClassMetrics(math.nan, math.nan, math.nan, 0)
    r = np.abs(residuals.astype(np.float64, copy=False))
    return ClassMetrics(
        mae=float(r.mean()),
        rmse=float(np.sqrt(np.mean(r * r))),
        medae=_lower_median(r),
        cell_count=int(r.size),
    )


def class_residuals(
    pred: HeightField,
    truth: HeightField,
    building_mask: np.ndarray | None = None,
    exclusion_mask: np.ndarray | None = None,
    trunc: float = DEFAULT_TRUNCATION_M,
):
    """Split residuals into the evaluated classes.

    Returns (per-class residual arrays, truncated count, excluded count).
    Cells are excluded when masked out, nodata on either raster, or
    non-finite; surviving cells with |residual| > trunc are truncated and
    appear in no class.
    """
    if not pred.same_grid(truth):
        raise ValueError("prediction and truth must share a grid")
    if not trunc > 0:
        raise ValueError("truncation threshold must be positive")
    residual = pred.values.astype(np.float64) - truth.values.astype(np.float64)
    excluded = pred.nodata_mask | truth.nodata_mask | ~np.isfinite(residual)
    if exclusion_mask is not None:
        excluded = excluded | np.asarray(exclusion_mask, dtype=bool)
    truncated = ~excluded & (np.abs(residual) > trunc)
    evaluated = ~(excluded | truncated)

    if building_mask is None:
        dilated = np.zeros(residual.shape, dtype=bool)
    else:
        dilated = dilate_mask(building_mask, BUILDING_DILATION_CELLS)
    selectors = {
        "overall": evaluated,
        "buildings": evaluated & dilated,
        "terrain": evaluated & ~dilated,
    }
    per_class = {name: residual[sel] for name, sel in selectors.items()}
    return per_class, int(truncated.sum()), int(excluded.sum())


def compute_metrics(
    pred: HeightField,
    truth: HeightField,
    building_mask: np.ndarray | None = None,
    exclusion_mask: np.ndarray | None = None,
    trunc: float = DEFAULT_TRUNCATION_M,
) -> MetricsReport:
    """Evaluate a refined DEM against the target on the shared grid."""
    per_class, truncated, excluded = class_residuals(
        pred, truth, building_mask, exclusion_mask, trunc
    )
    return MetricsReport(
        overall=_class_metrics(per_class["overall"]),
        buildings=_class_metrics(per_class["buildings"]),
        terrain=_class_metrics(per_class["terrain"]),
        evaluated_cell_count=int(per_class["overall"].size),
        truncated_cell_count=truncated,
        excluded_cell_count=excluded,
        total_cell_count=int(pred.values.size),
        truncation_threshold=float(trunc),
    )


def average_reports(reports) -> MetricsReport:
    """Unweighted mean of several reports (multi-pair evaluation).

    Class statistics average only over the reports where the class is
    defined; counts are summed.
    """
    reports = list(reports)
    if not reports:
        raise ValueError("need at least one report")

    def mean_class(name: str) -> ClassMetrics:
        parts = [r.classes()[name] for r in reports]
        live = [p for p in parts if p.defined]
        if not live:
            return ClassMetrics(math.nan, math.nan, math.nan, 0)
        return ClassMetrics(
            mae=float(np.mean([p.mae for p in live])),
            rmse=float(np.mean([p.rmse for p in live])),
            medae=float(np.mean([p.medae for p in live])),
            cell_count=sum(p.cell_count for p in parts),
        )

    return MetricsReport(
        overall=mean_class("overall"),
        buildings=mean_class("buildings"),
        terrain=mean_class("terrain"),
        evaluated_cell_count=sum(r.evaluated_cell_count for r in reports),
        truncated_cell_count=sum(r.truncated_cell_count for r in reports),
        excluded_cell_count=sum(r.excluded_cell_count for r in reports),
        total_cell_count=sum(r.total_cell_count for r in reports),
        truncation_threshold=reports[0].truncation_threshold,
    )


def _format_metric(value: float) -> str:
    return "n/a" if math.isnan(value) else f"{value:.2f}"


def emit_table(reports) -> str:
    """Render named reports as CSV, one method per row.

    Columns are method name followed by mae/rmse/medae for each class in
    (overall, buildings, terrain) order, formatted to two decimals; empty
    classes render as n/a.
    """
    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator="\n")
    header = ["method"]
    for cls in CLASS_NAMES:
        header += [f"{cls}_mae", f"{cls}_rmse", f"{cls}_medae"]
    writer.writerow(header)
    for name, report in reports:
        row = [name]
        for cls in CLASS_NAMES:
            m = report.classes()[cls]
            row += [_format_metric(m.mae), _format_metric(m.rmse), _format_metric(m.medae)]
        writer.writerow(row)
    return buffer.getvalue()
