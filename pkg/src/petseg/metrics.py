"""Lesion-level evaluation: foreground Dice and false positive / negative volumes."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .volume import Volume

_STRUCTURES = {
    6: ndimage.generate_binary_structure(3, 1),
    18: ndimage.generate_binary_structure(3, 2),
    26: ndimage.generate_binary_structure(3, 3),
}


class MetricsError(ValueError):
    pass


@dataclass
class LabeledComponents:
    labels: np.ndarray  # 0 = background, 1..K
    sizes: np.ndarray  # sizes[k - 1] = voxel count of component k

    @property
    def count(self) -> int:
        return int(self.sizes.size)


@dataclass
class MetricsReport:
    case_id: str
    dice: float
    fp_volume_ml: float
    fn_volume_ml: float

    def as_row(self) -> dict:
        return {"case": self.case_id, "dice": self.dice, "fp_volume_ml": self.fp_volume_ml, "fn_volume_ml": self.fn_volume_ml}


def _as_array(m) -> np.ndarray:
    return m.data if isinstance(m, Volume) else np.asarray(m)


def _binary(m, what="mask") -> np.ndarray:
    a = _as_array(m)
    if not np.all((a == 0) | (a == 1)):
        raise MetricsError(f"{what} must be binary")
    return a.astype(bool)


def _same_grid(pred, gt) -> tuple[np.ndarray, np.ndarray]:
    p, g = _binary(pred, "prediction"), _binary(gt, "ground truth")
    if p.shape != g.shape:
        raise MetricsError(f"grid mismatch: prediction {p.shape} vs ground truth {g.shape}")
    if isinstance(pred, Volume) and isinstance(gt, Volume) and not pred.same_grid(gt, tol=1e-3):
        raise MetricsError("prediction and ground truth lie on different grids")
    return p, g


def connected_components(mask, connectivity: int = 26) -> LabeledComponents:
    """Label maximal connected foreground sets (6-, 18- or 26-neighbourhood)."""
    if connectivity not in _STRUCTURES:
        raise MetricsError(f"connectivity must be 6, 18 or 26, got {connectivity}")
    m = _binary(mask)
    labels, k = ndimage.label(m, structure=_STRUCTURES[connectivity])
    sizes = np.bincount(labels.ravel(), minlength=k + 1)[1:]
    return LabeledComponents(labels.astype(np.int32), sizes.astype(np.int64))


def dice_score(pred, gt) -> float:
    """``2|P & G| / (|P| + |G|)``; 1.0 when both masks are empty."""
    p, g = _same_grid(pred, gt)
    denom = int(p.sum()) + int(g.sum())
    if denom == 0:
        return 1.0
    return 2.0 * int(np.logical_and(p, g).sum()) / denom


def _unmatched_component_voxels(source: np.ndarray, other: np.ndarray, connectivity: int) -> int:
    cc = connected_components(source.astype(np.uint8), connectivity)
    if cc.count == 0:
        return 0
    touched = np.unique(cc.labels[other & (cc.labels > 0)])
    keep = np.ones(cc.count, dtype=bool)
    keep[touched - 1] = False
    return int(cc.sizes[keep].sum())


def _voxel_ml(spacing) -> float:
    sx, sy, sz = (float(s) for s in spacing)
    return sx * sy * sz / 1000.0


def false_positive_volume(pred, gt, spacing=None, connectivity: int = 26) -> float:
    """Volume (mL) of predicted components that do not touch ground-truth foreground."""
    p, g = _same_grid(pred, gt)
    spacing = spacing if spacing is not None else pred.spacing
    return _unmatched_component_voxels(p, g, connectivity) * _voxel_ml(spacing)


def false_negative_volume(pred, gt, spacing=None, connectivity: int = 26) -> float:
    """Volume (mL) of ground-truth components that the prediction does not touch."""
    p, g = _same_grid(pred, gt)
    spacing = spacing if spacing is not None else gt.spacing
    return _unmatched_component_voxels(g, p, connectivity) * _voxel_ml(spacing)


def evaluate_case(pred: Volume, gt: Volume, case_id: str = "", connectivity: int = 26) -> MetricsReport:
    return MetricsReport(
        case_id,
        dice_score(pred, gt),
        false_positive_volume(pred, gt, gt.spacing, connectivity),
        false_negative_volume(pred, gt, gt.spacing, connectivity),
    )


def summarize(reports) -> dict:
    """Mean and (population) standard deviation of each metric."""
    out = {}
    for key in ("dice", "fp_volume_ml", "fn_volume_ml"):
        vals = np.array([getattr(r, key) for r in reports], dtype=np.float64)
        out[key] = {"mean": float(vals.mean()) if vals.size else float("nan"), "std": float(vals.std()) if vals.size else float("nan")}
    return out
