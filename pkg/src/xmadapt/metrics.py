"""Evaluation measures on binary masks: Dice (%) and HD95 (pixels)."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
from scipy import ndimage

from .errors import DimensionError


@dataclass
class EvalRecord:
    dice_percent: float
    hd95: Optional[float]  # None when either mask is empty
    sample_id: str = ""
    hd95_undefined: int = 0  # aggregates: how many samples had no HD95


def _pair(pred, gt) -> tuple[np.ndarray, np.ndarray]:
    p, g = np.asarray(pred).astype(bool), np.asarray(gt).astype(bool)
    if p.shape != g.shape:
        raise DimensionError(f"mask shapes differ: {p.shape} vs {g.shape}")
    return p, g


def dice_score(pred, gt) -> float:
    p, g = _pair(pred, gt)
    total = int(p.sum()) + int(g.sum())
    if total == 0:
        return 100.0
    return 100.0 * 2.0 * int((p & g).sum()) / total


_FOUR = ndimage.generate_binary_structure(2, 1)


def boundary(mask) -> np.ndarray:
    """Foreground pixels 4-adjacent to background; outside the image counts as background."""
    m = np.asarray(mask).astype(bool)
    inner = ndimage.binary_erosion(m, structure=_FOUR, border_value=0)
    return m & ~inner


def _directed(src: np.ndarray, dst: np.ndarray) -> np.ndarray:
    # Exact EDT: distance from every pixel to the nearest dst-boundary pixel.
    dist = ndimage.distance_transform_edt(~dst)
    return dist[src]


def surface_distances(pred, gt) -> Optional[np.ndarray]:
    """Both directed nearest-boundary distance sets, concatenated."""
    p, g = _pair(pred, gt)
    if not p.any() or not g.any():
        return None
    bp, bg = boundary(p), boundary(g)
    return np.concatenate([_directed(bp, bg), _directed(bg, bp)])


def hd95(pred, gt) -> Optional[float]:
    """95th percentile (linear interpolation) of the combined boundary distances."""
    d = surface_distances(pred, gt)
    if d is None:
        return None
    return float(np.percentile(d, 95))


def hausdorff(pred, gt) -> Optional[float]:
    d = surface_distances(pred, gt)
    return None if d is None else float(d.max())


def evaluate_masks(pred, gt, sample_id: str = "") -> EvalRecord:
    h = hd95(pred, gt)
    return EvalRecord(dice_score(pred, gt), h, sample_id, int(h is None))


def aggregate(records: Sequence[EvalRecord]) -> EvalRecord:
    """Mean Dice; mean HD95 over samples where it is defined."""
    if not records:
        raise ValueError("no records to aggregate")
    dice = float(np.mean([r.dice_percent for r in records]))
    defined = [r.hd95 for r in records if r.hd95 is not None]
    h = float(np.mean(defined)) if defined else None
    return EvalRecord(dice, h, "mean", len(records) - len(defined))
