"""Hierarchical soft-IoU loss, evaluation IoU and voxel Chamfer distance."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
from scipy.spatial import cKDTree

from .geometry import GridSpec

IOU_EPS = 1e-6
FULL_SCALE_LEVEL_WEIGHTS = (0.30, 0.27, 0.23, 0.20)


@dataclass(frozen=True)
class LossWeights:
    w: tuple[float, ...]

    def __post_init__(self):
        object.__setattr__(self, "w", tuple(float(x) for x in self.w))
        if any(x < 0 for x in self.w):
            raise ValueError("loss weights must be non-negative")

    def __len__(self):
        return len(self.w)

    @classmethod
    def for_levels(cls, n_levels: int) -> "LossWeights":
        """Full-scale weights for 4 levels; other depths take the first n and renormalize."""
        if n_levels == len(FULL_SCALE_LEVEL_WEIGHTS):
            return cls(FULL_SCALE_LEVEL_WEIGHTS)
        if n_levels < len(FULL_SCALE_LEVEL_WEIGHTS):
            head = FULL_SCALE_LEVEL_WEIGHTS[:n_levels]
            s = sum(head)
            return cls(tuple(x / s for x in head))
        return cls((1.0 / n_levels,) * n_levels)


def soft_iou_loss(pred: torch.Tensor, gt: torch.Tensor, eps: float = IOU_EPS) -> torch.Tensor:
    """1 - soft IoU over the last three (spatial) dims, averaged over any leading batch dims."""
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch {tuple(pred.shape)} vs {tuple(gt.shape)}")
    gt = gt.to(pred.dtype)
    dims = (-3, -2, -1)
    inter = (pred * gt).sum(dim=dims)
    union = pred.sum(dim=dims) + gt.sum(dim=dims) - inter
    return (1.0 - inter / (union + eps)).mean()


def level_losses(pred_levels, gt_levels) -> list[torch.Tensor]:
    if len(pred_levels) != len(gt_levels):
        raise ValueError(f"level count mismatch: {len(pred_levels)} vs {len(gt_levels)}")
    return [soft_iou_loss(p, g) for p, g in zip(pred_levels, gt_levels)]


def total_loss(pred_levels, gt_levels, weights: LossWeights) -> torch.Tensor:
    losses = level_losses(pred_levels, gt_levels)
    if len(weights) != len(losses):
        raise ValueError(f"{len(weights)} weights for {len(losses)} levels")
    return sum(w * l for w, l in zip(weights.w, losses))


def eval_iou(pred, gt) -> float:
    """|pred & gt| / |pred | gt| on binary grids; 1.0 when both are empty."""
    p = np.asarray(pred, dtype=bool)
    g = np.asarray(gt, dtype=bool)
    if p.shape != g.shape:
        raise ValueError(f"shape mismatch {p.shape} vs {g.shape}")
    union = np.count_nonzero(p | g)
    if union == 0:
        return 1.0
    return np.count_nonzero(p & g) / union


def chamfer_distance(pred, gt, grid: GridSpec) -> float:
    """Sum of the two directional mean nearest-neighbour distances between
    occupied voxel centres, in metres.

    Both empty gives 0; exactly one empty gives the ROI diagonal.
    """
    p = np.asarray(pred, dtype=bool)
    g = np.asarray(gt, dtype=bool)
    a = grid.voxel_centers(np.argwhere(p))
    b = grid.voxel_centers(np.argwhere(g))
    if len(a) == 0 and len(b) == 0:
        return 0.0
    if len(a) == 0 or len(b) == 0:
        return grid.diagonal_m
    d_ab, _ = cKDTree(b).query(a)
    d_ba, _ = cKDTree(a).query(b)
    return math.fsum(d_ab) / len(a) + math.fsum(d_ba) / len(b)
