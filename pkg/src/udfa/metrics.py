"""Training loss (soft Dice + cross-entropy) and mask metrics (DSC, IoU,
Hausdorff distance over boundary voxels, in voxel units).
"""

from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F
from scipy import ndimage
from scipy.spatial import cKDTree

SMOOTH = 1e-5


@dataclass
class LossValue:
    total: torch.Tensor
    dice_term: torch.Tensor
    ce_term: torch.Tensor


def dice_ce_loss(logits: torch.Tensor, labels: torch.Tensor, w_dice: float = 1.0, w_ce: float = 1.0) -> LossValue:
    """Weighted sum of mean cross-entropy and (1 - mean soft Dice).

    The Dice term runs on softmax probabilities against one-hot labels with
    additive smoothing, so it stays differentiable and defined for absent
    classes.
    """
    if not torch.isfinite(logits).all():
        raise ValueError("non-finite logits passed to dice_ce_loss")
    if logits.ndim != 4 or labels.ndim != 3:
        raise ValueError(f"expected (B,C,H,W) logits and (B,H,W) labels, got {tuple(logits.shape)} / {tuple(labels.shape)}")
    num_classes = logits.shape[1]
    ce = F.cross_entropy(logits, labels)
    probs = torch.softmax(logits, dim=1)
    one_hot = F.one_hot(labels, num_classes).permute(0, 3, 1, 2).to(probs.dtype)
    inter = (probs * one_hot).sum(dim=(0, 2, 3))
    denom = probs.sum(dim=(0, 2, 3)) + one_hot.sum(dim=(0, 2, 3))
    dice_per_class = (2.0 * inter + SMOOTH) / (denom + SMOOTH)
    dice = 1.0 - dice_per_class.mean()
    total = w_dice * dice + w_ce * ce
    return LossValue(total=total, dice_term=dice, ce_term=ce)


def _class_masks(pred, gt, class_id):
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    if pred.shape != gt.shape:
        raise ValueError(f"mask shapes differ: {pred.shape} vs {gt.shape}")
    return pred == class_id, gt == class_id


def dice_score(pred, gt, class_id) -> float:
    """2|P∩G| / (|P|+|G|); 1.0 when both masks are empty, 0.0 when one is."""
    p, g = _class_masks(pred, gt, class_id)
    np_, ng = int(p.sum()), int(g.sum())
    if np_ == 0 and ng == 0:
        return 1.0
    if np_ == 0 or ng == 0:
        return 0.0
    return 2.0 * int((p & g).sum()) / (np_ + ng)


def iou_score(pred, gt, class_id) -> float:
    """|P∩G| / |P∪G|; 1.0 when both empty, 0.0 when one is."""
    p, g = _class_masks(pred, gt, class_id)
    np_, ng = int(p.sum()), int(g.sum())
    if np_ == 0 and ng == 0:
        return 1.0
    if np_ == 0 or ng == 0:
        return 0.0
    return int((p & g).sum()) / int((p | g).sum())


def _boundary_points(mask: np.ndarray) -> np.ndarray:
    """Voxel coordinates of the mask's boundary (face-connected erosion
    with background outside the array, so edge voxels count as boundary).
    """
    eroded = ndimage.binary_erosion(mask, border_value=0)
    return np.argwhere(mask & ~eroded)


def boundary_distances(pred_mask: np.ndarray, gt_mask: np.ndarray):
    """Pooled nearest-boundary distances in both directions, or None when
    exactly one mask is empty (distance undefined); empty array when both
    are empty.
    """
    p_empty, g_empty = not pred_mask.any(), not gt_mask.any()
    if p_empty and g_empty:
        return np.zeros(0)
    if p_empty or g_empty:
        return None
    p_pts = _boundary_points(pred_mask)
    g_pts = _boundary_points(gt_mask)
    d_pg = cKDTree(g_pts).query(p_pts)[0]
    d_gp = cKDTree(p_pts).query(g_pts)[0]
    return np.concatenate([d_pg, d_gp])


def hausdorff_distance(pred, gt, class_id, percentile: float = 95.0):
    """Percentile of pooled symmetric boundary distances (Euclidean, voxel
    units). 0.0 when both masks are empty; None (undefined) when one is.
    """
    p, g = _class_masks(pred, gt, class_id)
    pooled = boundary_distances(p, g)
    if pooled is None:
        return None
    if pooled.size == 0:
        return 0.0
    return float(np.percentile(pooled, percentile))


@dataclass
class CaseMetrics:
    """Per-foreground-class metrics for one evaluation case. Hausdorff
    entries are None where undefined (exactly one mask empty).
    """

    case_id: str
    dsc: dict = field(default_factory=dict)
    iou: dict = field(default_factory=dict)
    hd95: dict = field(default_factory=dict)
    hd100: dict = field(default_factory=dict)


def compute_case_metrics(pred_vol, gt_vol, num_classes: int, case_id: str = "") -> CaseMetrics:
    """Evaluate foreground classes 1..num_classes-1 on one label volume."""
    out = CaseMetrics(case_id=case_id)
    for c in range(1, num_classes):
        p, g = _class_masks(pred_vol, gt_vol, c)
        out.dsc[c] = dice_score(pred_vol, gt_vol, c)
        out.iou[c] = iou_score(pred_vol, gt_vol, c)
        pooled = boundary_distances(p, g)
        if pooled is None:
            out.hd95[c] = None
            out.hd100[c] = None
        elif pooled.size == 0:
            out.hd95[c] = 0.0
            out.hd100[c] = 0.0
        else:
            out.hd95[c] = float(np.percentile(pooled, 95.0))
            out.hd100[c] = float(np.percentile(pooled, 100.0))
    return out
