"""Detection loss for character-box supervision.

Pieces: focal classification loss under independent per-class sigmoids,
L1 + (1 - GIoU) box loss, minimum-cost bipartite matching between queries
and ground-truth characters, and the matched total loss with deep
supervision over auxiliary decoder layers.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import torch
from scipy.optimize import linear_sum_assignment

from .core import BBox, CharAnnotation

PROB_CLAMP = 1e-6


@dataclass
class LossWeights:
    match_cls: float = 2.0
    match_box: float = 5.0
    train_cls: float = 1.0
    train_box: float = 5.0
    box_l1: float = 5.0
    box_giou: float = 2.0
    focal_alpha: float = 0.25
    focal_gamma: float = 2.0

    def __post_init__(self):
        for name in ("match_cls", "match_box", "train_cls", "train_box",
                     "box_l1", "box_giou", "focal_alpha", "focal_gamma"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")


@dataclass
class MatchResult:
    """Optimal query/ground-truth pairing; unmatched queries get no-object."""

    assignment: list[tuple[int, int]]  # (query_index, gt_index)

    def query_for_gt(self) -> dict[int, int]:
        return {g: q for q, g in self.assignment}


def focal_loss(prob, target, alpha: float = 0.25, gamma: float = 2.0):
    """Focal term -alpha * (1 - p_t)^gamma * log(p_t), p_t = p or 1-p.

    Accepts floats, arrays or tensors; probabilities are clamped to
    [1e-6, 1 - 1e-6] first. The alpha factor weights both target values
    uniformly, so gamma=0, alpha=1 is exactly binary cross-entropy.
    """
    scalar = not isinstance(prob, torch.Tensor) and np.isscalar(prob)
    p = torch.as_tensor(prob, dtype=torch.float64 if scalar else None)
    t = torch.as_tensor(target, dtype=p.dtype, device=p.device)
    p = p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP)
    p_t = torch.where(t > 0.5, p, 1.0 - p)
    out = -alpha * (1.0 - p_t) ** gamma * torch.log(p_t)
    return float(out) if scalar else out


def box_loss(gt: BBox, pred: BBox, weights: LossWeights) -> float:
    """Weighted L1 + (1 - GIoU) distance between two boxes; 0 iff identical."""
    from .core import giou

    l1 = (abs(gt.cx - pred.cx) + abs(gt.cy - pred.cy)
          + abs(gt.w - pred.w) + abs(gt.h - pred.h))
    return weights.box_l1 * l1 + weights.box_giou * (1.0 - giou(gt, pred))


def giou_matrix(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Pairwise GIoU between two sets of cxcywh boxes: [N, 4] x [Q, 4] -> [N, Q]."""
    ax0, ay0 = a[:, 0] - a[:, 2] / 2, a[:, 1] - a[:, 3] / 2
    ax1, ay1 = a[:, 0] + a[:, 2] / 2, a[:, 1] + a[:, 3] / 2
    bx0, by0 = b[:, 0] - b[:, 2] / 2, b[:, 1] - b[:, 3] / 2
    bx1, by1 = b[:, 0] + b[:, 2] / 2, b[:, 1] + b[:, 3] / 2
    area_a = (a[:, 2] * a[:, 3])[:, None]
    area_b = (b[:, 2] * b[:, 3])[None, :]
    iw = (torch.min(ax1[:, None], bx1[None, :]) - torch.max(ax0[:, None], bx0[None, :])).clamp(min=0)
    ih = (torch.min(ay1[:, None], by1[None, :]) - torch.max(ay0[:, None], by0[None, :])).clamp(min=0)
    inter = iw * ih
    union = area_a + area_b - inter
    ew = torch.max(ax1[:, None], bx1[None, :]) - torch.min(ax0[:, None], bx0[None, :])
    eh = torch.max(ay1[:, None], by1[None, :]) - torch.min(ay0[:, None], by0[None, :])
    enclose = (ew * eh).clamp(min=1e-12)
    return inter / union.clamp(min=1e-12) - (enclose - union) / enclose


def l1_matrix(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    return torch.cdist(a, b, p=1)


def _cost_matrix_t(probs: torch.Tensor, boxes: torch.Tensor,
                   gt_classes: torch.Tensor, gt_boxes: torch.Tensor,
                   w: LossWeights) -> torch.Tensor:
    """Matching cost [N, Q]: focal loss vs one-hot target plus box loss."""
    pos = focal_loss(probs, torch.ones_like(probs), w.focal_alpha, w.focal_gamma)  # [Q, A]
    neg = focal_loss(probs, torch.zeros_like(probs), w.focal_alpha, w.focal_gamma)
    neg_total = neg.sum(dim=1)  # [Q]
    # one-hot focal = sum of negatives with the target column swapped to positive
    cls_cost = neg_total[None, :] + (pos - neg).T[gt_classes]  # [N, Q]
    box_cost = (w.box_l1 * l1_matrix(gt_boxes, boxes)
                + w.box_giou * (1.0 - giou_matrix(gt_boxes, boxes)))
    return w.match_cls * cls_cost + w.match_box * box_cost


def matching_cost_matrix(detections, annotations: Sequence[CharAnnotation],
                         weights: LossWeights) -> np.ndarray:
    """N x Q matching cost between ground-truth characters and detections."""
    if len(annotations) == 0:
        raise ValueError("matching cost needs at least one annotation")
    probs = torch.as_tensor(np.stack([d.probs for d in detections]), dtype=torch.float64)
    boxes = torch.as_tensor(np.stack([d.box.as_array() for d in detections]), dtype=torch.float64)
    gt_cls = torch.as_tensor([a.symbol_index for a in annotations], dtype=torch.long)
    gt_box = torch.as_tensor(np.stack([a.box.as_array() for a in annotations]), dtype=torch.float64)
    with torch.no_grad():
        cost = _cost_matrix_t(probs, boxes, gt_cls, gt_box, weights)
    return cost.numpy()


def hungarian_match(cost, canonical: bool = True) -> MatchResult:
    """Globally optimal assignment of ground truth rows to query columns.

    With ``canonical`` set, ties between equal-cost optima are broken toward
    the lexicographically smallest assignment vector (ordered by ground-truth
    index). The refinement costs extra sub-solves, so hot loops with generic
    float costs (where the optimum is unique anyway) may disable it.
    """
    cost = np.asarray(cost, dtype=np.float64)
    if cost.ndim != 2:
        raise ValueError("cost must be a 2-D matrix")
    n, q = cost.shape
    if n > q:
        raise ValueError(f"more ground truth rows ({n}) than queries ({q})")
    if n == 0:
        return MatchResult([])
    if not np.all(np.isfinite(cost)):
        raise ValueError("cost matrix must be finite")

    rows, cols = linear_sum_assignment(cost)
    if not canonical:
        return MatchResult([(int(c), int(g)) for g, c in zip(rows, cols)])
    best = float(cost[rows, cols].sum())
    tol = 1e-9 * max(1.0, abs(best))

    assignment_cols: list[int] = []
    remaining = list(range(q))
    residual = best
    for row in range(n):
        chosen = None
        for pos, col in enumerate(remaining):
            rest_cols = remaining[:pos] + remaining[pos + 1:]
            if row + 1 < n:
                sub = cost[row + 1:][:, rest_cols]
                # cheap lower bound: per-row minima; prune before solving
                if cost[row, col] + float(sub.min(axis=1).sum()) > residual + tol:
                    continue
                r2, c2 = linear_sum_assignment(sub)
                sub_opt = float(sub[r2, c2].sum())
            else:
                sub_opt = 0.0
            if cost[row, col] + sub_opt <= residual + tol:
                chosen = col
                remaining = rest_cols
                residual -= cost[row, col]
                break
        if chosen is None:  # numerically impossible; fall back to the solver answer
            chosen = int(cols[row])
            remaining = [c for c in remaining if c != chosen]
            residual -= cost[row, chosen]
            assignment_cols.append(chosen)
        else:
            assignment_cols.append(chosen)

    return MatchResult([(int(c), g) for g, c in enumerate(assignment_cols)])


def _sorted_sum(values: torch.Tensor) -> torch.Tensor:
    """Sum in ascending value order: permutation-invariant to input order."""
    if values.numel() == 0:
        return values.sum()
    return torch.sort(values.reshape(-1)).values.sum()


def _layer_loss(probs: torch.Tensor, boxes: torch.Tensor,
                gt_classes: torch.Tensor, gt_boxes: torch.Tensor,
                w: LossWeights):
    """Matched loss of one prediction layer; returns (cls, l1, giou) terms."""
    n = gt_classes.numel()
    norm = max(n, 1)
    if n == 0:
        cls = w.train_cls * _sorted_sum(
            focal_loss(probs, torch.zeros_like(probs), w.focal_alpha, w.focal_gamma)) / norm
        zero = probs.sum() * 0.0
        return cls, zero, zero

    with torch.no_grad():
        cost = _cost_matrix_t(probs, boxes, gt_classes, gt_boxes, w)
    match = hungarian_match(cost.detach().cpu().numpy(), canonical=False)
    q_idx = torch.as_tensor([q for q, _ in match.assignment], dtype=torch.long)
    g_idx = torch.as_tensor([g for _, g in match.assignment], dtype=torch.long)

    target = torch.zeros_like(probs)
    target[q_idx, gt_classes[g_idx]] = 1.0
    cls = w.train_cls * _sorted_sum(
        focal_loss(probs, target, w.focal_alpha, w.focal_gamma)) / norm

    pb, gb = boxes[q_idx], gt_boxes[g_idx]
    l1 = w.train_box * w.box_l1 * _sorted_sum(torch.abs(gb - pb)) / norm
    gi = w.train_box * w.box_giou * _sorted_sum(
        1.0 - torch.diagonal(giou_matrix(gb, pb))) / norm
    return cls, l1, gi


def detection_loss(output, annotations: Sequence[CharAnnotation],
                   weights: LossWeights | None = None,
                   aux: bool = True, encoder: bool = True):
    """Total matched loss for one line plus a per-term breakdown.

    ``output`` carries per-layer sigmoid probabilities and cxcywh boxes
    (see model.LineOutput). The same matched loss is applied to the final
    layer and, when ``aux`` is set, to every auxiliary decoder layer. The
    encoder proposal head is supervised as a single-class detector when
    ``encoder`` is set. Classification and box terms are normalized by the
    number of ground-truth characters (or 1 when there are none).
    """
    w = weights or LossWeights()
    dev, dt = output.probs.device, output.probs.dtype
    if len(annotations) > 0:
        gt_cls = torch.as_tensor([a.symbol_index for a in annotations],
                                 dtype=torch.long, device=dev)
        gt_box = torch.as_tensor(np.stack([a.box.as_array() for a in annotations]),
                                 dtype=dt, device=dev)
    else:
        gt_cls = torch.zeros(0, dtype=torch.long, device=dev)
        gt_box = torch.zeros(0, 4, dtype=dt, device=dev)

    layers = [(output.probs, output.boxes)]
    if aux:
        layers += list(output.aux)
    if encoder and output.enc_scores is not None:
        layers.append((output.enc_scores[:, None], output.enc_boxes))

    cls_total = l1_total = giou_total = None
    for probs, boxes in layers:
        gcls = gt_cls if probs.shape[1] > 1 else torch.zeros_like(gt_cls)
        c, l, g = _layer_loss(probs, boxes, gcls, gt_box, w)
        cls_total = c if cls_total is None else cls_total + c
        l1_total = l if l1_total is None else l1_total + l
        giou_total = g if giou_total is None else giou_total + g

    total = cls_total + l1_total + giou_total
    breakdown = {
        "total": float(total.detach()),
        "cls": float(cls_total.detach()),
        "l1": float(l1_total.detach()),
        "giou": float(giou_total.detach()),
        "n_gt": len(annotations),
    }
    return total, breakdown
