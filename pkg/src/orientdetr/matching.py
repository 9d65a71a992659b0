"""One-to-one set matching and the detection loss."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .boxcoder import angle_residual, angle_residual_array
from .geom import OrientedBox, canonicalize, canonicalize_array, rotated_iou, rotated_iou_matrix, rotated_iou_tensor

LOG_CLAMP = 1e-12


@dataclass
class MatchCostConfig:
    """Weights and on/off switches for the matching cost and the loss terms."""

    lambda_cls: float = 5.0
    lambda_l1: float = 5.0
    lambda_riou: float = 8.0
    use_cls: bool = True
    use_l1: bool = True
    use_riou: bool = True
    focal_cost: bool = False
    alpha: float = 0.25
    gamma: float = 2.0

    def __post_init__(self):
        for name in ("lambda_cls", "lambda_l1", "lambda_riou"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative, got {getattr(self, name)}")

    @property
    def weights(self):
        """Matching-cost weights with switched-off terms zeroed."""
        return (
            self.lambda_cls if self.use_cls else 0.0,
            self.lambda_l1 if self.use_l1 else 0.0,
            self.lambda_riou if self.use_riou else 0.0,
        )

    @property
    def loss_weights(self):
        """Loss weights; only the rotated-IoU switch removes a loss term."""
        return self.lambda_cls, self.lambda_l1, self.lambda_riou if self.use_riou else 0.0


@dataclass
class Assignment:
    """Matched index pairs and their summed cost.

    For :func:`hungarian` pairs are (row, column); for :func:`match` they are
    (prediction, ground truth).
    """

    pairs: list = field(default_factory=list)
    cost: float = 0.0

    @property
    def rows(self):
        return np.array([p[0] for p in self.pairs], dtype=np.int64)

    @property
    def cols(self):
        return np.array([p[1] for p in self.pairs], dtype=np.int64)

    def __len__(self):
        return len(self.pairs)


# -- Hungarian -----------------------------------------------------------------
def hungarian(cost) -> Assignment:
    """Minimum-cost injection of rows into columns (n <= m).

    Shortest augmenting paths with row/column potentials; O(n^2 m).
    """
    cost = np.asarray(cost, dtype=np.float64)
    if cost.ndim != 2:
        raise ValueError(f"cost matrix must be 2-D, got shape {cost.shape}")
    n, m = cost.shape
    if n > m:
        raise ValueError(
            f"cost matrix has more rows ({n}) than columns ({m}); pad the columns, not the rows"
        )
    if not np.all(np.isfinite(cost)):
        raise ValueError("cost matrix must be finite")
    if n == 0:
        return Assignment([], 0.0)

    u = np.zeros(n + 1)
    v = np.zeros(m + 1)
    owner = np.zeros(m + 1, dtype=np.int64)  # row (1-based) holding each column
    way = np.zeros(m + 1, dtype=np.int64)
    for i in range(1, n + 1):
        owner[0] = i
        j0 = 0
        minv = np.full(m + 1, np.inf)
        used = np.zeros(m + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = owner[j0]
            free = ~used[1:]
            reduced = cost[i0 - 1] - u[i0] - v[1:]
            better = free & (reduced < minv[1:])
            minv[1:][better] = reduced[better]
            way[1:][better] = j0
            candidates = np.where(free, minv[1:], np.inf)
            j1 = int(np.argmin(candidates)) + 1
            delta = candidates[j1 - 1]
            u[owner[used]] += delta
            v[used] -= delta
            minv[1:][free] -= delta
            j0 = j1
            if owner[j0] == 0:
                break
        while j0:
            j1 = way[j0]
            owner[j0] = owner[j1]
            j0 = j1

    col_of_row = np.empty(n, dtype=np.int64)
    for j in range(1, m + 1):
        if owner[j]:
            col_of_row[owner[j] - 1] = j - 1
    pairs = [(r, int(col_of_row[r])) for r in range(n)]
    total = 0.0
    for r, c in pairs:
        total += cost[r, c]
    return Assignment(pairs, total)


# -- matching cost -----------------------------------------------------------------
def smooth_l1(diff, beta=1.0):
    a = np.abs(diff)
    return np.where(a < beta, 0.5 * a * a / beta, a - 0.5 * beta)


def _cls_cost(prob, cfg):
    prob = np.asarray(prob, dtype=np.float64)
    if cfg.focal_cost:
        pos = cfg.alpha * (1 - prob) ** cfg.gamma * -np.log(np.clip(prob, LOG_CLAMP, None))
        neg = (1 - cfg.alpha) * prob**cfg.gamma * -np.log(np.clip(1 - prob, LOG_CLAMP, None))
        return pos - neg
    return -np.log(np.clip(prob, LOG_CLAMP, None))


def match_cost(pred_probs, pred_box, gt_class, gt_box, cfg=None) -> float:
    """Pairwise cost between one prediction and one ground-truth object."""
    cfg = cfg or MatchCostConfig()
    w_cls, w_l1, w_riou = cfg.weights
    gt_b = canonicalize(gt_box)
    pr_b = canonicalize(pred_box)
    prob = float(np.asarray(pred_probs, dtype=np.float64)[int(gt_class)])
    cost = 0.0
    if w_cls:
        cost += w_cls * float(_cls_cost(prob, cfg))
    if w_l1:
        diff = angle_residual_array(gt_b.to_array(), pr_b.to_array())
        cost += w_l1 * float(smooth_l1(diff).mean())
    if w_riou:
        cost += w_riou * (1.0 - rotated_iou(gt_b, pr_b))
    return cost


def cost_matrix(pred_probs, pred_boxes, gt_classes, gt_boxes, cfg=None):
    """(G, Q) matching costs between G ground truths and Q predictions."""
    cfg = cfg or MatchCostConfig()
    w_cls, w_l1, w_riou = cfg.weights
    pred_probs = np.asarray(pred_probs, dtype=np.float64)
    pred_boxes = canonicalize_array(np.asarray(pred_boxes, dtype=np.float64).reshape(-1, 5))
    gt_boxes = canonicalize_array(np.asarray(gt_boxes, dtype=np.float64).reshape(-1, 5))
    gt_classes = np.asarray(gt_classes, dtype=np.int64)
    g, q = len(gt_boxes), len(pred_boxes)
    cost = np.zeros((g, q))
    if g == 0:
        return cost
    if w_cls:
        cost += w_cls * _cls_cost(pred_probs[:, gt_classes].T, cfg)
    if w_l1:
        diff = angle_residual_array(gt_boxes[:, None, :], pred_boxes[None, :, :])
        cost += w_l1 * smooth_l1(diff).mean(axis=-1)
    if w_riou:
        cost += w_riou * (1.0 - rotated_iou_matrix(gt_boxes, pred_boxes))
    return cost


def match(pred_probs, pred_boxes, gt_classes, gt_boxes, cfg=None) -> Assignment:
    """Hungarian assignment of ground truths to predictions; pairs are (pred, gt)."""
    cost = cost_matrix(pred_probs, pred_boxes, gt_classes, gt_boxes, cfg)
    if cost.shape[0] > cost.shape[1]:
        raise ValueError(
            f"{cost.shape[0]} objects but only {cost.shape[1]} predictions; "
            "the query count must be at least the object count"
        )
    result = hungarian(cost)
    return Assignment(sorted((c, r) for r, c in result.pairs), result.cost)


# -- loss ---------------------------------------------------------------------------
def sigmoid_focal_loss(logits, targets, alpha=0.25, gamma=2.0):
    """Elementwise focal loss on sigmoid probabilities; ``targets`` is constant 0/1."""
    logits = T.as_tensor(logits)
    t = np.asarray(targets, dtype=np.float64)
    p = T.sigmoid(logits)
    # -log p = softplus(-x), -log(1-p) = softplus(x)
    ce = T.softplus(-logits) * t + T.softplus(logits) * (1.0 - t)
    p_t = p * t + (1.0 - p) * (1.0 - t)
    alpha_t = alpha * t + (1.0 - alpha) * (1.0 - t)
    return ce * ((1.0 - p_t) ** gamma) * alpha_t


@dataclass
class LossTerms:
    cls: T.Tensor
    l1: T.Tensor
    riou: T.Tensor
    total: T.Tensor

    def values(self):
        return {k: float(getattr(self, k).data) for k in ("cls", "l1", "riou", "total")}


def set_loss(logits, boxes, targets, assignments, cfg=None, num_boxes=None) -> LossTerms:
    """Focal classification over all queries plus L1 and 1 - IoU on matched pairs.

    logits: (B, Q, C) tensor; boxes: (B, Q, 5) tensor; targets: list of
    (classes (G,), boxes (G, 5)); assignments: list of :class:`Assignment`
    with (pred, gt) pairs. Every term is divided by the object count.
    """
    cfg = cfg or MatchCostConfig()
    logits, boxes = T.as_tensor(logits), T.as_tensor(boxes)
    b, q, c = logits.shape
    if len(targets) != b or len(assignments) != b:
        raise ValueError(f"need {b} targets and assignments, got {len(targets)} and {len(assignments)}")
    if num_boxes is None:
        num_boxes = sum(len(t[0]) for t in targets)
    norm = 1.0 / max(float(num_boxes), 1.0)
    w_cls, w_l1, w_riou = cfg.loss_weights

    onehot = np.zeros((b, q, c))
    bi, qi, gt_boxes = [], [], []
    for i, ((classes, gboxes), asg) in enumerate(zip(targets, assignments)):
        classes = np.asarray(classes, dtype=np.int64)
        gboxes = np.asarray(gboxes, dtype=np.float64).reshape(-1, 5)
        for pred, gt in asg.pairs:
            onehot[i, pred, classes[gt]] = 1.0
            bi.append(i)
            qi.append(pred)
            gt_boxes.append(gboxes[gt])
    cls = sigmoid_focal_loss(logits, onehot, cfg.alpha, cfg.gamma).sum() * norm

    if bi:
        matched = boxes[np.array(bi), np.array(qi)]
        gt = np.array(gt_boxes)
        l1 = T.absolute(angle_residual(matched, gt)).sum() * norm
        riou = (1.0 - rotated_iou_tensor(matched, gt)).sum() * norm
    else:
        l1 = T.Tensor(0.0)
        riou = T.Tensor(0.0)
    total = cls * w_cls + l1 * w_l1 + riou * w_riou
    return LossTerms(cls, l1, riou, total)


__all__ = [
    "Assignment",
    "LossTerms",
    "MatchCostConfig",
    "OrientedBox",
    "cost_matrix",
    "hungarian",
    "match",
    "match_cost",
    "set_loss",
    "sigmoid_focal_loss",
    "smooth_l1",
]
