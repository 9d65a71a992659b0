"""Box updates in logit space, shared by proposal generation and the decoder."""

from __future__ import annotations

import numpy as np

from . import tensor as T

HALF_PI = 0.5 * np.pi


def canonicalize_tensor(boxes):
    """Differentiable long-side canonicalisation of (..., 5) boxes.

    Swapping sides is a permutation and the angle shift is a constant, so
    gradients pass straight through.
    """
    b = T.as_tensor(boxes)
    cxcy = b[..., 0:2]
    w, h, t = b[..., 2:3], b[..., 3:4], b[..., 4:5]
    swap = w.data > h.data
    w2 = T.where(swap, h, w)
    h2 = T.where(swap, w, h)
    t2 = t + np.where(swap, HALF_PI, 0.0)
    period = np.where(w2.data == h2.data, HALF_PI, np.pi)
    t2 = T.wrap_angle(t2, period=period, low=0.0)
    return T.concat([cxcy, w2, h2, t2], axis=-1)


def refine_boxes(reference, delta):
    """Apply predicted deltas to reference boxes.

    Center and size move in logit space, ``sigmoid(logit(ref) + d)``, which
    keeps them inside (0, 1); the angle moves additively. The result is
    canonicalised.
    """
    ref = T.as_tensor(reference)
    delta = T.as_tensor(delta)
    if ref.shape[-1] != 5 or delta.shape[-1] != 5:
        raise T.DimensionError(f"refine_boxes: expected (..., 5), got {ref.shape} and {delta.shape}")
    xywh = T.sigmoid(T.inverse_sigmoid(ref[..., 0:4]) + delta[..., 0:4])
    theta = ref[..., 4:5] + delta[..., 4:5]
    return canonicalize_tensor(T.concat([xywh, theta], axis=-1))


def angle_residual(pred, target):
    """``pred - target`` with the angle component wrapped into [-pi/2, pi/2)."""
    diff = T.as_tensor(pred) - T.as_tensor(target)
    return T.concat([diff[..., 0:4], T.wrap_angle(diff[..., 4:5])], axis=-1)


def angle_residual_array(pred, target):
    diff = np.asarray(pred, dtype=np.float64) - np.asarray(target, dtype=np.float64)
    diff = diff.copy()
    diff[..., 4] = np.mod(diff[..., 4] + HALF_PI, np.pi) - HALF_PI
    return diff
