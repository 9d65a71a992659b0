"""Input checks shared by the estimator and the CLI."""

from __future__ import annotations

import numpy as np
from sklearn.exceptions import NotFittedError


def check_images(images, divisor=64):
    """Return a float64 (B, H, W, 3) batch; a single (H, W, 3) image is promoted."""
    arr = np.asarray(images, dtype=np.float64)
    if arr.ndim == 3:
        arr = arr[None]
    if arr.ndim != 4 or arr.shape[-1] != 3:
        raise ValueError(f"expected images of shape (B, H, W, 3), got {arr.shape}")
    if arr.shape[1] % divisor or arr.shape[2] % divisor:
        raise ValueError(f"image size {arr.shape[1]}x{arr.shape[2]} must be divisible by {divisor}")
    if not np.all(np.isfinite(arr)):
        raise ValueError("images contain NaN or infinite values")
    return arr


def check_annotations(targets, n_images, num_classes):
    """Return a list of (classes int64 (G,), boxes float64 (G, 5)) per image."""
    if len(targets) != n_images:
        raise ValueError(f"{len(targets)} annotation sets for {n_images} images")
    out = []
    for i, t in enumerate(targets):
        try:
            classes, boxes = t
        except (TypeError, ValueError):
            raise ValueError(f"annotation {i}: expected a (classes, boxes) pair") from None
        classes = np.asarray(classes, dtype=np.int64).reshape(-1)
        boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 5)
        if len(classes) != len(boxes):
            raise ValueError(f"annotation {i}: {len(classes)} classes but {len(boxes)} boxes")
        if len(classes) and (classes.min() < 0 or classes.max() >= num_classes):
            raise ValueError(f"annotation {i}: class ids must lie in [0, {num_classes})")
        if not np.all(np.isfinite(boxes)) or np.any(boxes[:, 2:4] <= 0):
            raise ValueError(f"annotation {i}: boxes need finite values and positive sides")
        out.append((classes, boxes))
    return out


def check_is_fitted(estimator, attribute="model_"):
    if getattr(estimator, attribute, None) is None:
        raise NotFittedError(
            f"this {type(estimator).__name__} is not fitted yet; call fit or load first"
        )
