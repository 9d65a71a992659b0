"""Scikit-learn style wrapper around the detector."""

from __future__ import annotations

import inspect

import numpy as np
from sklearn.base import BaseEstimator

from .config import Config
from .data import Scene
from .evaluation import evaluate_detections
from .training import load_checkpoint, predict_scenes, save_checkpoint, train
from .validation import check_annotations, check_images, check_is_fitted


class OrientedDetector(BaseEstimator):
    """Oriented object detector with fit / predict / score.

    Parameters mirror :class:`Config`. ``X`` is an image batch (B, H, W, 3)
    and ``y`` a list of (classes, boxes) pairs with boxes as
    (cx, cy, w, h, theta) in normalised coordinates.
    """

    def __init__(self, num_classes=3, channels=32, heads=2, points=4, enc_layers=2, dec_layers=2,
                 ffn_ratio=4, queries=50, opg=True, opr=True, ibr=True, angle_branch=False,
                 cls_cost=True, l1_cost=True, riou_cost=True, focal_cost=False, enc_loss=True, enc_match_k=1,
                 lambda_cls=5.0, lambda_l1=5.0, lambda_riou=8.0, lr=1e-4, lr_drop_fraction=0.2, warmup_steps=0,
                 weight_decay=1e-4, grad_clip=0.1, steps=1000, batch_size=4, seed=0, augment=True,
                 score_floor=0.05, time_limit=0.0):
        self.num_classes = num_classes
        self.channels = channels
        self.heads = heads
        self.points = points
        self.enc_layers = enc_layers
        self.dec_layers = dec_layers
        self.ffn_ratio = ffn_ratio
        self.queries = queries
        self.opg = opg
        self.opr = opr
        self.ibr = ibr
        self.angle_branch = angle_branch
        self.cls_cost = cls_cost
        self.l1_cost = l1_cost
        self.riou_cost = riou_cost
        self.focal_cost = focal_cost
        self.enc_loss = enc_loss
        self.enc_match_k = enc_match_k
        self.lambda_cls = lambda_cls
        self.lambda_l1 = lambda_l1
        self.lambda_riou = lambda_riou
        self.lr = lr
        self.lr_drop_fraction = lr_drop_fraction
        self.warmup_steps = warmup_steps
        self.weight_decay = weight_decay
        self.grad_clip = grad_clip
        self.steps = steps
        self.batch_size = batch_size
        self.seed = seed
        self.augment = augment
        self.score_floor = score_floor
        self.time_limit = time_limit

    def make_config(self, image_size=128) -> Config:
        names = inspect.signature(type(self).__init__).parameters
        values = {k: getattr(self, k) for k in names if k != "self"}
        return Config(image_size=image_size, **values)

    @classmethod
    def from_config(cls, cfg: Config):
        names = inspect.signature(cls.__init__).parameters
        return cls(**{k: getattr(cfg, k) for k in names if k != "self"})

    def fit(self, X, y, verbose=False):
        X = check_images(X)
        y = check_annotations(y, len(X), self.num_classes)
        cfg = self.make_config(X.shape[1])
        scenes = [Scene(img, boxes, classes) for img, (classes, boxes) in zip(X, y)]
        result = train(cfg, scenes, None, log=print if verbose else None, write_files=False)
        self.model_ = result.model
        self.n_steps_ = result.steps_done
        self.loss_history_ = result.history
        return self

    def predict(self, X):
        """Per-image (k, 7) arrays: class, score, cx, cy, w, h, theta, best first."""
        check_is_fitted(self)
        X = check_images(X)
        return predict_scenes(self.model_, list(X), score_floor=self.score_floor)

    def score(self, X, y, iou_thresh=0.5):
        """Rotated mAP at ``iou_thresh``."""
        X = check_images(X)
        y = check_annotations(y, len(X), self.num_classes)
        return evaluate_detections(self.predict(X), y, self.num_classes, iou_thresh).map

    def save(self, path):
        check_is_fitted(self)
        save_checkpoint(path, self.model_, None, getattr(self, "n_steps_", 0))

    @classmethod
    def load(cls, path):
        model, _, step = load_checkpoint(path)
        est = cls.from_config(model.cfg)
        est.model_ = model
        est.n_steps_ = step
        return est

    def __sklearn_is_fitted__(self):
        return getattr(self, "model_", None) is not None


def detections_to_boxes(dets):
    """Split (k, 7) detections into classes, scores and boxes."""
    dets = np.asarray(dets).reshape(-1, 7)
    return dets[:, 0].astype(np.int64), dets[:, 1], dets[:, 2:]
