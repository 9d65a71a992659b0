"""Training loop, evaluation driver and checkpoints."""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import checkpoint
from .boxcoder import HALF_PI
from .config import Config, format_config, parse_config
from .data import load_dataset
from .evaluation import EmptyDatasetError, EvalReport, evaluate_detections
from .geom import canonicalize_array
from .model import Detector, detection_loss, postprocess
from .nn import AdamW
from .tensor import no_grad

CONFIG_KEY = "meta.config"
STEP_KEY = "meta.step"


class TrainingError(RuntimeError):
    pass


# -- checkpoints -------------------------------------------------------------------
def _encode_text(text):
    return np.frombuffer(text.encode("utf-8"), dtype=np.uint8).astype(np.float64)


def _decode_text(arr):
    return np.asarray(arr).astype(np.uint8).tobytes().decode("utf-8")


def save_checkpoint(path, model: Detector, optimizer: AdamW = None, step=0):
    tensors = {f"model.{k}": v for k, v in model.state_dict().items()}
    if optimizer is not None:
        tensors.update({f"optim.{k}": v for k, v in optimizer.state_dict().items()})
    tensors[CONFIG_KEY] = _encode_text(format_config(model.cfg))
    tensors[STEP_KEY] = np.array(float(step))
    checkpoint.save(path, tensors)


def load_checkpoint(path):
    """Returns (model, optimizer state or None, step)."""
    tensors = checkpoint.load(path)
    if CONFIG_KEY not in tensors:
        raise checkpoint.CheckpointError(f"{path}: no embedded config")
    cfg = parse_config(_decode_text(tensors[CONFIG_KEY]))
    model = Detector(cfg)
    model.load_state_dict({k[6:]: v for k, v in tensors.items() if k.startswith("model.")})
    optim = {k[6:]: v for k, v in tensors.items() if k.startswith("optim.")} or None
    return model, optim, int(tensors.get(STEP_KEY, 0))


def make_optimizer(model: Detector, cfg: Config):
    return AdamW(model.named_parameters(), lr=cfg.lr, weight_decay=cfg.weight_decay,
                 max_grad_norm=cfg.grad_clip if cfg.grad_clip > 0 else None)


# -- data ------------------------------------------------------------------------
def split_scenes(scenes, val_count):
    """Last ``val_count`` scenes are held out."""
    if val_count >= len(scenes):
        raise ValueError(f"val_count {val_count} leaves no training scenes out of {len(scenes)}")
    cut = len(scenes) - val_count
    return scenes[:cut], scenes[cut:]


def dihedral(image, boxes, k):
    """Apply the k-th (0..7) symmetry of the square to an image and its boxes."""
    image = np.asarray(image)
    boxes = np.array(boxes, dtype=np.float64).reshape(-1, 5)
    if k & 1:  # mirror left-right
        image = image[:, ::-1]
        boxes[:, 0] = 1.0 - boxes[:, 0]
        boxes[:, 4] = -boxes[:, 4]
    if k & 2:  # mirror top-bottom
        image = image[::-1]
        boxes[:, 1] = 1.0 - boxes[:, 1]
        boxes[:, 4] = -boxes[:, 4]
    if k & 4:  # transpose
        image = image.transpose(1, 0, 2)
        boxes[:, [0, 1]] = boxes[:, [1, 0]]
        boxes[:, 4] = HALF_PI - boxes[:, 4]
    return np.ascontiguousarray(image), canonicalize_array(boxes)


def make_batch(scenes, step, cfg: Config):
    """Deterministic batch for ``step``: depends only on (seed, step)."""
    rng = np.random.default_rng([cfg.seed, step])
    idx = rng.choice(len(scenes), size=min(cfg.batch_size, len(scenes)), replace=False)
    flips = rng.integers(0, 8, size=len(idx)) if cfg.augment else np.zeros(len(idx), dtype=int)
    images, targets = [], []
    for i, k in zip(idx, flips):
        image, boxes = dihedral(scenes[i].image, scenes[i].boxes, int(k))
        images.append(image)
        targets.append((scenes[i].classes.copy(), boxes))
    return np.stack(images), targets


def learning_rate(cfg: Config, step):
    """Base rate after a linear warmup, dropped tenfold for the final
    ``lr_drop_fraction`` of steps."""
    drop_at = int(round(cfg.steps * (1.0 - cfg.lr_drop_fraction)))
    if step >= drop_at:
        return cfg.lr * 0.1
    if step < cfg.warmup_steps:
        return cfg.lr * (step + 1) / cfg.warmup_steps
    return cfg.lr


# -- evaluation ------------------------------------------------------------------
def predict_scenes(model: Detector, images, batch_size=8, score_floor=0.05):
    dets = []
    with no_grad():
        for start in range(0, len(images), batch_size):
            batch = np.stack(images[start : start + batch_size])
            dets.extend(postprocess(model(batch), score_floor))
    return dets


def evaluate(model: Detector, scenes, iou_thresh=0.5, score_floor=None, batch_size=8) -> EvalReport:
    if len(scenes) == 0:
        raise EmptyDatasetError("cannot evaluate on an empty dataset")
    floor = model.cfg.score_floor if score_floor is None else score_floor
    dets = predict_scenes(model, [s.image for s in scenes], batch_size, floor)
    return evaluate_detections(dets, [s.target for s in scenes], model.cfg.num_classes, iou_thresh)


# -- training ----------------------------------------------------------------------
@dataclass
class TrainResult:
    model: Detector
    optimizer: AdamW
    steps_done: int
    history: list = field(default_factory=list)  # dicts of loss components per step
    report: EvalReport = None
    elapsed: float = 0.0


def format_log_line(step, losses, map_value=None):
    line = f"{step} {losses['cls']:.6f} {losses['l1']:.6f} {losses['riou']:.6f} {losses['total']:.6f}"
    if map_value is not None:
        line += f" {map_value:.6f}"
    return line


def _dump_inputs(out, step, images, targets):
    path = Path(out) / f"nan_step_{step}.npz"
    path.parent.mkdir(parents=True, exist_ok=True)
    arrays = {"images": images}
    for i, (cls, boxes) in enumerate(targets):
        arrays[f"classes_{i}"] = cls
        arrays[f"boxes_{i}"] = boxes
    np.savez(path, **arrays)
    return path


def train_step(model, optimizer, images, targets, cfg, lr):
    output = model(images)
    total, losses = detection_loss(output, targets, cfg)
    if not np.isfinite(losses["total"]):
        return losses, False
    optimizer.zero_grad()
    total.backward()
    optimizer.step(lr)
    return losses, True


def train(cfg: Config, scenes=None, val_scenes=None, resume=None, log=print, write_files=True) -> TrainResult:
    """Train a detector.

    Scenes come from ``cfg.data`` unless given. With ``write_files`` the
    metrics log and checkpoints go under ``cfg.out``. ``resume`` is a
    checkpoint path to continue from.
    """
    start = time.perf_counter()
    if scenes is None:
        if not cfg.data:
            raise ValueError("config has no data directory")
        scenes, val_scenes = split_scenes(load_dataset(cfg.data), cfg.val_count)
    if not scenes:
        raise EmptyDatasetError("no training scenes")

    first = 0
    if resume is not None:
        model, optim_state, first = load_checkpoint(resume)
        model.cfg = cfg
        optimizer = make_optimizer(model, cfg)
        if optim_state is not None:
            optimizer.load_state_dict(optim_state)
    else:
        model = Detector(cfg)
        optimizer = make_optimizer(model, cfg)

    out = Path(cfg.out)
    metrics = None
    if write_files:
        out.mkdir(parents=True, exist_ok=True)
        metrics = open(out / "metrics.log", "a", encoding="utf-8")

    history = []
    report = None
    step = first
    try:
        for step in range(first, cfg.steps):
            if cfg.time_limit and time.perf_counter() - start > cfg.time_limit:
                log(f"time limit reached after {step} steps")
                break
            images, targets = make_batch(scenes, step, cfg)
            losses, ok = train_step(model, optimizer, images, targets, cfg, learning_rate(cfg, step))
            if not ok:
                dumped = _dump_inputs(out, step, images, targets)
                raise TrainingError(f"non-finite loss at step {step}; inputs written to {dumped}")
            history.append(losses)
            map_value = None
            last = step == cfg.steps - 1
            if val_scenes and cfg.eval_every and ((step + 1) % cfg.eval_every == 0 or last):
                report = evaluate(model, val_scenes)
                map_value = report.map
            line = format_log_line(step, losses, map_value)
            if metrics:
                metrics.write(line + "\n")
                metrics.flush()
            if log and (step % 50 == 0 or map_value is not None):
                log(line)
            if write_files and cfg.checkpoint_every and (step + 1) % cfg.checkpoint_every == 0:
                save_checkpoint(out / "checkpoint.ao2c", model, optimizer, step + 1)
        else:
            step = cfg.steps
    finally:
        if metrics:
            metrics.close()
    if write_files:
        save_checkpoint(out / "checkpoint.ao2c", model, optimizer, step)
    return TrainResult(model, optimizer, step, history, report, time.perf_counter() - start)
