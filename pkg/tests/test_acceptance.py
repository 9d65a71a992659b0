"""Acceptance suite: one test per headline criterion.

Each test records a PASS/FAIL line, printed in the pytest terminal summary.
Run alone with ``pytest tests/test_acceptance.py -v``; the end-to-end
training test dominates the runtime (two runs of roughly ten minutes).
"""

import itertools
import math
import time

import numpy as np
import pytest
from threadpoolctl import threadpool_limits

from orientdetr import tensor as T
from orientdetr.attention import Decoder, deform_attn_core
from orientdetr.backbone import level_geometry
from orientdetr.boxcoder import canonicalize_tensor, refine_boxes
from orientdetr.config import Config
from orientdetr.data import gen_dataset, load_dataset
from orientdetr.geom import canonicalize_array, rotated_iou, rotated_iou_tensor
from orientdetr.matching import MatchCostConfig, cost_matrix, hungarian, match, set_loss, sigmoid_focal_loss
from orientdetr.model import Detector
from orientdetr.proposals import ReceptiveBlock, initial_boxes, opr_align
from orientdetr.tensor import no_grad
from orientdetr.training import evaluate, load_checkpoint, save_checkpoint, split_scenes, train

from conftest import ACCEPTANCE
from gradcheck import check_gradients
from test_attention import random_case, reference_attention
from test_tensor import BINARY, UNARY


def record(name, ok, detail):
    ACCEPTANCE[name] = (bool(ok), detail)
    print(f"{'PASS' if ok else 'FAIL'}  {name}: {detail}")
    return ok


# -- geometry ----------------------------------------------------------------------
def corners(box):
    cx, cy, w, h, t = box
    u = np.array([math.cos(t), math.sin(t)])
    v = np.array([-math.sin(t), math.cos(t)])
    return np.array([[cx, cy] + su * w / 2 * u + sv * h / 2 * v for su in (-1, 1) for sv in (-1, 1)])


def inside(box, x, y):
    cx, cy, w, h, t = box
    c, s = math.cos(t), math.sin(t)
    dx, dy = x - cx, y - cy
    return (np.abs(dx * c + dy * s) <= w / 2) & (np.abs(-dx * s + dy * c) <= h / 2)


def monte_carlo_iou(a, b, rng, n_side=1000):
    """IoU from n_side**2 jittered samples over the union's bounding box.

    One uniform point per grid cell: every sample is uniform on its cell and
    the set covers the box evenly, which keeps the count error far below
    plain i.i.d. sampling.
    """
    pts = np.concatenate([corners(a), corners(b)])
    (x0, y0), (x1, y1) = pts.min(0), pts.max(0)
    cells = np.arange(n_side)
    gx = x0 + (cells[None, :] + rng.random((n_side, n_side))) * (x1 - x0) / n_side
    gy = y0 + (cells[:, None] + rng.random((n_side, n_side))) * (y1 - y0) / n_side
    in_a, in_b = inside(a, gx, gy), inside(b, gx, gy)
    union = np.count_nonzero(in_a | in_b)
    return np.count_nonzero(in_a & in_b) / union


def random_pair(rng):
    a = canonicalize_array(np.array([*rng.uniform(0.3, 0.7, 2), *rng.uniform(0.05, 0.4, 2), rng.uniform(0, math.pi)]))
    offset = rng.uniform(-0.2, 0.2, 2)
    b = canonicalize_array(np.array([*(a[:2] + offset), *rng.uniform(0.05, 0.4, 2), rng.uniform(0, math.pi)]))
    return a, b


def test_geometry_oracle():
    start = time.perf_counter()
    rng = np.random.default_rng(2024)
    worst, overlapping = 0.0, 0
    for _ in range(1000):
        a, b = random_pair(rng)
        exact = rotated_iou(a, b)
        overlapping += exact > 0
        worst = max(worst, abs(exact - monte_carlo_iou(a, b, rng)))
    square = rotated_iou([0.5, 0.5, 1.0, 1.0, 0.0], [0.5, 0.5, 1.0, 1.0, math.pi / 4])
    square_err = abs(square - 1 / math.sqrt(2))
    elapsed = time.perf_counter() - start
    ok = worst <= 2e-3 and square_err <= 1e-9 and elapsed < 120
    record("geometry oracle", ok, f"max |IoU - MC| = {worst:.2e} over 1000 pairs ({overlapping} overlapping), "
           f"45-degree square error {square_err:.1e}, {elapsed:.0f}s")
    assert ok


# -- Hungarian -----------------------------------------------------------------------
def test_hungarian_oracle():
    start = time.perf_counter()
    rng = np.random.default_rng(7)
    mismatches = 0
    for n in range(2, 8):
        perms = np.array(list(itertools.permutations(range(n))))
        rows = np.arange(n)
        for _ in range(200):
            cost = rng.random((n, n))
            best = perms[np.argmin(cost[rows, perms].sum(axis=1))]
            brute = sum(cost[r, c] for r, c in zip(rows, best))
            res = hungarian(cost)
            found = sum(cost[r, c] for r, c in res.pairs)
            mismatches += found != brute
    elapsed = time.perf_counter() - start
    ok = mismatches == 0 and elapsed < 60
    record("hungarian oracle", ok, f"{mismatches} of 1200 matrices differ from exhaustive search, {elapsed:.1f}s")
    assert ok


# -- deformable attention -------------------------------------------------------------
def test_deformable_attention_oracle():
    start = time.perf_counter()
    worst = 0.0
    for seed in range(50):
        attn, query, refs, value, shapes = random_case(seed)
        starts, _ = level_geometry(shapes)
        fast = attn(query, refs, T.Tensor(value), shapes, starts).data
        worst = max(worst, float(np.max(np.abs(fast - reference_attention(attn, query, refs, value, shapes)))))
    elapsed = time.perf_counter() - start
    ok = worst <= 1e-10 and elapsed < 60
    record("deformable attention oracle", ok, f"max deviation {worst:.1e} over 50 configurations, {elapsed:.1f}s")
    assert ok


# -- gradients -------------------------------------------------------------------------
def gradient_cases():
    rng = np.random.default_rng(11)

    def off_grid(pts):
        return np.where(np.abs(pts - np.round(pts)) < 0.05, pts + 0.1, pts)

    cases = {f"tensor.{k}": (fn, (rng.normal(size=(3, 4)), rng.normal(size=(3, 4)))) for k, fn in BINARY.items()}
    cases.update({f"tensor.{k}": (fn, (x,)) for k, (fn, x) in UNARY.items()})
    cases["tensor.linear"] = (T.linear, (rng.normal(size=(2, 3, 4)), rng.normal(size=(4, 5)), rng.normal(size=5)))
    cases["tensor.layer_norm"] = (T.layer_norm, (rng.normal(size=(2, 3, 6)), rng.normal(size=6), rng.normal(size=6)))
    cases["tensor.conv2d"] = (lambda x, w, b: T.conv2d(x, w, b, stride=2, padding=1),
                              (rng.normal(size=(1, 6, 6, 3)), rng.normal(size=(3, 3, 3, 4)), rng.normal(size=4)))
    cases["tensor.bilinear_sample"] = (T.bilinear_sample,
                                       (rng.normal(size=(2, 4, 5, 3)), off_grid(rng.uniform(-1.5, 5.5, (2, 6, 2)))))
    a = np.array([[0.5, 0.5, 0.3, 0.2, 0.3], [0.4, 0.5, 0.2, 0.4, 1.2], [0.5, 0.5, 0.2, 0.2, 0.0]])
    b = np.array([[0.55, 0.48, 0.25, 0.3, 0.9], [0.45, 0.52, 0.3, 0.3, 0.4], [0.6, 0.55, 0.3, 0.1, 0.7]])
    cases["geom.rotated_iou_tensor"] = (rotated_iou_tensor, (a, b))
    cases["boxcoder.canonicalize"] = (canonicalize_tensor, (np.array([[0.5, 0.4, 0.3, 0.1, 0.4], [0.3, 0.6, 0.1, 0.2, 4.0]]),))
    ref = np.array([[0.4, 0.5, 0.1, 0.3, 0.2], [0.6, 0.3, 0.2, 0.25, 2.9]])
    cases["boxcoder.refine_boxes"] = (refine_boxes, (ref, rng.normal(0, 0.3, (2, 5))))
    shapes = [(3, 4), (2, 2)]
    starts, n = level_geometry(shapes)
    cases["attention.core"] = (lambda v, l, w: deform_attn_core(v, shapes, starts, l, w),
                               (rng.normal(size=(1, n, 2, 3)), off_grid(rng.uniform(-0.8, 3.8, (1, 3, 2, 2, 2, 2))),
                                rng.random((1, 3, 2, 2, 2))))
    attn, query, refs, value, ashapes = random_case(3)
    astarts, _ = level_geometry(ashapes)
    cases["attention.module"] = (lambda q, v: attn(q, refs, v, ashapes, astarts), (query, value))
    boxes = np.concatenate([rng.random((1, 12, 2)), rng.uniform(0.1, 0.4, (1, 12, 2)), rng.uniform(0, 3, (1, 12, 1))], -1)
    cases["proposals.opr_align"] = (lambda f: opr_align(f, boxes), (rng.normal(size=(1, 3, 4, 2)),))
    block = ReceptiveBlock(rng, 4)
    x = rng.normal(size=(1, 3, 8, 4))
    cases["proposals.receptive_block"] = (lambda v: block(v), (np.where(np.abs(x) < 1e-3, 0.1, x),))
    labels = (rng.random((2, 3)) > 0.5) * 1.0
    cases["matching.focal_loss"] = (lambda lg: sigmoid_focal_loss(lg, labels),
                                    (rng.normal(size=(2, 3)),))
    return cases


def composed_loss_case():
    from orientdetr.matching import Assignment

    rng = np.random.default_rng(4)
    logits = rng.normal(size=(2, 4, 3))
    boxes = np.array([
        [[0.5, 0.5, 0.2, 0.3, 0.4], [0.3, 0.3, 0.1, 0.2, 1.0], [0.7, 0.4, 0.1, 0.3, 2.0], [0.2, 0.7, 0.1, 0.1, 0.2]],
        [[0.4, 0.6, 0.2, 0.2, 0.1], [0.6, 0.4, 0.1, 0.3, 0.6], [0.5, 0.5, 0.3, 0.3, 2.5], [0.3, 0.6, 0.2, 0.1, 1.5]],
    ])
    targets = [
        (np.array([0, 2]), np.array([[0.52, 0.48, 0.22, 0.28, 0.5], [0.72, 0.42, 0.12, 0.28, 1.9]])),
        (np.array([1]), np.array([[0.58, 0.42, 0.12, 0.3, 0.7]])),
    ]
    asg = [Assignment([(0, 0), (2, 1)]), Assignment([(1, 0)])]
    return (lambda lg, bx: set_loss(lg, bx, targets, asg).total), (logits, boxes)


def test_gradient_suite():
    start = time.perf_counter()
    errors = {name: check_gradients(fn, *args) for name, (fn, args) in gradient_cases().items()}
    fn, args = composed_loss_case()
    loss_err = check_gradients(fn, *args)
    elapsed = time.perf_counter() - start
    worst = max(errors, key=errors.get)
    ok = errors[worst] <= 1e-6 and loss_err <= 1e-4 and elapsed < 300
    record("gradient suite", ok, f"{len(errors)} ops, worst {worst} at {errors[worst]:.1e}; "
           f"set_loss {loss_err:.1e}; {elapsed:.0f}s")
    assert ok


# -- fixed points --------------------------------------------------------------------
def test_fixed_points():
    cfg = Config()
    model = Detector(cfg)
    images = np.random.default_rng(0).random((2, 128, 128, 3))
    with no_grad():
        out = model(images)
    shapes = [(16, 16), (8, 8), (4, 4), (2, 2)]
    init = initial_boxes(shapes)
    opg_err = max(float(np.max(np.abs(p.boxes.data - init))) for p in out.proposals)
    dec_err = max(float(np.max(np.abs(layer.boxes.data - out.query_boxes))) for layer in out.layers)

    # standalone decoder with random queries and references
    rng = np.random.default_rng(1)
    from orientdetr.attention import make_level_embed, make_tokens
    from orientdetr.backbone import FeaturePyramid

    feats = FeaturePyramid([T.Tensor(rng.normal(size=(1, h, w, 8))) for h, w in [(4, 4), (2, 2)]])
    seq = make_tokens(feats, make_level_embed(rng, 2, 8))
    refs = canonicalize_array(np.column_stack([rng.random((20, 2)), rng.uniform(0.02, 0.5, (20, 2)),
                                               rng.uniform(0, math.pi, 20)]))[None]
    dec = Decoder(rng, 8, 2, 2, 2, 16, 3, num_classes=3)
    with no_grad():
        layers = dec(T.Tensor(rng.normal(size=(1, 20, 8))), rng.normal(size=(1, 20, 8)), refs, seq)
    dec_err = max(dec_err, max(float(np.max(np.abs(layer.boxes.data - refs))) for layer in layers))
    ok = opg_err <= 1e-12 and dec_err <= 1e-12
    record("fixed points", ok, f"zero-delta proposals deviate {opg_err:.1e}, zero-delta decoder {dec_err:.1e}")
    assert ok


# -- synthetic end-to-end -------------------------------------------------------------
E2E = dict(lr=1e-3, warmup_steps=100, enc_match_k=4, steps=1500, eval_every=0, time_limit=1700.0)


def train_and_score(cfg, train_scenes, val_scenes):
    start = time.perf_counter()
    result = train(cfg, train_scenes, None, log=None, write_files=False)
    report = evaluate(result.model, val_scenes)
    return report.map, time.perf_counter() - start, result.steps_done


@pytest.fixture(scope="module")
def synthetic_split(tmp_path_factory):
    path = gen_dataset(tmp_path_factory.mktemp("synthetic"), 500, seed=42, size=128, num_classes=3)
    return split_scenes(load_dataset(path), 100)


def test_synthetic_end_to_end(synthetic_split):
    train_scenes, val_scenes = synthetic_split
    with threadpool_limits(1):
        with_opg, t1, n1 = train_and_score(Config(**E2E), train_scenes, val_scenes)
        without, t2, n2 = train_and_score(Config(opg=False, opr=False, **E2E), train_scenes, val_scenes)
    ok = with_opg >= 0.5 and without < with_opg and max(t1, t2) < 1800 and len(val_scenes) == 100
    record("synthetic end-to-end", ok, f"mAP@0.5 {with_opg:.3f} with proposals ({n1} steps, {t1:.0f}s), "
           f"{without:.3f} without ({n2} steps, {t2:.0f}s)")
    assert ok


# -- ablation liveness ---------------------------------------------------------------
def brute_force_assignment(cost):
    """Best prediction for each ground truth (columns) by enumeration."""
    g, q = cost.shape
    best = min(itertools.permutations(range(q), g), key=lambda cols: sum(cost[r, c] for r, c in enumerate(cols)))
    return [(c, r) for r, c in enumerate(best)]


def test_ablation_liveness():
    gt = np.array([[0.5, 0.5, 0.01, 0.5, 0.0]])
    preds = np.array([[0.5, 0.5, 0.01, 0.5, 0.15], [0.5, 0.5, 0.01, 0.3, 0.0]])
    probs = np.ones((2, 1))
    with_cfg, without_cfg = MatchCostConfig(), MatchCostConfig(use_riou=False)
    brute_on = brute_force_assignment(cost_matrix(probs, preds, [0], gt, with_cfg))
    brute_off = brute_force_assignment(cost_matrix(probs, preds, [0], gt, without_cfg))
    on = match(probs, preds, [0], gt, with_cfg).pairs
    off = match(probs, preds, [0], gt, without_cfg).pairs
    ok = on == brute_on and off == brute_off and on != off
    record("ablation liveness", ok, f"assignment with IoU cost {on}, without {off}")
    assert ok


# -- checkpoint round trip ---------------------------------------------------------
def test_checkpoint_round_trip(tmp_path, synthetic_split):
    train_scenes, val_scenes = synthetic_split
    cfg = Config(steps=10, lr=1e-3, enc_match_k=4)
    model = train(cfg, train_scenes, None, log=None, write_files=False).model
    before = evaluate(model, val_scenes)
    save_checkpoint(tmp_path / "model.ao2c", model, step=10)
    loaded, _, _ = load_checkpoint(tmp_path / "model.ao2c")
    after = evaluate(loaded, val_scenes)
    again = evaluate(loaded, val_scenes)
    same_params = all(np.array_equal(v, loaded.state_dict()[k]) for k, v in model.state_dict().items())
    same_dets = all(a.tobytes() == b.tobytes() == c.tobytes()
                    for a, b, c in zip(before.detections, after.detections, again.detections))
    ok = same_params and same_dets and before.ap == after.ap == again.ap
    record("checkpoint round trip", ok, f"parameters identical: {same_params}, detections identical: {same_dets}, "
           f"mAP {before.map:.6f} -> {after.map:.6f}")
    assert ok
