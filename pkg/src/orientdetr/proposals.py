"""Oriented proposal generation and refinement."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .attention import ConfigError, TokenSequence
from .boxcoder import refine_boxes
from .geom import box_vertices_array
from .nn import MLP, Conv2d, Linear, Module
from .tensor import Tensor

BASE_SIZE = 0.05


def initial_boxes(level_shapes, base_size=BASE_SIZE):
    """One box per token: its pixel centre, side 2**(l-1) * base_size, angle 0.

    Levels are numbered from 1 in the size rule, so the finest level gets
    ``base_size``.
    """
    out = []
    for l, (h, w) in enumerate(level_shapes, start=1):
        ys, xs = np.meshgrid((np.arange(h) + 0.5) / h, (np.arange(w) + 0.5) / w, indexing="ij")
        side = 2.0 ** (l - 1) * base_size
        boxes = np.zeros((h * w, 5))
        boxes[:, 0] = xs.ravel()
        boxes[:, 1] = ys.ravel()
        boxes[:, 2] = side
        boxes[:, 3] = side
        out.append(boxes)
    return np.concatenate(out)


@dataclass
class ProposalSet:
    boxes: Tensor  # (B, N, 5) canonical, normalised
    scores: Tensor  # (B, N) objectness logits
    deltas: Tensor  # (B, N, 5) regression output in parameter space
    token_index: np.ndarray = None  # (B, N) source token of each proposal

    def __len__(self):
        return self.boxes.shape[1]

    def take(self, index):
        """Select proposals per image with an integer (B, k) array."""
        b = np.arange(index.shape[0])[:, None]
        return ProposalSet(self.boxes[b, index], self.scores[b, index],
                           self.deltas[b, index], np.asarray(index))


class ProposalHead(Module):
    """Class-agnostic objectness and 5-parameter regression over memory tokens."""

    def __init__(self, rng, dim, prior_prob=0.01):
        self.score = Linear(rng, dim, 1)
        self.score.bias.data = np.array([-np.log((1 - prior_prob) / prior_prob)])
        self.reg = MLP(rng, [dim, dim, dim, 5])
        self.reg.layers[-1] = Linear(rng, dim, 5, init="zeros")

    def forward(self, memory: TokenSequence) -> ProposalSet:
        return opg_generate(memory, self)


def opg_generate(memory: TokenSequence, head: ProposalHead) -> ProposalSet:
    """Turn every memory token into a scored oriented proposal."""
    tokens = memory.tokens
    b, n, _ = tokens.shape
    init = initial_boxes(memory.level_shapes)
    if len(init) != n:
        raise T.DimensionError(f"memory has {n} tokens but the pyramid defines {len(init)}")
    deltas = head.reg(tokens)
    boxes = refine_boxes(np.broadcast_to(init, (b, n, 5)), deltas)
    scores = head.score(tokens).reshape(b, n)
    return ProposalSet(boxes, scores, deltas, np.broadcast_to(np.arange(n), (b, n)))


class ReceptiveBlock(Module):
    """relu(br1 + mix(concat(br1, br2, br3))) with 1x1, 1x5 and 1x7 branches."""

    def __init__(self, rng, dim):
        self.br1 = Conv2d(rng, dim, dim, (1, 1))
        self.br2 = Conv2d(rng, dim, dim, (1, 5), padding=(0, 2))
        self.br3 = Conv2d(rng, dim, dim, (1, 7), padding=(0, 3))
        self.mix = Conv2d(rng, 3 * dim, dim, (1, 1))

    def forward(self, x):
        return opr_receptive_block(x, self)


def opr_receptive_block(x, block: ReceptiveBlock):
    x = T.as_tensor(x)
    if x.shape[-1] != block.br1.weight.shape[2]:
        raise T.DimensionError(
            f"receptive block expects {block.br1.weight.shape[2]} channels, got {x.shape[-1]}"
        )
    b1 = block.br1(x)
    b2 = block.br2(x)
    b3 = block.br3(x)
    return T.relu(b1 + block.mix(T.concat([b1, b2, b3], axis=-1)))


def alignment_points(boxes, h, w):
    """Centre plus four corners of each box in level pixel coordinates, (..., 5, 2)."""
    boxes = np.asarray(boxes, dtype=np.float64)
    pts = np.concatenate([boxes[..., None, 0:2], box_vertices_array(boxes)], axis=-2)
    return pts * np.array([w, h]) - 0.5


def opr_align(feature, boxes):
    """Re-encode proposal geometry into a feature map.

    feature: (B, H, W, C); boxes: constant (B, H*W, 5), one per location in
    row-major order. Each location receives the mean of bilinear samples at
    its box centre and corners, added to the original feature.
    """
    feature = T.as_tensor(feature)
    b, h, w, c = feature.shape
    boxes = np.asarray(boxes, dtype=np.float64)
    if boxes.shape != (b, h * w, 5):
        raise T.DimensionError(f"opr_align: need one box per location {(b, h * w, 5)}, got {boxes.shape}")
    pts = alignment_points(boxes, h, w).reshape(b, h * w * 5, 2)
    sampled = T.bilinear_sample(feature, pts).reshape(b, h * w, 5, c).mean(axis=2)
    return feature + sampled.reshape(b, h, w, c)


def select_topk(proposals: ProposalSet, k):
    """Indices (B, k) of the k highest-scoring proposals; ties go to the lower index."""
    n = len(proposals)
    if k > n:
        raise ConfigError(f"cannot select {k} queries from {n} proposals")
    scores = proposals.scores.data
    return np.argsort(-scores, axis=1, kind="stable")[:, :k]
