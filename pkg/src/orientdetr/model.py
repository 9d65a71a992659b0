"""Detector assembly and training criterion."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .attention import (
    Decoder,
    Encoder,
    TokenSequence,
    make_level_embed,
    make_tokens,
    sine_embed,
)
from .backbone import Backbone, FeaturePyramid
from .config import Config
from .matching import match, set_loss
from .nn import LayerNorm, Linear, Module, parameter
from .proposals import (
    ProposalHead,
    ProposalSet,
    ReceptiveBlock,
    opr_align,
    select_topk,
)
from .tensor import Tensor

LEARNED_REF_SIZE = 0.1


@dataclass
class DetectorOutput:
    layers: list  # DecoderOutput per decoder layer
    proposals: list = field(default_factory=list)  # ProposalSet per proposal pass
    query_index: np.ndarray = None  # (B, k) token index of each query
    query_boxes: np.ndarray = None  # (B, k, 5) initial references
    query_scores: np.ndarray = None  # (B, k) objectness logits

    @property
    def final(self):
        return self.layers[-1]


class Detector(Module):
    """Backbone, deformable encoder, proposal stage and decoder."""

    def __init__(self, cfg: Config):
        cfg.validate()
        self.cfg = cfg
        rng = np.random.default_rng(cfg.seed)
        c = cfg.channels
        self.backbone = Backbone(rng, channels=c)
        self.level_embed = make_level_embed(rng, cfg.levels, c)
        ffn = cfg.ffn_ratio * c
        self.encoder = Encoder(rng, c, cfg.heads, cfg.levels, cfg.points, ffn, cfg.enc_layers)
        self.decoder = Decoder(rng, c, cfg.heads, cfg.levels, cfg.points, ffn, cfg.dec_layers,
                               cfg.num_classes, angle_branch=cfg.angle_branch)
        if cfg.opg:
            self.proposal_head = ProposalHead(rng, c)
            self.query_pos_proj = Linear(rng, 5 * (c // 2), c, init="xavier")
            self.query_pos_norm = LayerNorm(c)
            self.query_content_proj = Linear(rng, c, c, init="xavier")
            self.query_content_norm = LayerNorm(c)
            if cfg.opr:
                self.receptive = ReceptiveBlock(rng, c)
        else:
            self.query_pos_embed = parameter(rng.normal(0.0, 1.0, size=(cfg.queries, c)))
            self.query_content_embed = parameter(rng.normal(0.0, 1.0, size=(cfg.queries, c)))
            self.reference_proj = Linear(rng, c, 2, init="xavier")

    # -- stages ------------------------------------------------------------------
    def encode(self, pyramid: FeaturePyramid) -> TokenSequence:
        return self.encoder(make_tokens(pyramid, self.level_embed))

    def refine_pyramid(self, pyramid: FeaturePyramid, proposals: ProposalSet) -> FeaturePyramid:
        """Receptive block then proposal-guided alignment on every level."""
        boxes = proposals.boxes.data
        levels, start = [], 0
        for lvl in pyramid.levels:
            b, h, w, _ = lvl.shape
            x = self.receptive(lvl)
            levels.append(opr_align(x, boxes[:, start : start + h * w]))
            start += h * w
        return FeaturePyramid(levels)

    def query_embeddings(self, boxes, content):
        coords = np.asarray(boxes, dtype=np.float64).copy()
        coords[..., 4] = coords[..., 4] / np.pi
        pos = sine_embed(coords, self.cfg.channels // 2)
        query_pos = self.query_pos_norm(self.query_pos_proj(pos))
        tgt = self.query_content_norm(self.query_content_proj(content))
        return tgt, query_pos

    def forward(self, images) -> DetectorOutput:
        images = T.as_tensor(images)
        if images.ndim == 3:
            images = images.reshape((1,) + images.shape)
        cfg = self.cfg
        pyramid = self.backbone.extract(images)
        memory = self.encode(pyramid)
        b = images.shape[0]
        if not cfg.opg:
            return self._forward_learned_queries(memory, b)

        passes = [self.proposal_head(memory)]
        if cfg.opr:
            memory = self.encode(self.refine_pyramid(pyramid, passes[0]))
            passes.append(self.proposal_head(memory))
        final = passes[-1]
        index = select_topk(final, cfg.queries)
        bi = np.arange(b)[:, None]
        query_boxes = final.boxes.data[bi, index]
        content = memory.tokens[bi, index]
        tgt, query_pos = self.query_embeddings(query_boxes, content)
        layers = self.decoder(tgt, query_pos, query_boxes, memory, iterative=cfg.ibr)
        return DetectorOutput(layers, passes, index, query_boxes, final.scores.data[bi, index])

    def _forward_learned_queries(self, memory, b):
        cfg = self.cfg
        ones = Tensor(np.ones((b, 1, 1)))
        query_pos = ones * self.query_pos_embed
        tgt = ones * self.query_content_embed
        centers = T.sigmoid(self.reference_proj(query_pos))
        size = np.full((b, cfg.queries, 2), LEARNED_REF_SIZE)
        init = T.concat([centers, Tensor(size), Tensor(np.zeros((b, cfg.queries, 1)))], axis=-1)
        layers = self.decoder(tgt, query_pos, init, memory, iterative=cfg.ibr)
        return DetectorOutput(layers, [], None, init.data, None)


# -- criterion ---------------------------------------------------------------------
def detection_loss(output: DetectorOutput, targets, cfg: Config):
    """Summed set loss over every decoder layer and every proposal pass.

    Proposal passes are supervised class-agnostically. Returns the total
    tensor and a dict of summed components.
    """
    cost_cfg = cfg.cost
    num_boxes = sum(len(t[0]) for t in targets)
    totals = {"cls": 0.0, "l1": 0.0, "riou": 0.0}
    total = None

    def add(terms):
        nonlocal total
        total = terms.total if total is None else total + terms.total
        for key in totals:
            totals[key] += float(getattr(terms, key).data)

    for layer in output.layers:
        probs = 1.0 / (1.0 + np.exp(-layer.logits.data))
        boxes = layer.boxes.data
        assignments = [
            match(probs[i], boxes[i], tgt[0], tgt[1], cost_cfg) for i, tgt in enumerate(targets)
        ]
        add(set_loss(layer.logits, layer.boxes, targets, assignments, cost_cfg, num_boxes))

    if cfg.enc_loss:
        # class-agnostic; each object may claim enc_match_k proposals
        k = cfg.enc_match_k
        agnostic = [(np.zeros(k * len(t[0]), dtype=np.int64), np.tile(t[1], (k, 1))) for t in targets]
        for props in output.proposals:
            n = props.boxes.shape[1]
            reps = [(c[: (n // k) * k], b[: (n // k) * k]) for c, b in agnostic]
            logits = props.scores.reshape(props.scores.shape + (1,))
            probs = 1.0 / (1.0 + np.exp(-logits.data))
            boxes = props.boxes.data
            assignments = [match(probs[i], boxes[i], c, b, cost_cfg) for i, (c, b) in enumerate(reps)]
            add(set_loss(logits, props.boxes, reps, assignments, cost_cfg, k * num_boxes))
    totals["total"] = float(total.data)
    return total, totals


def postprocess(output: DetectorOutput, score_floor=0.05):
    """Per-image detections (k, 7): class, score, cx, cy, w, h, theta.

    Every (query, class) pair scoring at least ``score_floor`` is kept; no
    suppression is applied.
    """
    final = output.final
    probs = 1.0 / (1.0 + np.exp(-final.logits.data))
    boxes = final.boxes.data
    results = []
    for i in range(probs.shape[0]):
        q, c = np.nonzero(probs[i] >= score_floor)
        dets = np.column_stack([c.astype(np.float64), probs[i][q, c], boxes[i][q]])
        order = np.argsort(-dets[:, 1], kind="stable")
        results.append(dets[order].reshape(-1, 7))
    return results
