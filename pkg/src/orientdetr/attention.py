"""Multi-scale deformable attention, encoder and decoder stacks."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .backbone import FeaturePyramid, flatten_pyramid, level_geometry
from .boxcoder import refine_boxes
from .nn import MLP, LayerNorm, Linear, Module, parameter
from .tensor import Tensor


class ConfigError(ValueError):
    """Raised for inconsistent model hyper-parameters."""


# -- embeddings --------------------------------------------------------------
def sine_embed(coords, num_feats, temperature=10000.0):
    """Fixed sinusoidal embedding of normalised coordinates.

    coords: (..., d) in [0, 1]; returns (..., d * num_feats), one interleaved
    sin/cos block per coordinate.
    """
    coords = np.asarray(coords, dtype=np.float64)
    if num_feats % 2:
        raise ConfigError(f"num_feats must be even, got {num_feats}")
    dim_t = temperature ** (2 * (np.arange(num_feats) // 2) / num_feats)
    pos = coords[..., None] * (2 * np.pi) / dim_t
    out = np.empty_like(pos)
    out[..., 0::2] = np.sin(pos[..., 0::2])
    out[..., 1::2] = np.cos(pos[..., 1::2])
    return out.reshape(coords.shape[:-1] + (-1,))


def token_references(level_shapes):
    """Normalised pixel-centre coordinates (N, 2) and level index (N,) per token."""
    refs, levels = [], []
    for l, (h, w) in enumerate(level_shapes):
        ys, xs = np.meshgrid((np.arange(h) + 0.5) / h, (np.arange(w) + 0.5) / w, indexing="ij")
        refs.append(np.stack([xs.ravel(), ys.ravel()], axis=-1))
        levels.append(np.full(h * w, l, dtype=np.int64))
    return np.concatenate(refs), np.concatenate(levels)


@dataclass
class TokenSequence:
    tokens: Tensor  # (B, N, C)
    level_index: np.ndarray  # (N,)
    refs: np.ndarray  # (N, 2) normalised (x, y)
    pos: np.ndarray  # (N, C) fixed sinusoidal
    level_embed: Tensor  # (L, C)
    level_shapes: list
    level_starts: np.ndarray

    @property
    def num_tokens(self):
        return self.tokens.shape[1]

    def query_pos(self):
        """Positional plus scale-level embedding per token, (N, C)."""
        return self.level_embed[self.level_index] + self.pos


def make_tokens(pyramid: FeaturePyramid, level_embed: Tensor) -> TokenSequence:
    shapes = pyramid.level_shapes
    starts, _ = level_geometry(shapes)
    refs, level_index = token_references(shapes)
    c = pyramid.channels
    pos = sine_embed(refs, c // 2)
    return TokenSequence(flatten_pyramid(pyramid), level_index, refs, pos, level_embed, shapes, starts)


# -- deformable attention ----------------------------------------------------
def deform_attn_core(value, level_shapes, level_starts, locations, weights):
    """Weighted bilinear sampling of per-head values.

    value: (B, N, M, Dh) projected tokens; locations: (B, Q, M, L, K, 2) in
    each level's pixel coordinates; weights: (B, Q, M, L, K). Returns
    (B, Q, M * Dh) = sum over (l, k) of weight * value_l(location).
    """
    value, locations, weights = T.as_tensor(value), T.as_tensor(locations), T.as_tensor(weights)
    b, _, m, dh = value.shape
    q, _, n_levels, k = locations.shape[1:5]
    if len(level_shapes) != n_levels:
        raise T.DimensionError(
            f"deform_attn_core: {len(level_shapes)} level shapes for {n_levels} sampled levels"
        )
    sampled = []
    for l, (h, w) in enumerate(level_shapes):
        start = int(level_starts[l])
        v = value[:, start : start + h * w].transpose(0, 2, 1, 3).reshape(b * m, h, w, dh)
        loc = locations[:, :, :, l].transpose(0, 2, 1, 3, 4).reshape(b * m, q * k, 2)
        sampled.append(T.bilinear_sample(v, loc).reshape(b * m, q, k, dh))
    s = T.concat(sampled, axis=2)
    wts = weights.transpose(0, 2, 1, 3, 4).reshape(b * m, q, n_levels * k, 1)
    out = (s * wts).sum(axis=2)
    return out.reshape(b, m, q, dh).transpose(0, 2, 1, 3).reshape(b, q, m * dh)


class MSDeformAttn(Module):
    """Deformable attention over L feature levels with M heads and K points.

    ``ref_kind="point"``: references are (x, y) and offsets are in level
    pixels. ``ref_kind="box"``: references are oriented boxes and offsets
    (u, v) map to R(theta) (u w/2, v h/2) in normalised image space.
    """

    def __init__(self, rng, dim, heads, levels, points, ref_kind="point"):
        if dim % heads:
            raise ConfigError(f"attention heads ({heads}) must divide channels ({dim})")
        if ref_kind not in ("point", "box"):
            raise ConfigError(f"unknown reference kind {ref_kind!r}")
        self.dim, self.heads, self.levels, self.points = dim, heads, levels, points
        self.ref_kind = ref_kind
        self.sampling_offsets = Linear(rng, dim, heads * levels * points * 2, init="zeros")
        self.sampling_offsets.bias.data = self._grid_bias().ravel()
        self.attention_weights = Linear(rng, dim, heads * levels * points, init="zeros")
        self.value_proj = Linear(rng, dim, dim, bias=False, init="xavier")
        self.output_proj = Linear(rng, dim, dim, bias=False, init="xavier")

    def _grid_bias(self):
        m, l, k = self.heads, self.levels, self.points
        ang = 2 * np.pi * (np.arange(k)[None, :] * m + np.arange(m)[:, None]) / (m * k)
        d = np.stack([np.cos(ang), np.sin(ang)], axis=-1)
        d = d / np.abs(d).max(axis=-1, keepdims=True)
        if self.ref_kind == "point":
            d = d * (1 + np.arange(k))[None, :, None]
        else:
            d = d * 0.5
        return np.broadcast_to(d[:, None], (m, l, k, 2)).copy()

    def sampling_locations(self, query, refs, level_shapes):
        """Pixel-space sampling locations (B, Q, M, L, K, 2) as a tensor.

        ``refs`` is a constant array: (B, Q, 2) points or (B, Q, 5) boxes.
        """
        b, q, _ = query.shape
        m, l, k = self.heads, self.levels, self.points
        if len(level_shapes) != l:
            raise ConfigError(f"attention built for {l} levels, got {len(level_shapes)}")
        offsets = self.sampling_offsets(query).reshape(b, q, m, l, k, 2)
        refs = np.asarray(refs, dtype=np.float64)
        sizes = np.array([[w, h] for h, w in level_shapes], dtype=np.float64)  # (L, 2) as (W, H)
        if self.ref_kind == "point":
            if refs.shape[-1] != 2:
                raise T.DimensionError(f"point references need (B, Q, 2), got {refs.shape}")
            base = refs[:, :, None, None, None, :] * sizes[:, None, :] - 0.5
            return offsets + base
        if refs.shape[-1] != 5:
            raise T.DimensionError(f"box references need (B, Q, 5), got {refs.shape}")
        cx, cy, w, h, t = (refs[:, :, None, None, None, i : i + 1] for i in range(5))
        c, s = np.cos(t), np.sin(t)
        u = offsets[..., 0:1] * (0.5 * w)
        v = offsets[..., 1:2] * (0.5 * h)
        dx = u * c - v * s
        dy = u * s + v * c
        scale = sizes[:, None, :]  # (L, 1, 2)
        x = (dx + cx) * scale[..., 0:1] - 0.5
        y = (dy + cy) * scale[..., 1:2] - 0.5
        return T.concat([x, y], axis=-1)

    def attention(self, query):
        b, q, _ = query.shape
        m, l, k = self.heads, self.levels, self.points
        logits = self.attention_weights(query).reshape(b, q, m, l * k)
        return T.softmax(logits, axis=-1).reshape(b, q, m, l, k)

    def forward(self, query, refs, value_input, level_shapes, level_starts, return_locations=False):
        query = T.as_tensor(query)
        b, n, _ = value_input.shape
        value = self.value_proj(value_input).reshape(b, n, self.heads, self.dim // self.heads)
        loc = self.sampling_locations(query, refs, level_shapes)
        weights = self.attention(query)
        out = self.output_proj(deform_attn_core(value, level_shapes, level_starts, loc, weights))
        if return_locations:
            return out, loc.data
        return out


class MultiheadAttention(Module):
    def __init__(self, rng, dim, heads):
        if dim % heads:
            raise ConfigError(f"attention heads ({heads}) must divide channels ({dim})")
        self.heads = heads
        self.q_proj = Linear(rng, dim, dim, init="xavier")
        self.k_proj = Linear(rng, dim, dim, init="xavier")
        self.v_proj = Linear(rng, dim, dim, init="xavier")
        self.out_proj = Linear(rng, dim, dim, init="xavier")

    def forward(self, q_in, k_in, v_in):
        b, nq, c = q_in.shape
        nk = k_in.shape[1]
        m, dh = self.heads, c // self.heads
        q = self.q_proj(q_in).reshape(b, nq, m, dh).transpose(0, 2, 1, 3)
        k = self.k_proj(k_in).reshape(b, nk, m, dh).transpose(0, 2, 3, 1)
        v = self.v_proj(v_in).reshape(b, nk, m, dh).transpose(0, 2, 1, 3)
        attn = T.softmax((q @ k) * (1.0 / np.sqrt(dh)), axis=-1)
        out = (attn @ v).transpose(0, 2, 1, 3).reshape(b, nq, c)
        return self.out_proj(out)


class FFN(Module):
    def __init__(self, rng, dim, hidden):
        self.fc1 = Linear(rng, dim, hidden)
        self.fc2 = Linear(rng, hidden, dim)
        self.norm = LayerNorm(dim)

    def forward(self, x):
        return self.norm(x + self.fc2(T.relu(self.fc1(x))))


# -- encoder -----------------------------------------------------------------
class EncoderLayer(Module):
    def __init__(self, rng, dim, heads, levels, points, ffn_dim):
        self.attn = MSDeformAttn(rng, dim, heads, levels, points, ref_kind="point")
        self.norm = LayerNorm(dim)
        self.ffn = FFN(rng, dim, ffn_dim)

    def forward(self, src, pos, refs, level_shapes, level_starts):
        attn = self.attn(src + pos, refs, src, level_shapes, level_starts)
        return self.ffn(self.norm(src + attn))


class Encoder(Module):
    def __init__(self, rng, dim, heads, levels, points, ffn_dim, num_layers):
        self.layers = [EncoderLayer(rng, dim, heads, levels, points, ffn_dim) for _ in range(num_layers)]

    def forward(self, seq: TokenSequence) -> TokenSequence:
        return encoder_forward(seq, self.layers)


def encoder_forward(seq: TokenSequence, layers) -> TokenSequence:
    """Run the encoder stack; each token references its own location."""
    b = seq.tokens.shape[0]
    pos = seq.query_pos()
    refs = np.broadcast_to(seq.refs, (b,) + seq.refs.shape)
    src = seq.tokens
    for layer in layers:
        src = layer(src, pos, refs, seq.level_shapes, seq.level_starts)
    return TokenSequence(src, seq.level_index, seq.refs, seq.pos, seq.level_embed,
                         seq.level_shapes, seq.level_starts)


# -- decoder -----------------------------------------------------------------
class DecoderLayer(Module):
    def __init__(self, rng, dim, heads, levels, points, ffn_dim):
        self.self_attn = MultiheadAttention(rng, dim, heads)
        self.norm1 = LayerNorm(dim)
        self.cross_attn = MSDeformAttn(rng, dim, heads, levels, points, ref_kind="box")
        self.norm2 = LayerNorm(dim)
        self.ffn = FFN(rng, dim, ffn_dim)

    def forward(self, tgt, query_pos, ref_boxes, memory: TokenSequence):
        q = tgt + query_pos
        tgt = self.norm1(tgt + self.self_attn(q, q, tgt))
        attn, loc = self.cross_attn(tgt + query_pos, ref_boxes, memory.tokens,
                                    memory.level_shapes, memory.level_starts, return_locations=True)
        tgt = self.norm2(tgt + attn)
        return self.ffn(tgt), loc


class BoxHead(Module):
    """Three-layer regression FFN producing 5 deltas.

    With ``angle_branch`` the angle comes from a separate two-layer head.
    The final layers start at zero so initial predictions equal references.
    """

    def __init__(self, rng, dim, angle_branch=False):
        self.angle_branch = angle_branch
        self.reg = MLP(rng, [dim, dim, dim, 4 if angle_branch else 5])
        self.reg.layers[-1] = Linear(rng, dim, 4 if angle_branch else 5, init="zeros")
        self.angle = None
        if angle_branch:
            self.angle = MLP(rng, [dim, dim, 1])
            self.angle.layers[-1] = Linear(rng, dim, 1, init="zeros")

    def forward(self, x):
        out = self.reg(x)
        if self.angle_branch:
            out = T.concat([out, self.angle(x)], axis=-1)
        return out


@dataclass
class DecoderOutput:
    logits: Tensor  # (B, Q, num_classes)
    boxes: Tensor  # (B, Q, 5)
    sampling_locations: np.ndarray  # (B, Q, M, L, K, 2) normalised


class Decoder(Module):
    def __init__(self, rng, dim, heads, levels, points, ffn_dim, num_layers, num_classes,
                 angle_branch=False, prior_prob=0.01):
        self.layers = [DecoderLayer(rng, dim, heads, levels, points, ffn_dim) for _ in range(num_layers)]
        bias = -np.log((1 - prior_prob) / prior_prob)
        self.class_heads = []
        for _ in range(num_layers):
            head = Linear(rng, dim, num_classes)
            head.bias.data = np.full(num_classes, bias)
            self.class_heads.append(head)
        self.box_heads = [BoxHead(rng, dim, angle_branch) for _ in range(num_layers)]

    def forward(self, tgt, query_pos, init_boxes, memory, iterative=True):
        return decoder_forward(self, tgt, query_pos, init_boxes, memory, iterative)


def decoder_forward(decoder: Decoder, tgt, query_pos, init_boxes, memory: TokenSequence, iterative=True):
    """Decode queries layer by layer.

    Each layer attends around its reference boxes and predicts deltas that
    refine them. With ``iterative`` the detached output of one layer is the
    next layer's reference; otherwise every layer refines ``init_boxes``.
    ``init_boxes`` may be a tensor, in which case the first refinement (and
    every refinement when not iterative) propagates gradient into it.
    """
    ref = T.as_tensor(init_boxes)
    k = ref.shape[1]
    if k > memory.num_tokens:
        raise ConfigError(f"{k} queries exceed the {memory.num_tokens} memory tokens")
    outputs = []
    sizes = np.array([[w, h] for h, w in memory.level_shapes], dtype=np.float64)
    for layer, cls_head, box_head in zip(decoder.layers, decoder.class_heads, decoder.box_heads):
        tgt, loc = layer(tgt, query_pos, ref.data, memory)
        boxes = refine_boxes(ref, box_head(tgt))
        norm_loc = (loc + 0.5) / sizes[:, None, :]
        outputs.append(DecoderOutput(cls_head(tgt), boxes, norm_loc))
        if iterative:
            ref = boxes.detach()
    return outputs


def make_level_embed(rng, levels, dim):
    return parameter(rng.normal(0.0, 1.0, size=(levels, dim)))
