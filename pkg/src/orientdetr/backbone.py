"""Small convolutional backbone producing a four-level feature pyramid."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .nn import Conv2d, LayerNorm, Module
from .tensor import Tensor

STRIDES = (8, 16, 32, 64)
REQUIRED_DIVISOR = 64


@dataclass
class FeaturePyramid:
    levels: list  # of Tensor (B, H_l, W_l, C)

    @property
    def level_shapes(self):
        return [(lvl.shape[1], lvl.shape[2]) for lvl in self.levels]

    @property
    def channels(self):
        return self.levels[0].shape[3]

    @property
    def batch_size(self):
        return self.levels[0].shape[0]

    def __len__(self):
        return len(self.levels)


class ConvNormReLU(Module):
    def __init__(self, rng, c_in, c_out, stride):
        self.conv = Conv2d(rng, c_in, c_out, 3, stride=stride, padding=1)
        self.norm = LayerNorm(c_out)

    def forward(self, x):
        return T.relu(self.norm(self.conv(x)))


class Backbone(Module):
    """Four conv stages; taps after stages 2-4 give strides 8/16/32, and a
    stride-2 3x3 conv on the last stage gives stride 64.

    Stage 1 downsamples twice (stride 4); stages 2-4 each downsample once.
    """

    def __init__(self, rng, channels=32, widths=(16, 32, 32, 32)):
        self.channels = channels
        w1, w2, w3, w4 = widths
        self.stages = [
            [ConvNormReLU(rng, 3, w1, 2), ConvNormReLU(rng, w1, w1, 2)],
            [ConvNormReLU(rng, w1, w2, 2), ConvNormReLU(rng, w2, w2, 1)],
            [ConvNormReLU(rng, w2, w3, 2), ConvNormReLU(rng, w3, w3, 1)],
            [ConvNormReLU(rng, w3, w4, 2), ConvNormReLU(rng, w4, w4, 1)],
        ]
        self.taps = [Conv2d(rng, w, channels, 1) for w in (w2, w3, w4)]
        self.extra = Conv2d(rng, w4, channels, 3, stride=2, padding=1)

    def forward(self, images):
        return self.extract(images)

    def extract(self, images) -> FeaturePyramid:
        x = T.as_tensor(images)
        if x.ndim == 3:
            x = x.reshape((1,) + x.shape)
        if x.ndim != 4 or x.shape[3] != 3:
            raise ValueError(f"expected images of shape (B, H, W, 3), got {x.shape}")
        h, w = x.shape[1:3]
        if h % REQUIRED_DIVISOR or w % REQUIRED_DIVISOR:
            raise ValueError(
                f"image size {h}x{w} is not divisible by {REQUIRED_DIVISOR}; "
                "height and width must both be multiples of 64"
            )
        feats = []
        for i, stage in enumerate(self.stages):
            for block in stage:
                x = block(x)
            if i >= 1:
                feats.append(self.taps[i - 1](x))
        feats.append(self.extra(x))
        return FeaturePyramid(feats)


def level_geometry(level_shapes):
    """Start offsets of each level in the flattened token sequence."""
    sizes = [h * w for h, w in level_shapes]
    starts = np.concatenate([[0], np.cumsum(sizes)[:-1]]).astype(np.int64)
    return starts, int(sum(sizes))


def flatten_pyramid(pyramid: FeaturePyramid) -> Tensor:
    """(B, sum H_l W_l, C) token tensor in level order, row-major within a level."""
    b, c = pyramid.batch_size, pyramid.channels
    return T.concat([lvl.reshape(b, -1, c) for lvl in pyramid.levels], axis=1)
