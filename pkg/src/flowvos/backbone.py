"""Multi-scale feature extractors and the mask encoders.

The feature extractor is a small trainable stand-in for a pretrained
backbone: four stages of [3x3 conv, relu, 2x2 average pool], so level k of
the pyramid has spatial size H/2^k with channel widths (16, 32, 64, 64).
Image and flow branches share this architecture but never share parameters.

The label encoder and the importance weight generator share one architecture
too: three downsampling stages to level-3 resolution followed by a linear
3x3 projection to the label channels.  The weight generator squares its
output, which makes the importance weights nonnegative for arbitrary
parameters rather than as a training outcome.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

BACKBONE_CHANNELS = (16, 32, 64, 64)
LABEL_CHANNELS = 16
TARGET_LEVEL = 3  # pyramid level consumed by the target model


def he_conv(rng, c_out: int, c_in: int, k: int) -> tuple[Tensor, Tensor]:
    """He fan-in initialized conv weight plus a zero bias."""
    std = np.sqrt(2.0 / (c_in * k * k))
    w = Tensor(rng.standard_normal((c_out, c_in, k, k)) * std, requires_grad=True)
    b = Tensor(np.zeros(c_out), requires_grad=True)
    return w, b


@dataclass
class FeatureExtractorParams:
    stages: list  # [(w, b)] per stage, 3x3 kernels

    @classmethod
    def init(cls, rng, in_channels: int = 3, channels=BACKBONE_CHANNELS):
        stages = []
        c_prev = in_channels
        for c in channels:
            stages.append(he_conv(rng, c, c_prev, 3))
            c_prev = c
        return cls(stages=stages)

    def named_tensors(self, prefix: str):
        for i, (w, b) in enumerate(self.stages):
            yield f"{prefix}.stage{i + 1}.w", w
            yield f"{prefix}.stage{i + 1}.b", b


def extract(x: Tensor, params: FeatureExtractorParams) -> dict:
    """Feature pyramid {1: ..., 4: ...} of a 3xHxW input; level k is CxH/2^k."""
    if x.ndim != 3 or x.shape[0] != len(params.stages[0][0].data[0]):
        expected = params.stages[0][0].data.shape[1]
        raise ValueError(
            f"extract: expected {expected}-channel CxHxW input, got shape {x.shape}")
    h, w = x.shape[1:]
    div = 2 ** len(params.stages)
    if h % div or w % div:
        raise ValueError(
            f"extract: spatial size {h}x{w} not divisible by {div}")
    pyramid = {}
    cur = x
    for k, (wk, bk) in enumerate(params.stages, start=1):
        cur = ad.avg_pool2(ad.relu(ad.conv2d(cur, wk, bk, padding=1)))
        pyramid[k] = cur
    return pyramid


@dataclass
class LabelEncoderParams:
    stages: list          # three downsampling convs
    proj: tuple           # final 3x3 conv to label channels
    squared: bool = False  # importance-weight variant

    @classmethod
    def init(cls, rng, label_channels: int = LABEL_CHANNELS, width: int = 16,
             squared: bool = False):
        stages = [he_conv(rng, width, 1, 3),
                  he_conv(rng, width, width, 3),
                  he_conv(rng, width, width, 3)]
        proj = he_conv(rng, label_channels, width, 3)
        return cls(stages=stages, proj=proj, squared=squared)

    def named_tensors(self, prefix: str):
        for i, (w, b) in enumerate(self.stages):
            yield f"{prefix}.stage{i + 1}.w", w
            yield f"{prefix}.stage{i + 1}.b", b
        yield f"{prefix}.proj.w", self.proj[0]
        yield f"{prefix}.proj.b", self.proj[1]


def encode_mask(mask: Tensor, params: LabelEncoderParams) -> Tensor:
    """Map a 1xHxW mask to DxH/8xW/8; squared variant yields nonnegative maps."""
    if mask.ndim != 3 or mask.shape[0] != 1:
        raise ValueError(f"encode_mask: expected 1xHxW mask, got shape {mask.shape}")
    h, w = mask.shape[1:]
    if h % 8 or w % 8:
        raise ValueError(f"encode_mask: spatial size {h}x{w} not divisible by 8")
    cur = mask
    for wk, bk in params.stages:
        cur = ad.avg_pool2(ad.relu(ad.conv2d(cur, wk, bk, padding=1)))
    out = ad.conv2d(cur, params.proj[0], params.proj[1], padding=1)
    if params.squared:
        out = ad.mul(out, out)
    return out


def encode_label(mask: Tensor, enc: LabelEncoderParams,
                 wgt: LabelEncoderParams) -> tuple[Tensor, Tensor]:
    """Encoded regression target and nonnegative importance weights for a mask."""
    return encode_mask(mask, enc), encode_mask(mask, wgt)
