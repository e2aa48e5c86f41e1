"""The online-learned object representation and its weighted regression loss.

Per branch the target model is two composed linear filters with no
nonlinearity in between: a 1x1 channel-reducing convolution followed by a
3x3 convolution back up to the label channels.  The image- and flow-branch
outputs are combined by a fusion instance owned by the target model, and the
result is regressed against the encoded label under per-pixel importance
weights plus an L2 penalty on the filters.  The loss is represented through
a stacked residual vector r with L = 0.5 * ||r||^2 exactly, which is what
the Gauss-Newton learner differentiates.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .fusion import FusionParams, fuse

MID_CHANNELS = 32


@dataclass
class TargetSample:
    """One regression sample: frozen level-3 features, target and weights."""

    l3_im: Tensor
    l3_fl: Optional[Tensor]
    encoded: Tensor
    weights: Tensor
    frame_index: int = 0


@dataclass
class TargetModelParams:
    tau1: tuple                      # (1x1 reduce, 3x3 expand) image filters
    tau2: Optional[tuple]            # flow filters; absent in mode "none"
    reg_lambda: float = 1e-2

    @classmethod
    def init_zero(cls, c_in: int, label_channels: int, with_flow: bool,
                  c_mid: int = MID_CHANNELS, reg_lambda: float = 1e-2):
        def pair():
            a = Tensor(np.zeros((c_mid, c_in, 1, 1)), requires_grad=True)
            b = Tensor(np.zeros((label_channels, c_mid, 3, 3)), requires_grad=True)
            return a, b

        return cls(tau1=pair(), tau2=pair() if with_flow else None,
                   reg_lambda=reg_lambda)

    @classmethod
    def init_random(cls, rng, c_in: int, label_channels: int, with_flow: bool,
                    c_mid: int = MID_CHANNELS, reg_lambda: float = 1e-2):
        """He-scaled filters; both layers nonzero so the composed map has a
        nonzero Jacobian in every parameter block at the starting point."""
        def pair():
            a = Tensor(rng.standard_normal((c_mid, c_in, 1, 1))
                       * np.sqrt(2.0 / c_in), requires_grad=True)
            b = Tensor(rng.standard_normal((label_channels, c_mid, 3, 3))
                       * np.sqrt(2.0 / (c_mid * 9)), requires_grad=True)
            return a, b

        return cls(tau1=pair(), tau2=pair() if with_flow else None,
                   reg_lambda=reg_lambda)

    def tensors(self) -> list:
        ts = [self.tau1[0], self.tau1[1]]
        if self.tau2 is not None:
            ts += [self.tau2[0], self.tau2[1]]
        return ts

    def copy(self) -> "TargetModelParams":
        def dup(pair):
            return (Tensor(pair[0].data.copy(), requires_grad=True),
                    Tensor(pair[1].data.copy(), requires_grad=True))

        return TargetModelParams(tau1=dup(self.tau1),
                                 tau2=dup(self.tau2) if self.tau2 else None,
                                 reg_lambda=self.reg_lambda)


def _filters(feat: Tensor, pair) -> Tensor:
    return ad.conv2d(ad.conv2d(feat, pair[0]), pair[1], padding=1)


def apply(l3_im: Tensor, l3_fl: Optional[Tensor], params: TargetModelParams,
          fusion: FusionParams) -> Tensor:
    """Target representation f_tm from the level-3 features of both branches."""
    f_x = _filters(l3_im, params.tau1)
    if fusion.mode == "none":
        return fuse(f_x, None, fusion)
    if params.tau2 is None:
        raise ValueError(f"fusion mode {fusion.mode!r} requires flow filters")
    if l3_fl is None:
        raise ValueError(f"fusion mode {fusion.mode!r} requires flow features")
    f_f = _filters(l3_fl, params.tau2)
    return fuse(f_x, f_f, fusion)


def residual_and_loss(samples: list, params: TargetModelParams,
                      fusion: FusionParams,
                      sample_weights: Optional[list] = None) -> tuple[Tensor, Tensor]:
    """Stacked residual r and the loss 0.5 * ||r||^2 over the sample set.

    Each sample contributes weights * (f_tm - encoded), scaled by the square
    root of its sample weight; the regularizer contributes sqrt(lambda) times
    the flattened filters.
    """
    if not samples:
        raise ValueError("residual_and_loss: empty sample set")
    if sample_weights is None:
        sample_weights = [1.0] * len(samples)
    blocks = []
    for s, sw in zip(samples, sample_weights):
        f_tm = apply(s.l3_im, s.l3_fl, params, fusion)
        block = ad.mul(s.weights, ad.sub(f_tm, s.encoded))
        if sw != 1.0:
            block = block * float(np.sqrt(sw))
        blocks.append(ad.reshape(block, (block.size,)))
    if params.reg_lambda > 0.0:
        root = float(np.sqrt(params.reg_lambda))
        for t in params.tensors():
            blocks.append(ad.reshape(t, (t.size,)) * root)
    r = ad.concat(blocks, axis=0)
    loss = ad.sumsq(r) * 0.5
    return r, loss
