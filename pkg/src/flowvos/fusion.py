"""Multi-modal channel attention and the two ablation fusion modes.

Attention mode computes query and value from the flow features and the key
from the image features via 1x1 projections, forms a C_v x C_k channel
attention map as rowsoftmax(V K^T / sqrt(HW)), remaps the query with it and
adds the projected result back onto the image features (skip connection).
Being channel-to-channel, the map is invariant to any spatial permutation
applied to both inputs.

Mode "concat" is a 1x1 projection of the channel-concatenated inputs and
mode "none" passes the image features through untouched.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

MODES = ("none", "concat", "attention")


@dataclass
class FusionParams:
    mode: str
    c_in: int
    wq: Optional[Tensor] = None   # flow -> query, C_in -> C_k
    wk: Optional[Tensor] = None   # image -> key, C_in -> C_k
    wv: Optional[Tensor] = None   # flow -> value, C_in -> C_v
    wo: Optional[Tensor] = None   # value -> output, C_v -> C_in
    wc: Optional[Tensor] = None   # concat mode, 2*C_in -> C_in

    @classmethod
    def init(cls, rng, mode: str, c_in: int):
        if mode not in MODES:
            raise ValueError(f"unknown fusion mode {mode!r}, expected one of {MODES}")
        p = cls(mode=mode, c_in=c_in)
        if mode == "attention":
            c_bottleneck = max(4, c_in // 2)

            def proj(c_out, c_src):
                return Tensor(rng.standard_normal((c_out, c_src, 1, 1))
                              * np.sqrt(2.0 / c_src), requires_grad=True)

            p.wq = proj(c_bottleneck, c_in)
            p.wk = proj(c_bottleneck, c_in)
            p.wv = proj(c_bottleneck, c_in)
            # zero output projection: the block starts as the identity skip
            # and the flow pathway only grows as training demands it
            p.wo = Tensor(np.zeros((c_in, c_bottleneck, 1, 1)),
                          requires_grad=True)
        elif mode == "concat":
            p.wc = Tensor(rng.standard_normal((c_in, 2 * c_in, 1, 1))
                          * np.sqrt(2.0 / (2 * c_in)), requires_grad=True)
        return p

    def named_tensors(self, prefix: str):
        for name in ("wq", "wk", "wv", "wo", "wc"):
            t = getattr(self, name)
            if t is not None:
                yield f"{prefix}.{name}", t


def attention_map(f_im: Tensor, f_fl: Tensor, params: FusionParams) -> Tensor:
    """The C_v x C_k channel attention map; rows sum to 1."""
    hw = f_im.shape[1] * f_im.shape[2]
    k = ad.conv2d(f_im, params.wk)
    v = ad.conv2d(f_fl, params.wv)
    kf = ad.reshape(k, (k.shape[0], hw))
    vf = ad.reshape(v, (v.shape[0], hw))
    scores = ad.matmul(vf, ad.transpose2d(kf)) * (1.0 / np.sqrt(hw))
    return ad.softmax(scores, axis=1)


def fuse(f_im: Tensor, f_fl: Optional[Tensor], params: FusionParams) -> Tensor:
    """Combine same-shape image and flow feature maps; output keeps f_im's shape."""
    if params.mode == "none":
        return f_im
    if f_fl is None:
        raise ValueError(f"fusion mode {params.mode!r} needs flow features")
    if f_im.shape != f_fl.shape:
        raise ValueError(f"fuse: shape mismatch {f_im.shape} vs {f_fl.shape}")
    if f_im.shape[0] != params.c_in:
        raise ValueError(
            f"fuse: expected {params.c_in} channels, got {f_im.shape[0]}")
    if params.mode == "concat":
        return ad.conv2d(ad.concat([f_im, f_fl], axis=0), params.wc)
    if params.mode == "attention":
        c, h, w = f_im.shape
        hw = h * w
        q = ad.conv2d(f_fl, params.wq)
        m = attention_map(f_im, f_fl, params)
        qf = ad.reshape(q, (q.shape[0], hw))
        remapped = ad.matmul(m, qf)                       # C_v x HW
        remapped = ad.reshape(remapped, (remapped.shape[0], h, w))
        return ad.add(f_im, ad.conv2d(remapped, params.wo))
    raise ValueError(f"unknown fusion mode {params.mode!r}")
