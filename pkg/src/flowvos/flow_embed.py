"""All-positive 3-channel embedding of 2-D optical flow fields.

A flow vector (u, v) is lifted to (u, v, m) with m its Euclidean magnitude;
the lifted points live on a cone around the z axis.  A fixed linear map then
tilts that cone onto the positive octant so the channels behave like image
intensities.  The map factors as Q diag(1, 1, sqrt(2)) with Q a proper
rotation, i.e. the magnitude scaling is already folded into its third column,
so it is applied to the unscaled triple.  Set ``prescale=True`` to feed
(u, v, sqrt(2) m) instead, which reproduces the alternative scale-then-rotate
reading (and breaks the sqrt(3) norm law).
"""

from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor

_S3 = np.sqrt(3.0)

# columns 1-2 orthonormal, column 3 of norm sqrt(2); det = +sqrt(2)
ROTATION = np.array([
    [1.0 / (2.0 * _S3) + 0.5, 1.0 / (2.0 * _S3) - 0.5, np.sqrt(2.0) / _S3],
    [1.0 / (2.0 * _S3) - 0.5, 1.0 / (2.0 * _S3) + 0.5, np.sqrt(2.0) / _S3],
    [-1.0 / _S3, -1.0 / _S3, np.sqrt(2.0) / _S3],
])


@dataclass
class FlowField:
    """Per-pixel displacement from a source frame to a target frame, 2xHxW."""

    uv: np.ndarray
    src_index: int = 0
    dst_index: int = 1

    def __post_init__(self):
        self.uv = np.asarray(self.uv, dtype=np.float64)
        if self.uv.ndim != 3 or self.uv.shape[0] != 2:
            raise ValueError(f"flow field must be 2xHxW, got shape {self.uv.shape}")
        if self.uv.shape[1] < 1 or self.uv.shape[2] < 1:
            raise ValueError(f"flow field has empty spatial extent {self.uv.shape}")

    @property
    def shape(self):
        return self.uv.shape[1:]


def _check_finite(flow: FlowField) -> None:
    bad = ~np.isfinite(flow.uv)
    if bad.any():
        c, y, x = (int(i[0]) for i in np.nonzero(bad))
        comp = "u" if c == 0 else "v"
        raise ValueError(f"non-finite flow {comp} component at pixel (x={x}, y={y})")


def magnitude_channel(flow: FlowField) -> Tensor:
    """Per-pixel Euclidean magnitude, 1xHxW."""
    _check_finite(flow)
    m = np.sqrt(flow.uv[0] ** 2 + flow.uv[1] ** 2)
    return Tensor(m[None])


def embed_flow(flow: FlowField, prescale: bool = False) -> Tensor:
    """Embed a flow field into the all-positive 3-channel representation."""
    _check_finite(flow)
    u, v = flow.uv[0], flow.uv[1]
    m = np.sqrt(u * u + v * v)
    if prescale:
        m = m * np.sqrt(2.0)
    p = np.stack([u, v, m])
    out = np.einsum("ij,jhw->ihw", ROTATION, p)
    return Tensor(out)
