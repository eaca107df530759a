"""Correlation cost volume over quarter-resolution feature maps.

Matching scores live on the channel axis: channel d of the volume holds the
channel-averaged dot product between the left feature at (h, w) and the right
feature at (h, w - d). Columns that would read left of the image border are
zero-filled, which the softmax regression reads as "no evidence".
"""

from dataclasses import dataclass

import numpy as np

from . import ops
from .nn import Module
from .ops import ConfigurationError


@dataclass
class CostVolume:
    """(n, D/4, h, w) tensor of matching scores plus the full-scale range D."""

    data: np.ndarray
    max_disparity_full: int

    @property
    def disparity_channels(self) -> int:
        return self.data.shape[1]


def build_correlation_volume(left: np.ndarray, right: np.ndarray,
                             max_disparity_full: int) -> CostVolume:
    left = ops.check_nchw(left, "left features")
    right = ops.check_nchw(right, "right features")
    if left.shape != right.shape:
        raise ConfigurationError(
            f"left/right feature shapes differ: {left.shape} vs {right.shape}"
        )
    if max_disparity_full % 4 or max_disparity_full < 4:
        raise ConfigurationError(
            f"max disparity must be a positive multiple of 4, got {max_disparity_full}"
        )
    n, c, h, w = left.shape
    d_channels = max_disparity_full // 4
    l64 = left.astype(np.float64, copy=False)
    r64 = right.astype(np.float64, copy=False)
    vol = np.zeros((n, d_channels, h, w), dtype=np.float64)
    for d in range(min(d_channels, w)):
        if d == 0:
            vol[:, 0] = (l64 * r64).mean(axis=1)
        else:
            vol[:, d, :, d:] = (l64[:, :, :, d:] * r64[:, :, :, :-d]).mean(axis=1)
    data = vol.astype(left.dtype)
    ops.check_finite(data, "correlation volume")
    return CostVolume(data=data, max_disparity_full=max_disparity_full)


def correlation_volume_backward(left: np.ndarray, right: np.ndarray,
                                grad_out: np.ndarray):
    """Gradients of sum(grad_out * volume) w.r.t. both feature maps."""
    n, c, h, w = left.shape
    d_channels = grad_out.shape[1]
    l64 = left.astype(np.float64, copy=False)
    r64 = right.astype(np.float64, copy=False)
    g64 = grad_out.astype(np.float64, copy=False)
    grad_l = np.zeros_like(l64)
    grad_r = np.zeros_like(r64)
    for d in range(min(d_channels, w)):
        g = g64[:, d:d + 1, :, d:] / c
        if d == 0:
            grad_l += g * r64
            grad_r += g * l64
        else:
            grad_l[:, :, :, d:] += g * r64[:, :, :, :-d]
            grad_r[:, :, :, :-d] += g * l64[:, :, :, d:]
    return grad_l.astype(left.dtype), grad_r.astype(right.dtype)


class CorrelationVolume(Module):
    """Graph node wrapping the correlation; has no trainable state."""

    def __init__(self, max_disparity_full: int):
        self.max_disparity_full = max_disparity_full

    def forward(self, left: np.ndarray, right: np.ndarray):
        volume = build_correlation_volume(left, right, self.max_disparity_full)
        return volume, (left, right)

    def backward(self, cache, grad_out: np.ndarray):
        left, right = cache
        return correlation_volume_backward(left, right, grad_out)
