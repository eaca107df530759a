"""Soft-argmax disparity regression and full-resolution recovery.

The aggregated volume is read as per-pixel disparity logits: softmax over the
channel axis gives a distribution over quarter-scale disparity hypotheses
0..D/4-1, and the expectation yields a sub-pixel estimate. Upsampling to full
resolution multiplies by 4 to convert disparity units.
"""

from dataclasses import dataclass

import numpy as np

from . import ops
from .ops import ConfigurationError


@dataclass
class DisparityMap:
    """Full-resolution disparities in pixels with a validity mask."""

    values: np.ndarray
    valid: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float32)
        self.valid = np.asarray(self.valid, dtype=bool)
        if self.values.shape != self.valid.shape:
            raise ConfigurationError(
                f"disparity values {self.values.shape} and mask {self.valid.shape} differ"
            )

    @property
    def shape(self):
        return self.values.shape


def soft_argmax(costs: np.ndarray) -> np.ndarray:
    """Expected disparity index per pixel: (n, D/4, h, w) -> (n, 1, h, w)."""
    probs = ops.channel_softmax(costs)
    d = np.arange(costs.shape[1], dtype=np.float64).reshape(1, -1, 1, 1)
    out = (probs.astype(np.float64) * d).sum(axis=1, keepdims=True)
    return out.astype(costs.dtype)


def soft_argmax_with_cache(costs: np.ndarray):
    probs = ops.channel_softmax(costs)
    d = np.arange(costs.shape[1], dtype=np.float64).reshape(1, -1, 1, 1)
    out = (probs.astype(np.float64) * d).sum(axis=1, keepdims=True).astype(costs.dtype)
    return out, (probs, out)


def soft_argmax_backward(cache, grad_out: np.ndarray) -> np.ndarray:
    """d(expectation)/d(logit_k) = p_k * (k - expectation)."""
    probs, expectation = cache
    d = np.arange(probs.shape[1], dtype=np.float64).reshape(1, -1, 1, 1)
    g = grad_out.astype(np.float64) * probs.astype(np.float64) * (d - expectation.astype(np.float64))
    return g.astype(grad_out.dtype)


def upsample_disparity(quarter: np.ndarray, out_h: int, out_w: int) -> DisparityMap:
    """Bilinear x4 recovery of a (n, 1, h/4, w/4) quarter-scale disparity.

    Returns the map for the first batch element with every pixel valid.
    """
    values = upsample_disparity_batch(quarter, out_h, out_w)
    v = values[0, 0]
    return DisparityMap(values=v, valid=np.ones_like(v, dtype=bool))


def upsample_disparity_batch(quarter: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    quarter = ops.check_nchw(quarter, "quarter disparity")
    if quarter.shape[1] != 1:
        raise ConfigurationError(f"quarter disparity must have 1 channel, got {quarter.shape[1]}")
    return ops.bilinear_resize(quarter, out_h, out_w) * np.asarray(4.0, dtype=quarter.dtype)


def upsample_disparity_backward(in_shape, grad_out: np.ndarray) -> np.ndarray:
    return ops.bilinear_resize_backward(in_shape, grad_out) * np.asarray(4.0, dtype=grad_out.dtype)
