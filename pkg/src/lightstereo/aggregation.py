"""2-D cost aggregation across three scales with image-guided attention.

The aggregator treats the disparity axis of the cost volume as ordinary
channels: stacks of inverted residual blocks refine the volume at 1/4, 1/8
and 1/16 resolution, stride-2 inverted residuals move between scales, and a
two-level decoder restores 1/4 resolution with skip additions.

At each scale the left-image features drive a multi-scale convolutional
attention (MSCA): a depthwise 1x1 branch plus depthwise strip pairs (k x 1
followed by 1 x k, k in {7, 11, 21}), concatenated and blended by a 1x1
channel mixer, then multiplied into the cost features.
"""

from dataclasses import dataclass

import numpy as np

from . import ops
from .backbone import FeaturePyramid, PyramidGrads
from .cost_volume import CostVolume
from .nn import Conv2d, InvertedResidual, Module, Sequential
from .ops import ConfigurationError

MSCA_STRIP_KERNELS = (7, 11, 21)


@dataclass
class AggregationConfig:
    """Depth, width, and expansion plan of the three aggregation scales."""

    blocks: tuple[int, int, int]
    expansion: tuple[int, int, int]
    channels: tuple[int, int, int]
    use_msca: bool = True

    def __post_init__(self):
        for name in ("blocks", "expansion", "channels"):
            v = getattr(self, name)
            if len(v) != 3 or min(v) < 1:
                raise ConfigurationError(f"aggregation {name} needs 3 entries >= 1, got {v}")

    def validate_for(self, max_disparity_full: int) -> None:
        if self.channels[0] != max_disparity_full // 4:
            raise ConfigurationError(
                f"aggregation c4={self.channels[0]} must equal max_disparity/4="
                f"{max_disparity_full // 4}"
            )


class Msca(Module):
    """Multi-scale convolutional attention from image features.

    All branch convolutions are depthwise over the image-feature channels;
    the mixer maps the 4-branch concatenation to the cost channel count. The
    attention multiplies the cost features directly, with no squashing.
    """

    def __init__(self, c_img: int, c_cost: int, *, rng, dtype=np.float32):
        self.c_img = c_img
        self.c_cost = c_cost
        self.branch_1 = Conv2d(c_img, c_img, 1, groups=c_img, rng=rng, dtype=dtype)
        self.strips = []
        for k in MSCA_STRIP_KERNELS:
            vert = Conv2d(c_img, c_img, (k, 1), padding=((k - 1) // 2, 0),
                          groups=c_img, rng=rng, dtype=dtype)
            horz = Conv2d(c_img, c_img, (1, k), padding=(0, (k - 1) // 2),
                          groups=c_img, rng=rng, dtype=dtype)
            self.strips.append(Sequential(vert, horz))
        self.mixer = Conv2d(4 * c_img, c_cost, 1, rng=rng, dtype=dtype)

    def attention(self, image_feature: np.ndarray, training: bool):
        b0, c0 = self.branch_1.forward(image_feature, training)
        outs = [b0]
        strip_caches = [c0]
        for strip in self.strips:
            y, cache = strip.forward(image_feature, training)
            outs.append(y)
            strip_caches.append(cache)
        stacked = ops.concat_channels(outs)
        att, c_mix = self.mixer.forward(stacked, training)
        return att, (strip_caches, c_mix)

    def forward(self, image_feature: np.ndarray, cost_feature: np.ndarray,
                training: bool = False):
        if image_feature.shape[2:] != cost_feature.shape[2:]:
            raise ConfigurationError(
                f"MSCA spatial mismatch: image {image_feature.shape} vs "
                f"cost {cost_feature.shape}"
            )
        att, att_cache = self.attention(image_feature, training)
        out = ops.ewise_mul(cost_feature, att)
        return out, (att_cache, att, cost_feature)

    def backward(self, cache, grad_out: np.ndarray):
        (strip_caches, c_mix), att, cost_feature = cache
        grad_cost = grad_out * att
        grad_att = grad_out * cost_feature
        g_stacked = self.mixer.backward(c_mix, grad_att)
        parts = ops.concat_channels_backward([self.c_img] * 4, g_stacked)
        grad_img = self.branch_1.backward(strip_caches[0], parts[0])
        for strip, s_cache, g in zip(self.strips, strip_caches[1:], parts[1:]):
            grad_img = grad_img + strip.backward(s_cache, g)
        return grad_cost, grad_img


def msca(left_feature: np.ndarray, cost_feature: np.ndarray, module: Msca) -> np.ndarray:
    """Inference-mode attention application."""
    out, _ = module.forward(left_feature, cost_feature, training=False)
    return out


class Aggregator(Module):
    """Encoder-decoder over the cost volume; in and out are (n, c4, H/4, W/4)."""

    def __init__(self, config: AggregationConfig, image_channels: tuple[int, int, int],
                 *, rng, dtype=np.float32):
        c4, c8, c16 = config.channels
        t4, t8, t16 = config.expansion
        b4, b8, b16 = config.blocks
        self.config = config

        def stack(c, n_blocks, t):
            return Sequential(*[InvertedResidual(c, c, stride=1, expansion=t,
                                                 rng=rng, dtype=dtype)
                                for _ in range(n_blocks)])

        self.stage4 = stack(c4, b4, t4)
        self.down8 = InvertedResidual(c4, c8, stride=2, expansion=t8, rng=rng, dtype=dtype)
        self.stage8 = stack(c8, b8, t8)
        self.down16 = InvertedResidual(c8, c16, stride=2, expansion=t16, rng=rng, dtype=dtype)
        self.stage16 = stack(c16, b16, t16)

        if config.use_msca:
            self.msca4 = Msca(image_channels[0], c4, rng=rng, dtype=dtype)
            self.msca8 = Msca(image_channels[1], c8, rng=rng, dtype=dtype)
            self.msca16 = Msca(image_channels[2], c16, rng=rng, dtype=dtype)

        self.up8_proj = Conv2d(c16, c8, 1, rng=rng, dtype=dtype)
        self.up8_fuse = InvertedResidual(c8, c8, stride=1, expansion=t8, rng=rng, dtype=dtype)
        self.up4_proj = Conv2d(c8, c4, 1, rng=rng, dtype=dtype)
        self.up4_fuse = InvertedResidual(c4, c4, stride=1, expansion=t4, rng=rng, dtype=dtype)

    def _apply_msca(self, scale: int, image_feature, cost_feature, training):
        if not self.config.use_msca:
            return cost_feature, None
        module = getattr(self, f"msca{scale}")
        return module.forward(image_feature, cost_feature, training)

    def forward(self, volume: CostVolume, left_pyramid: FeaturePyramid,
                training: bool = False):
        x = volume.data
        if x.shape[1] != self.config.channels[0]:
            raise ConfigurationError(
                f"volume has {x.shape[1]} disparity channels, aggregator expects "
                f"{self.config.channels[0]}"
            )
        if x.shape[2:] != left_pyramid.f4.shape[2:]:
            raise ConfigurationError(
                f"volume {x.shape} is not aligned with pyramid f4 {left_pyramid.f4.shape}"
            )

        x4, c_s4 = self.stage4.forward(x, training)
        x4, c_m4 = self._apply_msca(4, left_pyramid.f4, x4, training)
        x8, c_d8 = self.down8.forward(x4, training)
        x8, c_s8 = self.stage8.forward(x8, training)
        x8, c_m8 = self._apply_msca(8, left_pyramid.f8, x8, training)
        x16, c_d16 = self.down16.forward(x8, training)
        x16, c_s16 = self.stage16.forward(x16, training)
        x16, c_m16 = self._apply_msca(16, left_pyramid.f16, x16, training)

        up8 = ops.bilinear_resize(x16, x8.shape[2], x8.shape[3])
        p8, c_p8 = self.up8_proj.forward(up8, training)
        y8, c_f8 = self.up8_fuse.forward(ops.ewise_add(p8, x8), training)

        up4 = ops.bilinear_resize(y8, x4.shape[2], x4.shape[3])
        p4, c_p4 = self.up4_proj.forward(up4, training)
        y4, c_f4 = self.up4_fuse.forward(ops.ewise_add(p4, x4), training)

        cache = (c_s4, c_m4, c_d8, c_s8, c_m8, c_d16, c_s16, c_m16,
                 c_p8, c_f8, c_p4, c_f4, x16.shape, y8.shape)
        return y4, cache

    def backward(self, cache, grad_out: np.ndarray):
        """Returns (grad_volume, PyramidGrads for the left pyramid)."""
        (c_s4, c_m4, c_d8, c_s8, c_m8, c_d16, c_s16, c_m16,
         c_p8, c_f8, c_p4, c_f4, x16_shape, y8_shape) = cache
        g_img4 = g_img8 = g_img16 = None

        g = self.up4_fuse.backward(c_f4, grad_out)
        g_x4 = g
        g_up4 = self.up4_proj.backward(c_p4, g)
        g_y8 = ops.bilinear_resize_backward(y8_shape, g_up4)

        g = self.up8_fuse.backward(c_f8, g_y8)
        g_x8 = g
        g_up8 = self.up8_proj.backward(c_p8, g)
        g_x16 = ops.bilinear_resize_backward(x16_shape, g_up8)

        if self.config.use_msca:
            g_x16, g_img16 = self.msca16.backward(c_m16, g_x16)
        g = self.stage16.backward(c_s16, g_x16)
        g = self.down16.backward(c_d16, g)
        g_x8 = g_x8 + g

        if self.config.use_msca:
            g_x8, g_img8 = self.msca8.backward(c_m8, g_x8)
        g = self.stage8.backward(c_s8, g_x8)
        g = self.down8.backward(c_d8, g)
        g_x4 = g_x4 + g

        if self.config.use_msca:
            g_x4, g_img4 = self.msca4.backward(c_m4, g_x4)
        grad_volume = self.stage4.backward(c_s4, g_x4)

        return grad_volume, PyramidGrads(f4=g_img4, f8=g_img8, f16=g_img16)


def aggregate(volume: CostVolume, left_pyramid: FeaturePyramid,
              aggregator: Aggregator) -> np.ndarray:
    """Inference-mode cost aggregation."""
    out, _ = aggregator.forward(volume, left_pyramid, training=False)
    return out
