"""Multi-scale feature extractor shared by the left and right images.

A reduced MobileNetV2-style encoder produces features at 1/4, 1/8, 1/16 and
1/32 resolution; a lightweight decoder walks back up with bilinear x2
upsampling, 1x1 projection onto the encoder skip, addition, and a depthwise
3x3 + pointwise 1x1 fusion pair.
"""

from dataclasses import dataclass

import numpy as np

from . import ops
from .nn import Conv2d, InvertedResidual, Module, Sequential, conv_bn_act
from .ops import ConfigurationError

# Fixed normalization constants for RGB inputs scaled to [0, 1]; the same
# constants must be applied at training and inference time.
IMAGE_MEAN = np.array([0.485, 0.456, 0.406], dtype=np.float32)
IMAGE_STD = np.array([0.229, 0.224, 0.225], dtype=np.float32)

STEM_CHANNELS = 16


def normalize_image(image: np.ndarray) -> np.ndarray:
    """Standardize a (3, h, w) or (n, 3, h, w) RGB image in [0, 1]."""
    image = np.asarray(image, dtype=np.float32)
    shape = (3, 1, 1) if image.ndim == 3 else (1, 3, 1, 1)
    return (image - IMAGE_MEAN.reshape(shape)) / IMAGE_STD.reshape(shape)


@dataclass
class BackboneConfig:
    """Channel / depth plan of the encoder and decoder.

    stage_channels and stage_block_counts describe the four encoder stages at
    strides 4, 8, 16, 32; decoder_channels are the output widths at strides
    16, 8, 4. Defaults are sized so the three model variants land near their
    reference parameter and FLOP budgets.
    """

    stage_channels: tuple[int, int, int, int] = (32, 64, 96, 160)
    stage_block_counts: tuple[int, int, int, int] = (3, 4, 6, 3)
    expansion: int = 6
    decoder_channels: tuple[int, int, int] = (96, 64, 48)
    input_channels: int = 3

    def __post_init__(self):
        if len(self.stage_channels) != 4 or len(self.stage_block_counts) != 4:
            raise ConfigurationError("backbone needs 4 stage channel/block entries")
        if len(self.decoder_channels) != 3:
            raise ConfigurationError("backbone needs 3 decoder channel entries")
        if min(self.stage_channels) < 1 or min(self.stage_block_counts) < 1:
            raise ConfigurationError("backbone stage counts must be >= 1")
        if self.expansion < 1:
            raise ConfigurationError("backbone expansion must be >= 1")
        if list(self.stage_channels) != sorted(self.stage_channels):
            raise ConfigurationError("stage_channels must be nondecreasing")

    @property
    def feature_channels(self) -> tuple[int, int, int]:
        """Channels of the decoder outputs at strides 4, 8, 16."""
        return self.decoder_channels[2], self.decoder_channels[1], self.decoder_channels[0]


@dataclass
class FeaturePyramid:
    """Decoder features at strides 4/8/16 plus the raw stride-32 output."""

    f4: np.ndarray
    f8: np.ndarray
    f16: np.ndarray
    raw32: np.ndarray


@dataclass
class PyramidGrads:
    """Gradient slots matching FeaturePyramid; missing entries mean zero."""

    f4: np.ndarray | None = None
    f8: np.ndarray | None = None
    f16: np.ndarray | None = None
    raw32: np.ndarray | None = None


def _grad_or_zeros(g, like):
    return np.zeros_like(like) if g is None else g


class _DecoderLevel(Module):
    """x2 upsample deeper feature, project to skip width, add, dw+pw fuse."""

    def __init__(self, c_deep: int, c_skip: int, c_out: int, *, rng, dtype):
        self.c_skip = c_skip
        self.project = Conv2d(c_deep, c_skip, 1, rng=rng, dtype=dtype)
        self.fuse_dw = conv_bn_act(c_skip, c_skip, 3, padding=1, groups=c_skip,
                                   rng=rng, dtype=dtype)
        self.fuse_pw = conv_bn_act(c_skip, c_out, 1, rng=rng, dtype=dtype)

    def forward(self, deep: np.ndarray, skip: np.ndarray, training: bool):
        n, c, h, w = deep.shape
        up = ops.bilinear_resize(deep, skip.shape[2], skip.shape[3])
        proj, c_proj = self.project.forward(up, training)
        merged = ops.ewise_add(proj, skip)
        y, c_dw = self.fuse_dw.forward(merged, training)
        y, c_pw = self.fuse_pw.forward(y, training)
        return y, (deep.shape, c_proj, c_dw, c_pw)

    def backward(self, cache, grad_out: np.ndarray):
        deep_shape, c_proj, c_dw, c_pw = cache
        g = self.fuse_pw.backward(c_pw, grad_out)
        g = self.fuse_dw.backward(c_dw, g)
        g_skip = g
        g_up = self.project.backward(c_proj, g)
        g_deep = ops.bilinear_resize_backward(deep_shape, g_up)
        return g_deep, g_skip


class Backbone(Module):
    """Weight-shared feature extractor; forward is a pure function of input."""

    def __init__(self, config: BackboneConfig, *, rng, dtype=np.float32):
        self.config = config
        c = config.stage_channels
        t = config.expansion
        self.stem = Sequential(
            conv_bn_act(config.input_channels, STEM_CHANNELS, 3, stride=2, padding=1,
                        rng=rng, dtype=dtype),
            conv_bn_act(STEM_CHANNELS, STEM_CHANNELS, 3, stride=1, padding=1,
                        rng=rng, dtype=dtype),
        )
        self.stages = []
        c_prev = STEM_CHANNELS
        for c_stage, n_blocks in zip(c, config.stage_block_counts):
            blocks = [InvertedResidual(c_prev, c_stage, stride=2, expansion=t,
                                       rng=rng, dtype=dtype)]
            blocks += [InvertedResidual(c_stage, c_stage, stride=1, expansion=t,
                                        rng=rng, dtype=dtype) for _ in range(n_blocks - 1)]
            self.stages.append(Sequential(*blocks))
            c_prev = c_stage
        d16, d8, d4 = config.decoder_channels
        self.decode16 = _DecoderLevel(c[3], c[2], d16, rng=rng, dtype=dtype)
        self.decode8 = _DecoderLevel(d16, c[1], d8, rng=rng, dtype=dtype)
        self.decode4 = _DecoderLevel(d8, c[0], d4, rng=rng, dtype=dtype)

    def forward(self, image: np.ndarray, training: bool = False):
        image = ops.check_nchw(image, "image")
        n, c, h, w = image.shape
        if c != self.config.input_channels:
            raise ConfigurationError(f"expected {self.config.input_channels}-channel input, got {c}")
        if h % 32 or w % 32:
            raise ConfigurationError(f"input dims must be divisible by 32, got {h}x{w}")
        x, c_stem = self.stem.forward(image, training)
        enc = []
        stage_caches = []
        for stage in self.stages:
            x, cache = stage.forward(x, training)
            enc.append(x)
            stage_caches.append(cache)
        e4, e8, e16, raw32 = enc
        f16, c16 = self.decode16.forward(raw32, e16, training)
        f8, c8 = self.decode8.forward(f16, e8, training)
        f4, c4 = self.decode4.forward(f8, e4, training)
        pyramid = FeaturePyramid(f4=f4, f8=f8, f16=f16, raw32=raw32)
        cache = (c_stem, stage_caches, c16, c8, c4)
        return pyramid, cache

    def backward(self, cache, grads: PyramidGrads, pyramid: FeaturePyramid) -> None:
        c_stem, stage_caches, c16, c8, c4 = cache
        g_f4 = _grad_or_zeros(grads.f4, pyramid.f4)
        g_f8 = _grad_or_zeros(grads.f8, pyramid.f8)
        g_f16 = _grad_or_zeros(grads.f16, pyramid.f16)
        g_raw32 = _grad_or_zeros(grads.raw32, pyramid.raw32)

        g_d8, g_e4 = self.decode4.backward(c4, g_f4)
        g_f8 = g_f8 + g_d8
        g_d16, g_e8 = self.decode8.backward(c8, g_f8)
        g_f16 = g_f16 + g_d16
        g_r32, g_e16 = self.decode16.backward(c16, g_f16)
        g_raw32 = g_raw32 + g_r32

        g = self.stages[3].backward(stage_caches[3], g_raw32)
        g = g + g_e16
        g = self.stages[2].backward(stage_caches[2], g)
        g = g + g_e8
        g = self.stages[1].backward(stage_caches[1], g)
        g = g + g_e4
        g = self.stages[0].backward(stage_caches[0], g)
        self.stem.backward(c_stem, g)


def build_backbone(config: BackboneConfig, seed: int, dtype=np.float32) -> Backbone:
    """Construct a backbone with deterministic variance-scaling init."""
    rng = np.random.default_rng(seed)
    return Backbone(config, rng=rng, dtype=dtype)


def extract_features(backbone: Backbone, image: np.ndarray) -> FeaturePyramid:
    """Inference-mode feature extraction."""
    pyramid, _ = backbone.forward(image, training=False)
    return pyramid
