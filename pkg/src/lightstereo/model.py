"""Model assembly: variant table and the four-stage stereo pipeline.

Stages are exposed separately (feature extraction, cost computation, cost
aggregation, disparity regression) so profiling and complexity accounting can
attribute work per stage.
"""

from dataclasses import dataclass, field

import numpy as np

from .aggregation import AggregationConfig, Aggregator
from .backbone import Backbone, BackboneConfig, FeaturePyramid, PyramidGrads
from .cost_volume import CorrelationVolume, CostVolume
from .nn import Module
from .ops import ConfigurationError
from .regression import (
    DisparityMap,
    soft_argmax_backward,
    soft_argmax_with_cache,
    upsample_disparity_backward,
    upsample_disparity_batch,
)

# (blocks per scale, expansion per scale) for the named variants
VARIANTS = {
    "S": ((1, 2, 4), (4, 4, 4)),
    "M": ((4, 8, 14), (4, 4, 4)),
    "L": ((8, 16, 32), (8, 8, 8)),
}

STAGE_NAMES = ("feature_extraction", "cost", "cost_aggregation", "disparity_regression")


def _default_backbone():
    return BackboneConfig()


@dataclass
class ModelConfig:
    variant: str = "M"
    max_disparity: int = 192
    backbone: BackboneConfig = field(default_factory=_default_backbone)
    aggregation: AggregationConfig | None = None

    def __post_init__(self):
        if self.variant not in ("S", "M", "L", "custom"):
            raise ConfigurationError(f"unknown variant '{self.variant}'")
        if self.max_disparity % 4 or self.max_disparity < 4:
            raise ConfigurationError(
                f"max_disparity must be a positive multiple of 4, got {self.max_disparity}"
            )
        d4 = self.max_disparity // 4
        if self.aggregation is None:
            if self.variant == "custom":
                raise ConfigurationError("custom variant requires an explicit aggregation config")
            blocks, expansion = VARIANTS[self.variant]
            self.aggregation = AggregationConfig(
                blocks=blocks, expansion=expansion, channels=(d4, 2 * d4, 4 * d4)
            )
        elif self.variant != "custom":
            blocks, expansion = VARIANTS[self.variant]
            if tuple(self.aggregation.blocks) != blocks:
                raise ConfigurationError(
                    f"variant {self.variant} requires blocks {blocks}, "
                    f"got {tuple(self.aggregation.blocks)}"
                )
            if tuple(self.aggregation.expansion) != expansion:
                raise ConfigurationError(
                    f"variant {self.variant} requires expansion {expansion}, "
                    f"got {tuple(self.aggregation.expansion)}"
                )
        self.aggregation.validate_for(self.max_disparity)

    @classmethod
    def for_variant(cls, variant: str, max_disparity: int = 192,
                    use_msca: bool = True) -> "ModelConfig":
        cfg = cls(variant=variant, max_disparity=max_disparity)
        cfg.aggregation.use_msca = use_msca
        return cfg


class LightStereo(Module):
    """Correlation-volume stereo network with 2-D aggregation."""

    def __init__(self, config: ModelConfig, *, rng, dtype=np.float32):
        self.config = config
        self.backbone = Backbone(config.backbone, rng=rng, dtype=dtype)
        self.cost = CorrelationVolume(config.max_disparity)
        self.aggregation = Aggregator(
            config.aggregation, config.backbone.feature_channels, rng=rng, dtype=dtype
        )

    # ---- individual pipeline stages ----

    def features(self, image: np.ndarray) -> FeaturePyramid:
        pyramid, _ = self.backbone.forward(image, training=False)
        return pyramid

    def volume(self, left_pyramid: FeaturePyramid, right_pyramid: FeaturePyramid) -> CostVolume:
        vol, _ = self.cost.forward(left_pyramid.f4, right_pyramid.f4)
        return vol

    def aggregate(self, vol: CostVolume, left_pyramid: FeaturePyramid) -> np.ndarray:
        out, _ = self.aggregation.forward(vol, left_pyramid, training=False)
        return out

    def regress(self, aggregated: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
        quarter, _ = soft_argmax_with_cache(aggregated)
        return upsample_disparity_batch(quarter, out_h, out_w)

    # ---- end-to-end graph ----

    def forward(self, left: np.ndarray, right: np.ndarray, training: bool = False):
        if left.shape != right.shape:
            raise ConfigurationError(
                f"left/right image shapes differ: {left.shape} vs {right.shape}"
            )
        h, w = left.shape[2], left.shape[3]
        pyr_l, c_bl = self.backbone.forward(left, training)
        pyr_r, c_br = self.backbone.forward(right, training)
        vol, c_v = self.cost.forward(pyr_l.f4, pyr_r.f4)
        agg, c_a = self.aggregation.forward(vol, pyr_l, training)
        quarter, c_s = soft_argmax_with_cache(agg)
        disparity = upsample_disparity_batch(quarter, h, w)
        cache = (c_bl, c_br, pyr_l, pyr_r, c_v, c_a, c_s, quarter.shape)
        return disparity, cache

    def backward(self, cache, grad_disparity: np.ndarray) -> None:
        c_bl, c_br, pyr_l, pyr_r, c_v, c_a, c_s, quarter_shape = cache
        g_quarter = upsample_disparity_backward(quarter_shape, grad_disparity)
        g_agg = soft_argmax_backward(c_s, g_quarter)
        g_vol, g_pyr_l = self.aggregation.backward(c_a, g_agg)
        g_f4l, g_f4r = self.cost.backward(c_v, g_vol)
        g_pyr_l.f4 = g_f4l if g_pyr_l.f4 is None else g_pyr_l.f4 + g_f4l
        self.backbone.backward(c_bl, g_pyr_l, pyr_l)
        self.backbone.backward(c_br, PyramidGrads(f4=g_f4r), pyr_r)

    def infer(self, left: np.ndarray, right: np.ndarray) -> DisparityMap:
        """Single-pair inference on normalized images with /32-aligned dims."""
        disparity, _ = self.forward(left, right, training=False)
        values = disparity[0, 0]
        return DisparityMap(values=values, valid=np.ones_like(values, dtype=bool))


def build_model(config: ModelConfig, seed: int, dtype=np.float32) -> LightStereo:
    """Deterministic model construction: same seed, same weights."""
    rng = np.random.default_rng(seed)
    return LightStereo(config, rng=rng, dtype=dtype)


def infer(model: LightStereo, left: np.ndarray, right: np.ndarray) -> DisparityMap:
    return model.infer(left, right)
