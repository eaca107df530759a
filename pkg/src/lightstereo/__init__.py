"""LightStereo: a CPU stereo-matching engine built on explicit numpy kernels.

The pipeline has four stages: shared-weight multi-scale feature extraction,
a correlation cost volume with disparity on the channel axis, inverted-
residual 2-D cost aggregation with multi-scale convolutional attention, and
soft-argmax disparity regression.
"""

from .aggregation import AggregationConfig
from .backbone import BackboneConfig, FeaturePyramid, normalize_image
from .cost_volume import CostVolume, build_correlation_volume
from .model import LightStereo, ModelConfig, build_model, infer
from .regression import DisparityMap, soft_argmax, upsample_disparity

__version__ = "0.1.0"

__all__ = [
    "AggregationConfig",
    "BackboneConfig",
    "CostVolume",
    "DisparityMap",
    "FeaturePyramid",
    "LightStereo",
    "ModelConfig",
    "build_correlation_volume",
    "build_model",
    "infer",
    "normalize_image",
    "soft_argmax",
    "upsample_disparity",
    "__version__",
]
