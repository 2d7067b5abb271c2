"""Recursive residual stereo matching for rectified video."""
from .backbone import Backbone, BackboneConfig, extract_pyramid
from .datamodel import (
    ConfigError,
    DisparityMap,
    FeaturePyramid,
    FormatError,
    LossWeights,
    NumericError,
    RecSMError,
    ResidualMap,
    RSchedule,
    ScsConfig,
    ShapeError,
    StereoFrame,
    StereoSequence,
    UndefinedMetricError,
    convert_disparity_stride,
)
from .pipeline import (
    FrameResult,
    ModelConfig,
    RecSM,
    default_r_schedule,
    run_frame,
    run_sequence,
    scs_forward,
    verify_weight_sharing,
)

__version__ = "0.1.0"
