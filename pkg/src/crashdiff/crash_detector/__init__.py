"""Crash decisions from generated ensembles."""

from .features import (
    ExtractorConfig,
    ExtractorError,
    FeatureExtractor,
    MidBlockExtractor,
    extract_features,
    reconstruction_error,
    train_feature_extractor,
)
from .index import (
    CrashIndexSeries,
    DetectionReport,
    DetectorConfig,
    DetectorError,
    calibrate_threshold,
    crash_index,
    default_lambda,
    detect,
    detection_report,
    eval_generation,
)
