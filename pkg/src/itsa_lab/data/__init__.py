"""Shared enums and domain types."""

from .constants import (
    DigitSource,
    Method,
    Reduction,
    Scalarization,
    ShiftKind,
    StereoMethod,
    Suite,
    TextureKind,
)
from .domains import (
    DigitRunConfig,
    FisherEstimate,
    GradCheckReport,
    IbConfig,
    LabeledImageSet,
    Lemma1Report,
    MetricsRecord,
    PerturbedPair,
    SceneConfig,
    SceneLayer,
    ScpConfig,
    StereoRunConfig,
    StereoSample,
)

__all__ = [
    "DigitRunConfig",
    "DigitSource",
    "FisherEstimate",
    "GradCheckReport",
    "IbConfig",
    "LabeledImageSet",
    "Lemma1Report",
    "Method",
    "MetricsRecord",
    "PerturbedPair",
    "Reduction",
    "Scalarization",
    "SceneConfig",
    "SceneLayer",
    "ScpConfig",
    "ShiftKind",
    "StereoMethod",
    "StereoRunConfig",
    "StereoSample",
    "Suite",
    "TextureKind",
]
