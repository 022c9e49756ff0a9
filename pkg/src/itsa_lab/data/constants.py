"""Constants and enums shared across the laboratory."""

from enum import Enum


class Suite(str, Enum):
    """Experiment suites dispatched by the harness."""

    DIGIT = "digit"
    STEREO = "stereo"
    FISHER = "fisher"
    GRADCHECK = "gradcheck"


class Method(str, Enum):
    """Training methods of the digit benchmark."""

    ERM = "erm"
    IB = "ib"
    RIB = "rib"
    ITSA = "itsa"


class StereoMethod(str, Enum):
    """Training methods of the stereo pipeline."""

    BASELINE = "baseline"
    SCP_ONLY = "scp_only"
    ITSA = "itsa"


class ShiftKind(str, Enum):
    """Evaluation-time domain shifts applied to stereo samples."""

    CLEAN = "clean"
    ACJ = "acj"
    GRAY_LEFT = "gray_left"
    GRAY_RIGHT = "gray_right"
    SCP = "scp"
    FOG = "fog"
    NIGHT = "night"


class TextureKind(str, Enum):
    """Procedural textures painted on scene layers."""

    FLAT = "flat"
    GRADIENT = "gradient"
    CHECKER = "checker"
    NOISE = "noise"


class Reduction(str, Enum):
    """Batch reduction of the Fisher surrogate loss."""

    MEAN = "mean"
    SUM = "sum"


class Scalarization(str, Enum):
    """How the tensor-valued feature map is reduced before the input gradient."""

    SUM = "sum"  # all-ones cotangent
    SQUARED_NORM = "squared_norm"  # cotangent z, gradient of 0.5 * ||z||^2


class DigitSource(str, Enum):
    """Where source-domain digits come from."""

    MNIST = "mnist"
    GLYPHS = "glyphs"


class Split(str, Enum):
    """Split tags used in metrics records."""

    TRAIN = "train"
    VAL = "val"
    SOURCE_TEST = "source_test"
    TARGET_TEST = "target_test"


IDX_IMAGE_MAGIC = 0x00000803
IDX_LABEL_MAGIC = 0x00000801

METRICS_HEADER = ("run_id", "method", "seed", "epoch", "split", "metric", "value")

NUM_CLASSES = 10
LEAKY_SLOPE = 0.01
