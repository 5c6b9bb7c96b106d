"""Few-exemplar promptable segmentation with frequency and multi-scale adapters on a frozen encoder."""

__version__ = "0.1.0"

from .backbone import PROFILES, EncoderConfig, ImageEncoder  # noqa: E402
from .model import ModelConfig, SegModel, build_model  # noqa: E402
from .training import TrainConfig, train  # noqa: E402
from .metrics import evaluate  # noqa: E402

__all__ = ["PROFILES", "EncoderConfig", "ImageEncoder", "ModelConfig", "SegModel", "build_model",
           "TrainConfig", "train", "evaluate", "__version__"]
