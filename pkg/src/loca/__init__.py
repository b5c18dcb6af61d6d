"""Location-aware self-supervised pretraining, desk scale.

Patch tokens of small query views predict (a) their cluster assignment
against prototypes, supervised by a momentum teacher over a large
reference view of the same image, and (b) their relative position in
the reference grid, through a single cross-attention block with most
reference tokens masked.
"""

from .augment import AugmentConfig, AugmentationRecord, View
from .config import PRESETS, RunConfig, parse_config
from .correspond import Correspondence, correspondence_nearest, correspondence_oracle
from .datagen import LabeledImage, SceneSpec, build_corpus
from .model import ModelParams, ViTConfig, init_params
from .tensor import Tape, Tensor, backward, finite_difference_check
from .trainer import TrainConfig, TrainState, run_pretraining

__version__ = "0.1.0"

__all__ = [
    "AugmentConfig",
    "AugmentationRecord",
    "View",
    "PRESETS",
    "RunConfig",
    "parse_config",
    "Correspondence",
    "correspondence_nearest",
    "correspondence_oracle",
    "LabeledImage",
    "SceneSpec",
    "build_corpus",
    "ModelParams",
    "ViTConfig",
    "init_params",
    "Tape",
    "Tensor",
    "backward",
    "finite_difference_check",
    "TrainConfig",
    "TrainState",
    "run_pretraining",
    "__version__",
]
