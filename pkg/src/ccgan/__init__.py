"""Class-conditioned cycle-consistent GAN for virtual re-staining of histology patches."""

from .core import (
    ConfigError,
    Direction,
    ExperimentConfig,
    LabeledPatch,
    LossWeights,
    StainDomain,
    TissueClass,
    config_from_dict,
    load_config,
)
from .networks import ModelBundle, build_bundle, load_checkpoint, save_checkpoint

__version__ = "0.1.0"

__all__ = [
    "ConfigError",
    "Direction",
    "ExperimentConfig",
    "LabeledPatch",
    "LossWeights",
    "ModelBundle",
    "StainDomain",
    "TissueClass",
    "build_bundle",
    "config_from_dict",
    "load_checkpoint",
    "load_config",
    "save_checkpoint",
]
