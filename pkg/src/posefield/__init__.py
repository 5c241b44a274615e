"""Animatable human radiance fields from a handful of posed images, on numpy."""

from .body import Pose, Skeleton, humanoid12, smpl24
from .model import ModelConfig, Observation, PoseFieldModel
from .training import TrainConfig, Trainer

__all__ = ["ModelConfig", "Observation", "Pose", "PoseFieldModel", "Skeleton", "TrainConfig", "Trainer",
           "humanoid12", "smpl24"]
__version__ = "0.1.0"
