"""Single-view articulated mesh reconstruction.

Deforms a canonical sphere per image, articulates it with skeleton-free
linear blend skinning, textures and renders it differentiably, and trains
the whole pipeline by analysis-by-synthesis with a cross-instance swap loss
and silhouette-balanced batch sampling.
"""

__version__ = "0.1.0"

from . import autodiff
from .config import LossWeights, ModelConfig, RenderConfig, TrainConfig

__all__ = ["autodiff", "LossWeights", "ModelConfig", "RenderConfig",
           "TrainConfig", "__version__"]
