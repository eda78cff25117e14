"""Volumetric dual-lumen vessel segmentation on a small numpy autodiff engine."""

from .model import ModelConfig, SegModel, build_model, forward, predict_volume
from .phantom import PhantomSpec, VolumeSample, gen_dataset, gen_phantom
from .tensor import Tensor, backward, no_grad
from .train import TrainConfig, train

__all__ = [
    "ModelConfig", "SegModel", "build_model", "forward", "predict_volume",
    "PhantomSpec", "VolumeSample", "gen_dataset", "gen_phantom",
    "Tensor", "backward", "no_grad", "TrainConfig", "train",
]
__version__ = "0.1.0"
