from .model import Classifier, ConvSpec, ModelConfig, grad_input, layer_capture
from .tensor import Tensor
from .train import TrainConfig, TrainingDiverged, train

__all__ = [
    "Classifier", "ConvSpec", "ModelConfig", "Tensor", "TrainConfig",
    "TrainingDiverged", "grad_input", "layer_capture", "train",
]
