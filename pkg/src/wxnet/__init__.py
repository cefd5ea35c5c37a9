"""Step-wise multi-label weather recognition with ConvLSTM and channel attention, in plain numpy."""

from .backbone import BackboneConfig, BackboneParams, extract_features, stage1_logits
from .cooccurrence import analyze, cooccurrence_matrix, label_order
from .dataio import load_checkpoint, load_dataset, load_manifest, save_checkpoint, synth_dataset
from .metrics import evaluate
from .model import LabelOrder, ModelConfig, WeatherModel, predict_labels, rollout
from .tensor import GradTape, Tensor
from .train import TrainConfig, train_stage1, train_stage2

__version__ = "0.1.0"

__all__ = [
    "BackboneConfig", "BackboneParams", "extract_features", "stage1_logits",
    "analyze", "cooccurrence_matrix", "label_order",
    "load_checkpoint", "load_dataset", "load_manifest", "save_checkpoint", "synth_dataset",
    "evaluate",
    "LabelOrder", "ModelConfig", "WeatherModel", "predict_labels", "rollout",
    "GradTape", "Tensor",
    "TrainConfig", "train_stage1", "train_stage2",
]
