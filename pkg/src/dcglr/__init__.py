"""Self-supervised point-cloud representation learning by teacher-student distillation.

Modules: ``autodiff`` (reverse-mode tape), ``geometry`` (sampling and crops),
``backbone`` (3D-ViT), ``train`` (distillation loop), ``data`` (synthetic
shapes, OFF, PCB1), ``evaluate`` (probe, spectrum, attention export), ``cli``.
"""

from .backbone import BackboneConfig, ModelParams, forward, init_params
from .data import Dataset, synth_dataset
from .evaluate import extract_features, linear_probe, spectrum
from .train import TrainConfig, TrainState, pretrain

__all__ = ["BackboneConfig", "ModelParams", "forward", "init_params", "Dataset", "synth_dataset",
           "extract_features", "linear_probe", "spectrum", "TrainConfig", "TrainState", "pretrain"]
__version__ = "0.1.0"
