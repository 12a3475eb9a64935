"""Dual-branch chest-radiograph classifier with gradient-based attention.

A classification branch (residual bottleneck backbone) and an attention
branch that turns the classifier's own gradients into per-class spatial
saliency maps, trained in three phases and fused at prediction time.
Everything runs on numpy via a small reverse-mode autodiff engine.
"""

from .attention import AttentionBranch, AttentionConfig, channel_gradients, gradcam
from .backbone import Backbone, BackboneConfig, LabelVector, classify
from .checkpoint import load_checkpoint, save_checkpoint
from .config import RunConfig
from .data import (Dataset, Sample, SynthConfig, generate_synthetic,
                   load_dataset_dir, load_manifest, patient_split)
from .engine import Graph, GradientStore, Tensor, backward, grad_wrt, record, tensor
from .errors import (CamnetError, CheckpointError, ConfigError, GenerationError,
                     GraphError, ManifestError, ShapeError, TrainingDiverged,
                     UndefinedCurveError)
from .metrics import EvalReport, auc, diagnose, evaluate, roc_curve
from .model import DualBranchModel, ForwardResult, fuse
from .training import MomentumSGD, TrainConfig, run_protocol, train_phase

__version__ = "0.1.0"

__all__ = [
    "AttentionBranch", "AttentionConfig", "Backbone", "BackboneConfig",
    "CamnetError", "CheckpointError", "ConfigError", "Dataset",
    "DualBranchModel", "EvalReport", "ForwardResult", "GenerationError",
    "GradientStore", "Graph", "GraphError", "LabelVector", "ManifestError",
    "MomentumSGD", "RunConfig", "Sample", "ShapeError", "SynthConfig",
    "Tensor", "TrainConfig", "TrainingDiverged", "UndefinedCurveError",
    "auc", "backward", "channel_gradients", "classify", "diagnose",
    "evaluate", "fuse", "generate_synthetic", "grad_wrt", "gradcam",
    "load_checkpoint", "load_dataset_dir", "load_manifest", "patient_split",
    "record", "roc_curve", "run_protocol", "save_checkpoint", "tensor",
    "train_phase",
]
