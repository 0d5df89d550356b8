"""Connectome classification with a transformer encoder over
functional-connectivity tokens and a mixture of pooling-classifier experts.
"""

from . import data, gradcheck, interpret, model, numerics, plots, training
from .data import ConnectomeDataset, Subject, load_dataset, save_dataset, stratified_split, synth_generate
from .interpret import InterpretReport, build_report, emit_report
from .model import ForwardResult, ModelConfig, ModelParams, forward, init_params, load_checkpoint, save_checkpoint
from .numerics import AdamState, ShapeError, Tape, Tensor, adam_step, backward
from .training import Metrics, TrainConfig, auroc, compute_metrics, evaluate, train

__version__ = "0.1.0"

__all__ = [
    "data",
    "gradcheck",
    "interpret",
    "model",
    "numerics",
    "plots",
    "training",
    "ConnectomeDataset",
    "Subject",
    "load_dataset",
    "save_dataset",
    "stratified_split",
    "synth_generate",
    "InterpretReport",
    "build_report",
    "emit_report",
    "ForwardResult",
    "ModelConfig",
    "ModelParams",
    "forward",
    "init_params",
    "load_checkpoint",
    "save_checkpoint",
    "AdamState",
    "ShapeError",
    "Tape",
    "Tensor",
    "adam_step",
    "backward",
    "Metrics",
    "TrainConfig",
    "auroc",
    "compute_metrics",
    "evaluate",
    "train",
    "__version__",
]
