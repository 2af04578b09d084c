"""Multimodal graph recommender: gated image/text item fusion with light graph
convolution over users, trained with BCE and sampled negatives."""
from .config import TrainConfig
from .evaluation import EvalReport, evaluate
from .graph import BipartiteGraph, build_graph, propagate, propagate_adjoint
from .ingest import SplitDataset, preprocess, synth_generate
from .model import ModelParams, ScoringMode, init_params
from .train import Checkpoint, fit, load_checkpoint, save_checkpoint

__version__ = "0.1.0"

__all__ = [
    "BipartiteGraph", "Checkpoint", "EvalReport", "ModelParams", "ScoringMode", "SplitDataset",
    "TrainConfig", "build_graph", "evaluate", "fit", "init_params", "load_checkpoint", "preprocess",
    "propagate", "propagate_adjoint", "save_checkpoint", "synth_generate",
]
