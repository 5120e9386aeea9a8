"""Delayed-bottlenecking pre-training for small graph neural networks.

Pre-training pairs a masked-view contrastive objective with a
reconstruction term that keeps representations informative; fine-tuning
transfers the encoder and adds a variational compression head whose KL
weight re-introduces the bottleneck under label guidance.  Everything
runs on a self-contained float64 reverse-mode autodiff engine.
"""

from .config import ExperimentConfig, dumps_config, load_config, parse_config
from .encoder import EncoderConfig, encode, readout_mean
from .finetune import run_finetuning, transfer_parameters
from .graphs import (
    DatasetSpec, Graph, GraphSchema, MaskedGraph, MotifSpec,
    generate_synthetic_dataset, load_dataset, mask_graph, save_dataset,
    split_dataset,
)
from .metrics import estimate_epoch_mi, mutual_information_discrete, roc_auc
from .pretrain import run_pretraining

__all__ = [
    "DatasetSpec", "EncoderConfig", "ExperimentConfig", "Graph", "GraphSchema",
    "MaskedGraph", "MotifSpec", "dumps_config", "encode",
    "estimate_epoch_mi", "generate_synthetic_dataset", "load_config",
    "load_dataset", "mask_graph", "mutual_information_discrete",
    "parse_config", "readout_mean", "roc_auc", "run_finetuning",
    "run_pretraining", "save_dataset", "split_dataset",
    "transfer_parameters",
]

__version__ = "0.1.0"
