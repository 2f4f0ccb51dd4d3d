"""Linear and attention probes over frozen-encoder layer embeddings."""

from .bank import (BankError, BankManifest, EmbeddingBank, LayerSpec, SynthSpec, read_bank, synth_bank,
                   validate_bank, write_bank)
from .estimator import ProbeClassifier, check_layers
from .metrics import EvalReport, average_precision, evaluate, macro_map, top1_accuracy
from .models import ProbeModel, count_parameters, forward, init_probe
from .training import TrainConfig, checkpoint, lr_at, restore, train

__version__ = "0.1.0"

__all__ = [
    "BankError", "BankManifest", "EmbeddingBank", "EvalReport", "LayerSpec", "ProbeClassifier", "ProbeModel",
    "SynthSpec", "TrainConfig", "average_precision", "check_layers", "checkpoint", "count_parameters", "evaluate",
    "forward", "init_probe", "lr_at", "macro_map", "read_bank", "restore", "synth_bank", "top1_accuracy", "train",
    "validate_bank", "write_bank",
]
