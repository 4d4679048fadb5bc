"""Lipschitz-constrained vector-quantised action tokenizers and a desk-scale
in-context imitation harness, on a small numpy autodiff engine."""

from .autodiff import DimensionError, Tensor, TrainingError, no_grad
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .env import Episode, ToyEnvState, read_dataset, scripted_expert, synth_dataset, write_dataset
from .layers import LipschitzLinear, MLPStack, lipschitz_normalize, network_lipschitz_bound
from .policy import CausalPolicy, build_sequence, rollout_in_context, train_policy
from .quantizers import Codebook, lfq_quantize, vq_lookup
from .smoothness import compare_tokenizers, least_energy_score, project_2d
from .tokenizers import ActionTokenizer, TokenizerConfig, total_loss

__all__ = [
    "ActionTokenizer", "CausalPolicy", "CheckpointError", "Codebook", "DimensionError", "Episode",
    "LipschitzLinear", "MLPStack", "Tensor", "TokenizerConfig", "ToyEnvState", "TrainingError",
    "build_sequence", "compare_tokenizers", "lfq_quantize", "least_energy_score", "lipschitz_normalize",
    "load_checkpoint", "network_lipschitz_bound", "no_grad", "project_2d", "read_dataset",
    "rollout_in_context", "save_checkpoint", "scripted_expert", "synth_dataset", "total_loss",
    "train_policy", "vq_lookup", "write_dataset",
]

__version__ = "0.1.0"
