"""Desk-scale laboratory for self-attention patch restructuring transfer attacks."""

from .attacks import AdversarialExample, AttackConfig, attack_batch, attack_dataset, run_attack
from .models import CNNModel, MLPModel, ViTConfig, ViTModel, cross_entropy_loss, vit_forward
from .sapr import RestructurePolicy, restructure, sample_gates
from .tensor import Tensor, backward

__version__ = "0.1.0"

__all__ = [
    "AdversarialExample",
    "AttackConfig",
    "CNNModel",
    "MLPModel",
    "RestructurePolicy",
    "Tensor",
    "ViTConfig",
    "ViTModel",
    "attack_batch",
    "attack_dataset",
    "backward",
    "cross_entropy_loss",
    "restructure",
    "run_attack",
    "sample_gates",
    "vit_forward",
]
