"""RWKV-7 sequence model: configuration, network, loss, adapters,
checkpoints."""

from .checkpoint import (
    CheckpointError,
    load_initial_state,
    load_lora,
    load_model,
    load_tensors,
    save_initial_state,
    save_lora,
    save_model,
    save_tensors,
)
from .config import ModelConfig
from .lora import LoraAdapter, LoraLinear, apply_lora, remove_lora
from .loss import loss_and_grads, sequence_loss, span_mask
from .rwkv7 import (
    RWKV7,
    InitialState,
    ModelState,
    count_trainable,
    lora_target_shapes,
    zero_state,
)

__all__ = [
    "CheckpointError",
    "InitialState",
    "LoraAdapter",
    "LoraLinear",
    "ModelConfig",
    "ModelState",
    "RWKV7",
    "apply_lora",
    "count_trainable",
    "load_initial_state",
    "load_lora",
    "load_model",
    "load_tensors",
    "lora_target_shapes",
    "loss_and_grads",
    "remove_lora",
    "save_initial_state",
    "save_lora",
    "save_model",
    "save_tensors",
    "sequence_loss",
    "span_mask",
    "zero_state",
]
