"""Low-rank adapters over the model's linear projections.

Each target weight W gains a delta (alpha/rank) * A @ B in the input
convention, with B zero-initialized so a freshly attached adapter is an
exact no-op. Adapters serialize separately from the base model.
"""

from __future__ import annotations

import math

import torch
from torch import Tensor, nn

from .rwkv7 import RWKV7, lora_target_shapes


class LoraLinear(nn.Module):
    def __init__(self, base: nn.Linear, rank: int, alpha: float) -> None:
        super().__init__()
        if rank < 1:
            raise ValueError("rank must be positive")
        self.base = base
        self.rank = rank
        self.alpha = float(alpha)
        kw = {"dtype": base.weight.dtype, "device": base.weight.device}
        self.lora_a = nn.Parameter(torch.empty(base.in_features, rank, **kw))
        self.lora_b = nn.Parameter(torch.zeros(rank, base.out_features, **kw))
        nn.init.kaiming_uniform_(self.lora_a, a=math.sqrt(5))

    def forward(self, x: Tensor) -> Tensor:
        return self.base(x) + (x @ self.lora_a @ self.lora_b) * (self.alpha / self.rank)


class LoraAdapter:
    """Handle over the LoraLinear modules attached to one model."""

    def __init__(self, rank: int, alpha: float, layers: dict[str, LoraLinear]) -> None:
        self.rank = rank
        self.alpha = float(alpha)
        self.layers = layers

    def parameters(self) -> list[nn.Parameter]:
        return [param for _, param in self.named_parameters()]

    def named_parameters(self) -> list[tuple[str, nn.Parameter]]:
        out: list[tuple[str, nn.Parameter]] = []
        for name, mod in self.layers.items():
            out.append((f"{name}.a", mod.lora_a))
            out.append((f"{name}.b", mod.lora_b))
        return out

    def trainable_count(self) -> int:
        return sum(p.numel() for p in self.parameters())

    def tensors(self) -> dict[str, Tensor]:
        out = {}
        for name, mod in self.layers.items():
            out[f"{name}.a"] = mod.lora_a.detach()
            out[f"{name}.b"] = mod.lora_b.detach()
        return out

    def load_tensors(self, tensors: dict[str, Tensor]) -> None:
        with torch.no_grad():
            for name, mod in self.layers.items():
                mod.lora_a.copy_(tensors[f"{name}.a"])
                mod.lora_b.copy_(tensors[f"{name}.b"])


def _target_parent(model: RWKV7, qualified: str) -> tuple[nn.Module, str]:
    parts = qualified.split(".")
    mod: nn.Module = model
    for p in parts[:-1]:
        mod = getattr(mod, p) if not p.isdigit() else mod[int(p)]
    return mod, parts[-1]


def apply_lora(
    model: RWKV7, rank: int, alpha: float, *, seed: int | None = None
) -> LoraAdapter:
    """Wrap every adapter target in place and return the handle."""
    layers: dict[str, LoraLinear] = {}

    def build() -> None:
        for qualified, _m, _n in lora_target_shapes(model.cfg):
            parent, attr = _target_parent(model, qualified)
            base = getattr(parent, attr)
            if isinstance(base, LoraLinear):
                raise ValueError(f"{qualified} already has an adapter attached")
            wrapped = LoraLinear(base, rank, alpha)
            setattr(parent, attr, wrapped)
            layers[qualified] = wrapped

    if seed is None:
        build()
    else:
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(seed)
            build()
    return LoraAdapter(rank, alpha, layers)


def remove_lora(model: RWKV7) -> None:
    """Unwrap all adapters, restoring the base projections."""
    for qualified, _m, _n in lora_target_shapes(model.cfg):
        parent, attr = _target_parent(model, qualified)
        mod = getattr(parent, attr)
        if isinstance(mod, LoraLinear):
            setattr(parent, attr, mod.base)
