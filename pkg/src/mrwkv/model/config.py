"""Model hyperparameters.

The defaults are the shipped preset: 12 layers, 384-wide, head size 64,
1344-wide feedforward, 16000-token vocabulary, and the low-rank gate
widths that put the full model at 38,414,976 parameters.
"""

from __future__ import annotations

from dataclasses import dataclass


@dataclass(frozen=True)
class ModelConfig:
    n_layers: int = 12
    d_model: int = 384
    head_size: int = 64
    d_ffn: int = 1344
    vocab_size: int = 16000
    decay_rank: int = 160
    iclr_rank: int = 160
    value_rank: int = 80
    gate_rank: int = 320

    def __post_init__(self) -> None:
        if self.d_model % self.head_size:
            raise ValueError(
                f"d_model {self.d_model} not divisible by head size {self.head_size}"
            )
        for field in (
            "n_layers", "d_model", "head_size", "d_ffn", "vocab_size",
            "decay_rank", "iclr_rank", "value_rank", "gate_rank",
        ):
            if getattr(self, field) < 1:
                raise ValueError(f"{field} must be positive")

    @property
    def n_heads(self) -> int:
        return self.d_model // self.head_size

    def to_json_dict(self) -> dict:
        return {
            "n_layers": self.n_layers,
            "d_model": self.d_model,
            "head_size": self.head_size,
            "d_ffn": self.d_ffn,
            "vocab_size": self.vocab_size,
            "decay_rank": self.decay_rank,
            "iclr_rank": self.iclr_rank,
            "value_rank": self.value_rank,
            "gate_rank": self.gate_rank,
        }

    @classmethod
    def from_json_dict(cls, data: dict) -> "ModelConfig":
        return cls(**{k: int(v) for k, v in data.items()})
