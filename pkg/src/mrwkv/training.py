"""Optimization loops: pretraining, initial-state tuning, LoRA finetuning.

All three modes share one engine: batches of variable-length examples are
end-padded (padding never reaches the loss because the span mask sits left
of it), the optimizer only ever holds the tensors the mode is allowed to
move, and everything else is frozen for the duration of the run so the
freeze contracts hold bitwise.
"""

from __future__ import annotations

import hashlib
import json
import math
import random
import time
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Callable, Iterable, Iterator, Protocol, Sequence

import torch
from torch import nn

from .midi_io import Score
from .model import (
    InitialState,
    LoraAdapter,
    RWKV7,
    apply_lora,
    sequence_loss,
)
from .prompt import (
    ExampleRejected,
    TrainingExample,
    corpus_filter,
    make_training_example,
    substream_rng,
)
from .tokenizer import Vocabulary, encode_score

__all__ = [
    "TrainConfig",
    "TrainResult",
    "TrainingDiverged",
    "ExampleSource",
    "CorpusSource",
    "FixedSource",
    "default_train_config",
    "evaluate_loss",
    "pretrain",
    "state_tune",
    "lora_tune",
    "parameter_fingerprint",
]

MODES = ("pretrain", "state", "lora")


class TrainingDiverged(RuntimeError):
    """Loss became non-finite; the trained object was restored to the last
    state that completed a full epoch."""

    def __init__(self, message: str, *, steps: int, epochs_completed: int):
        super().__init__(message)
        self.steps = steps
        self.epochs_completed = epochs_completed


@dataclass(frozen=True)
class TrainConfig:
    mode: str = "pretrain"
    lr: float = 1e-4
    weight_decay: float = 0.1
    epochs: int = 24
    batch_size: int = 16
    seq_len: int = 2048
    seed: int = 42
    time_budget: float | None = None
    # grad_clip None = mode default (1.0 for state tuning, off otherwise);
    # 0.0 disables explicitly
    grad_clip: float | None = None
    rank: int = 32
    alpha: float = 32.0

    def __post_init__(self) -> None:
        if self.mode not in MODES:
            raise ValueError(f"unknown training mode {self.mode!r}")
        if not self.lr > 0:
            raise ValueError("lr must be positive")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be non-negative")
        if self.epochs < 0:
            raise ValueError("epochs must be non-negative")
        if self.batch_size < 1:
            raise ValueError("batch_size must be at least 1")
        if self.seq_len < 2:
            raise ValueError("seq_len must be at least 2")
        if self.time_budget is not None and self.time_budget < 0:
            raise ValueError("time_budget must be non-negative")
        if self.grad_clip is not None and self.grad_clip < 0:
            raise ValueError("grad_clip must be non-negative")
        if self.mode == "lora":
            if self.rank < 1:
                raise ValueError("lora rank must be at least 1")
            if not self.alpha > 0:
                raise ValueError("lora alpha must be positive")

    def effective_clip(self) -> float | None:
        if self.grad_clip is None:
            return 1.0 if self.mode == "state" else None
        return self.grad_clip if self.grad_clip > 0 else None

    def to_json_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json_dict(cls, data: dict) -> "TrainConfig":
        return cls(**data)


_MODE_DEFAULTS = {
    "pretrain": dict(lr=1e-4, weight_decay=0.1, epochs=24),
    "state": dict(lr=5e-2, weight_decay=0.0, epochs=16),
    "lora": dict(lr=5e-4, weight_decay=0.1, epochs=16),
}


def default_train_config(mode: str, **overrides) -> TrainConfig:
    if mode not in MODES:
        raise ValueError(f"unknown training mode {mode!r}")
    base = dict(_MODE_DEFAULTS[mode])
    base.update(overrides)
    return TrainConfig(mode=mode, **base)


@dataclass
class TrainResult:
    mode: str
    steps: int
    epochs_completed: int
    losses: list[float]
    wall_time: float
    stopped: str  # completed | time_budget

    @property
    def final_loss(self) -> float:
        return self.losses[-1] if self.losses else math.nan


class ExampleSource(Protocol):
    """Yields the examples for one epoch; called once per epoch so sources
    can reshuffle and rebuild prompts."""

    def examples(self, epoch: int) -> list[TrainingExample]: ...


class CorpusSource:
    """Rebuilds prompts from the corpus every epoch: fresh infill regions,
    context windows, and octave shifts per file, then a shuffled order."""

    def __init__(
        self,
        scores: Sequence[Score],
        *,
        vocab: Vocabulary,
        seq_budget: int,
        seed: int,
        examples_per_file: int = 1,
        min_bars: int = 8,
        min_notes: int = 100,
    ):
        if examples_per_file < 1:
            raise ValueError("examples_per_file must be at least 1")
        self.vocab = vocab
        self.seq_budget = seq_budget
        self.seed = seed
        self.examples_per_file = examples_per_file
        self.files: list[tuple[int, Score]] = []
        cfg = vocab.cfg
        for index, score in enumerate(scores):
            enc = encode_score(score, cfg)
            if corpus_filter(enc, min_bars=min_bars, min_notes=min_notes):
                self.files.append((index, score))
        if not self.files:
            raise ValueError("no corpus files passed the size filters")

    def examples(self, epoch: int) -> list[TrainingExample]:
        out: list[TrainingExample] = []
        for index, score in self.files:
            rng = substream_rng(self.seed, epoch, index)
            for _ in range(self.examples_per_file):
                try:
                    out.append(
                        make_training_example(
                            score,
                            rng=rng,
                            vocab=self.vocab,
                            seq_budget=self.seq_budget,
                        )
                    )
                except ExampleRejected:
                    continue
        random.Random(f"order:{self.seed}:{epoch}").shuffle(out)
        return out


class FixedSource:
    """Serves a fixed example list, reshuffled per epoch."""

    def __init__(self, examples: Sequence[TrainingExample], *, seed: int = 0):
        if not examples:
            raise ValueError("example list is empty")
        self._examples = list(examples)
        self.seed = seed

    def examples(self, epoch: int) -> list[TrainingExample]:
        out = list(self._examples)
        random.Random(f"fixed:{self.seed}:{epoch}").shuffle(out)
        return out


def _batches(
    examples: Sequence[TrainingExample], batch_size: int, seq_len: int
) -> Iterator[tuple[torch.Tensor, torch.Tensor]]:
    for ex in examples:
        if len(ex.ids) > seq_len:
            raise ValueError(
                f"example of {len(ex.ids)} tokens exceeds seq_len {seq_len}"
            )
        if not ex.ids:
            raise ValueError("empty example")
    for at in range(0, len(examples), batch_size):
        chunk = examples[at : at + batch_size]
        width = max(len(ex.ids) for ex in chunk)
        ids = torch.zeros(len(chunk), width, dtype=torch.long)
        mask = torch.zeros(len(chunk), width, dtype=torch.bool)
        for row, ex in enumerate(chunk):
            ids[row, : len(ex.ids)] = torch.tensor(ex.ids, dtype=torch.long)
            lo, hi = ex.span
            mask[row, lo + 1 : hi + 1] = True
        yield ids, mask


def _decayable(name: str, param: torch.Tensor) -> bool:
    # matmul weights only: no norms/gains, no embeddings, no bonus vectors
    if param.dim() < 2:
        return False
    leaf = name.rsplit(".", 1)[-1]
    return leaf != "r_k" and not name.endswith("emb.weight")


def _optimizer(
    named: Iterable[tuple[str, nn.Parameter]], lr: float, weight_decay: float
) -> torch.optim.AdamW:
    decay, plain = [], []
    for name, param in named:
        (decay if _decayable(name, param) else plain).append(param)
    groups = []
    if decay:
        groups.append({"params": decay, "weight_decay": weight_decay})
    if plain:
        groups.append({"params": plain, "weight_decay": 0.0})
    if not groups:
        raise ValueError("nothing to optimize")
    return torch.optim.AdamW(groups, lr=lr, betas=(0.9, 0.999), eps=1e-8)


class _Frozen:
    """Temporarily drops requires_grad on every parameter not being tuned."""

    def __init__(self, module: nn.Module, keep: set[int]):
        self.module = module
        self.keep = keep
        self.saved: list[tuple[nn.Parameter, bool]] = []

    def __enter__(self) -> "_Frozen":
        for param in self.module.parameters():
            if id(param) not in self.keep:
                self.saved.append((param, param.requires_grad))
                param.requires_grad_(False)
        return self

    def __exit__(self, *exc) -> None:
        for param, flag in self.saved:
            param.requires_grad_(flag)


def _snapshot(params: dict[str, torch.Tensor]) -> dict[str, torch.Tensor]:
    return {name: value.detach().clone() for name, value in params.items()}


def _restore(params: dict[str, torch.Tensor], saved: dict[str, torch.Tensor]) -> None:
    with torch.no_grad():
        for name, value in params.items():
            value.copy_(saved[name])


def _run(
    cfg: TrainConfig,
    source: ExampleSource,
    *,
    forward: Callable[[torch.Tensor, torch.Tensor], torch.Tensor],
    optimizer: torch.optim.Optimizer,
    trainable: list[nn.Parameter],
    tracked: dict[str, torch.Tensor],
    metrics_path: str | Path | None,
) -> TrainResult:
    start = time.monotonic()
    clip = cfg.effective_clip()
    losses: list[float] = []
    steps = 0
    epochs_completed = 0
    stopped = "completed"
    last_good = _snapshot(tracked)
    log = open(metrics_path, "w", encoding="utf-8") if metrics_path else None

    def out_of_time() -> bool:
        return (
            cfg.time_budget is not None
            and time.monotonic() - start >= cfg.time_budget
        )

    try:
        if out_of_time():
            stopped = "time_budget"
        else:
            for epoch in range(cfg.epochs):
                hit_budget = False
                for ids, mask in _batches(
                    source.examples(epoch), cfg.batch_size, cfg.seq_len
                ):
                    loss = forward(ids, mask)
                    value = float(loss.detach())
                    if not math.isfinite(value):
                        _restore(tracked, last_good)
                        raise TrainingDiverged(
                            f"non-finite loss at step {steps}; restored the "
                            f"last checkpoint ({epochs_completed} epochs)",
                            steps=steps,
                            epochs_completed=epochs_completed,
                        )
                    optimizer.zero_grad(set_to_none=True)
                    loss.backward()
                    if clip is not None:
                        torch.nn.utils.clip_grad_norm_(trainable, clip)
                    optimizer.step()
                    steps += 1
                    losses.append(value)
                    if log is not None:
                        log.write(
                            json.dumps(
                                {
                                    "step": steps,
                                    "epoch": epoch,
                                    "loss": value,
                                    "lr": cfg.lr,
                                    "wall_time": time.monotonic() - start,
                                }
                            )
                            + "\n"
                        )
                        log.flush()
                    if out_of_time():
                        hit_budget = True
                        break
                if hit_budget:
                    stopped = "time_budget"
                    break
                epochs_completed += 1
                last_good = _snapshot(tracked)
    finally:
        if log is not None:
            log.close()
    return TrainResult(
        mode=cfg.mode,
        steps=steps,
        epochs_completed=epochs_completed,
        losses=losses,
        wall_time=time.monotonic() - start,
        stopped=stopped,
    )


def pretrain(
    model: RWKV7,
    source: ExampleSource,
    cfg: TrainConfig,
    *,
    metrics_path: str | Path | None = None,
) -> TrainResult:
    """Full-parameter training from the zero state. Mutates the model in
    place; on divergence the model is restored to the last finished epoch
    and TrainingDiverged is raised."""
    if cfg.mode != "pretrain":
        raise ValueError(f"pretrain called with mode {cfg.mode!r}")
    named = list(model.named_parameters())
    optimizer = _optimizer(named, cfg.lr, cfg.weight_decay)
    return _run(
        cfg,
        source,
        forward=lambda ids, mask: sequence_loss(model, ids, mask),
        optimizer=optimizer,
        trainable=[param for _, param in named],
        tracked={name: param for name, param in named},
        metrics_path=metrics_path,
    )


def state_tune(
    model: RWKV7,
    source: ExampleSource,
    cfg: TrainConfig,
    *,
    tune_shift: bool = False,
    metrics_path: str | Path | None = None,
) -> tuple[InitialState, TrainResult]:
    """Optimize a fresh initial state against a frozen model. Model
    parameters are untouched (bitwise)."""
    if cfg.mode != "state":
        raise ValueError(f"state_tune called with mode {cfg.mode!r}")
    state = InitialState(model.cfg, tune_shift=tune_shift, dtype=model.dtype)
    named = list(state.named_parameters())
    optimizer = _optimizer(named, cfg.lr, 0.0)
    with _Frozen(model, keep=set()):
        result = _run(
            cfg,
            source,
            forward=lambda ids, mask: sequence_loss(
                model, ids, mask, state.state(ids.shape[0])
            ),
            optimizer=optimizer,
            trainable=[param for _, param in named],
            tracked={name: param for name, param in named},
            metrics_path=metrics_path,
        )
    return state, result


def lora_tune(
    model: RWKV7,
    source: ExampleSource,
    cfg: TrainConfig,
    *,
    initial_state: InitialState | None = None,
    metrics_path: str | Path | None = None,
) -> tuple[LoraAdapter, TrainResult]:
    """Attach a fresh adapter and train only it. Base weights and any
    supplied initial state stay untouched; the adapter remains attached
    so the caller can save or remove it."""
    if cfg.mode != "lora":
        raise ValueError(f"lora_tune called with mode {cfg.mode!r}")
    adapter = apply_lora(model, cfg.rank, cfg.alpha, seed=cfg.seed)
    named = list(adapter.named_parameters())
    optimizer = _optimizer(named, cfg.lr, cfg.weight_decay)
    keep = {id(param) for _, param in named}

    def forward(ids: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
        if initial_state is None:
            return sequence_loss(model, ids, mask)
        return sequence_loss(
            model, ids, mask, initial_state.state(ids.shape[0]).detached()
        )

    with _Frozen(model, keep=keep):
        result = _run(
            cfg,
            source,
            forward=forward,
            optimizer=optimizer,
            trainable=[param for _, param in named],
            tracked={name: param for name, param in named},
            metrics_path=metrics_path,
        )
    return adapter, result


def evaluate_loss(
    model: RWKV7,
    examples: Sequence[TrainingExample],
    *,
    batch_size: int = 16,
    initial_state: InitialState | None = None,
) -> float:
    """Mean masked cross-entropy over the examples, gradient-free.

    Batch losses are re-weighted by their masked-token counts so the
    result is the per-token average over the whole set.
    """
    if not examples:
        raise ValueError("no examples to evaluate")
    seq_len = max(len(ex.ids) for ex in examples)
    total = 0.0
    tokens = 0
    with torch.no_grad():
        for ids, mask in _batches(list(examples), batch_size, seq_len):
            state = (
                initial_state.state(ids.shape[0]).detached()
                if initial_state is not None
                else None
            )
            loss = sequence_loss(model, ids, mask, state)
            counted = int(mask.sum()) - int(mask[:, 0].sum())
            total += float(loss) * counted
            tokens += counted
    return total / tokens


def parameter_fingerprint(module: nn.Module) -> str:
    """Order-independent digest of every parameter's name, dtype, shape,
    and exact bytes; any bitwise change shows up here."""
    digest = hashlib.sha256()
    for name, param in sorted(module.named_parameters()):
        data = param.detach().cpu().contiguous()
        digest.update(name.encode())
        digest.update(str(data.dtype).encode())
        digest.update(str(tuple(data.shape)).encode())
        digest.update(data.numpy().tobytes())
    return digest.hexdigest()
