"""Constrained autoregressive decoding for bar infilling.

The filter pipeline is fixed: repetition penalty, temperature, top-k,
softmax, top-p renormalization, then forbidden-token zeroing. On top of
that the infill loop enforces hard structure: attribute controls are
injected (never sampled) after every bar separator, a separator may not
follow another separator, and a grammar mask keeps note groups and
position ordering well formed so every output parses and splices.

The grammar mask is applied to the logits as a large negative finite
value before the pipeline runs, so top-k competes only among tokens that
are legal at the current point.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np
import torch

from .model import ModelState, RWKV7, InitialState
from .prompt import AttributeControls
from .tokenizer import BaseToken, TokenKind, Vocabulary

__all__ = [
    "SamplerConfig",
    "IDENTITY",
    "SamplerError",
    "EmptyDistributionError",
    "PartialOutputError",
    "EarlyStopError",
    "TruncationError",
    "InfillResult",
    "filter_logits",
    "greedy_token",
    "infill_forbidden_ids",
    "generate_infill",
]

# finite stand-in for "impossible"; underflows to probability 0.0 exactly
MASKED_LOGIT = -1e30

MAX_EARLY_STOP_REDRAWS = 8


class SamplerError(Exception):
    pass


class EmptyDistributionError(SamplerError):
    """Every token was filtered or forbidden."""


class PartialOutputError(SamplerError):
    def __init__(self, message: str, fill_ids: list[int], bars_completed: int):
        super().__init__(message)
        self.fill_ids = fill_ids
        self.bars_completed = bars_completed


class EarlyStopError(PartialOutputError):
    """The model insisted on FillBar_End before the requested bar count."""


class TruncationError(PartialOutputError):
    """max_tokens ran out before the requested bar count."""


@dataclass(frozen=True)
class SamplerConfig:
    temperature: float = 1.0
    repetition_penalty: float = 1.2
    top_k: int = 20
    top_p: float = 0.95
    seed: int = 0
    max_tokens: int = 1024

    def __post_init__(self) -> None:
        if not self.temperature > 0:
            raise ValueError("temperature must be positive")
        if self.repetition_penalty < 1:
            raise ValueError("repetition_penalty must be at least 1")
        if self.top_k < 0:
            raise ValueError("top_k must be non-negative")
        if not 0 < self.top_p <= 1:
            raise ValueError("top_p must be in (0, 1]")
        if self.max_tokens < 1:
            raise ValueError("max_tokens must be at least 1")

    def to_json_dict(self) -> dict:
        return {
            "temperature": self.temperature,
            "repetition_penalty": self.repetition_penalty,
            "top_k": self.top_k,
            "top_p": self.top_p,
            "seed": self.seed,
            "max_tokens": self.max_tokens,
        }

    @classmethod
    def from_json_dict(cls, data: dict) -> "SamplerConfig":
        return cls(**data)


IDENTITY = SamplerConfig(
    temperature=1.0, repetition_penalty=1.0, top_k=0, top_p=1.0
)


def filter_logits(
    logits: np.ndarray | torch.Tensor | Sequence[float],
    history: Iterable[int],
    cfg: SamplerConfig,
    forbidden: Iterable[int] = (),
) -> np.ndarray:
    """Turn raw logits into the sampling distribution. Stages run in a
    fixed order; forbidden tokens are zeroed after nucleus filtering and
    the result is renormalized."""
    if isinstance(logits, torch.Tensor):
        x = logits.detach().to(torch.float64).cpu().numpy().copy()
    else:
        x = np.array(logits, dtype=np.float64)
    if x.ndim != 1:
        raise ValueError("logits must be one-dimensional")
    if not np.all(np.isfinite(x)):
        raise ValueError("logits must be finite")

    if cfg.repetition_penalty != 1.0:
        for token in set(history):
            if x[token] > 0:
                x[token] /= cfg.repetition_penalty
            else:
                x[token] *= cfg.repetition_penalty
    if cfg.temperature != 1.0:
        x = x / cfg.temperature
    if 0 < cfg.top_k < len(x):
        keep = np.argsort(-x, kind="stable")[: cfg.top_k]
        mask = np.zeros(len(x), dtype=bool)
        mask[keep] = True
        x[~mask] = -np.inf

    x -= x.max()
    probs = np.exp(x)
    probs /= probs.sum()

    if cfg.top_p < 1.0:
        order = np.argsort(-probs, kind="stable")
        csum = np.cumsum(probs[order])
        cut = int(np.searchsorted(csum, cfg.top_p, side="left")) + 1
        mask = np.zeros(len(probs), dtype=bool)
        mask[order[:cut]] = True
        probs[~mask] = 0.0
        probs /= probs.sum()

    banned = list(forbidden)
    if banned:
        probs[banned] = 0.0
        total = probs.sum()
        if total <= 0.0:
            raise EmptyDistributionError("no probability mass survives the filters")
        probs /= total
    return probs


def infill_forbidden_ids(vocab: Vocabulary) -> frozenset[int]:
    """Ids that infill sampling never emits: structural markers other than
    the bar separator and the end marker, attribute controls, and global
    events (plus every merge that expands to one)."""
    bad_kinds = {
        TokenKind.PAD,
        TokenKind.TRACK_START,
        TokenKind.TRACK_END,
        TokenKind.FILLBAR_START,
        TokenKind.INFILL_BAR,
        TokenKind.DENSITY,
        TokenKind.DUR_CLASS,
        TokenKind.POLY_MIN,
        TokenKind.POLY_MAX,
        TokenKind.TEMPO,
        TokenKind.TIMESIG,
        TokenKind.PROGRAM,
    }
    out = {
        i for i, tok in enumerate(vocab.base_tokens) if tok.kind in bad_kinds
    }
    for merged in range(vocab.base_size, vocab.size):
        if any(b in out for b in vocab.expansion(merged)):
            out.add(merged)
    return frozenset(out)


def _kind_range(vocab: Vocabulary, kind: TokenKind) -> tuple[int, int]:
    ids = [i for i, tok in enumerate(vocab.base_tokens) if tok.kind is kind]
    if not ids:
        return (0, 0)
    lo, hi = ids[0], ids[-1] + 1
    if ids != list(range(lo, hi)):
        raise ValueError(f"{kind.value} ids are not contiguous")
    return lo, hi


class _FillGrammar:
    """Token-level legality inside one fill bar: positions ascend, every
    pitch is followed by velocity then duration, and separators only land
    between complete note groups."""

    def __init__(self, vocab: Vocabulary, position_cap: int):
        self.vocab = vocab
        self.pos_lo, self.pos_hi = _kind_range(vocab, TokenKind.POSITION)
        self.pitch_lo, self.pitch_hi = _kind_range(vocab, TokenKind.PITCH)
        self.vel_lo, self.vel_hi = _kind_range(vocab, TokenKind.VELOCITY)
        self.dur_lo, self.dur_hi = _kind_range(vocab, TokenKind.DURATION)
        self.bar_none = vocab.bar_none_id
        self.fill_end = vocab.id_of(TokenKind.FILLBAR_END)
        self.phase = "flow"  # flow | vel | dur
        self.last_pos = -1
        self.cap = position_cap
        self._expansions = [
            tuple(vocab.base_tokens[b] for b in vocab.expansion(m))
            for m in range(vocab.base_size, vocab.size)
        ]

    def start_bar(self, position_cap: int) -> None:
        self.phase = "flow"
        self.last_pos = -1
        self.cap = position_cap

    def _advance(self, phase: str, last_pos: int, tok: BaseToken) -> tuple[str, int] | None:
        if phase == "vel":
            return ("dur", last_pos) if tok.kind is TokenKind.VELOCITY else None
        if phase == "dur":
            return ("flow", last_pos) if tok.kind is TokenKind.DURATION else None
        if tok.kind is TokenKind.POSITION:
            if last_pos < tok.value < self.cap:
                return ("flow", tok.value)
            return None
        if tok.kind is TokenKind.PITCH:
            return ("vel", last_pos) if last_pos >= 0 else None
        return None

    def legal_mask(self) -> np.ndarray:
        mask = np.zeros(self.vocab.size, dtype=bool)
        if self.phase == "vel":
            mask[self.vel_lo : self.vel_hi] = True
        elif self.phase == "dur":
            mask[self.dur_lo : self.dur_hi] = True
        else:
            lo = self.pos_lo + self.last_pos + 1
            hi = self.pos_lo + min(self.cap, self.pos_hi - self.pos_lo)
            if lo < hi:
                mask[lo:hi] = True
            if self.last_pos >= 0:
                mask[self.pitch_lo : self.pitch_hi] = True
            mask[self.bar_none] = True
            mask[self.fill_end] = True
        for offset, expansion in enumerate(self._expansions):
            state: tuple[str, int] | None = (self.phase, self.last_pos)
            for tok in expansion:
                state = self._advance(*state, tok)
                if state is None:
                    break
            if state is not None:
                mask[self.vocab.base_size + offset] = True
        return mask

    def feed(self, token_id: int) -> None:
        if token_id in (self.bar_none, self.fill_end):
            return
        state: tuple[str, int] | None = (self.phase, self.last_pos)
        for base in self.vocab.expansion(token_id):
            state = self._advance(*state, self.vocab.base_tokens[base])
            if state is None:
                raise SamplerError(f"illegal token {token_id} fed to grammar")
        self.phase, self.last_pos = state


@dataclass
class InfillResult:
    fill_ids: list[int]  # complete fill section, FillBar_Start through end
    new_ids: list[int]  # tokens appended after the prompt
    n_bars: int
    sampled: int  # model-sampled token count
    redraws: int  # premature end-marker draws that were retried
    controls: list[AttributeControls] = field(default_factory=list)


def _draw(rng: np.random.Generator, probs: np.ndarray) -> int:
    cut = np.cumsum(probs)
    i = int(np.searchsorted(cut, rng.random(), side="right"))
    if i >= len(probs):
        i = len(probs) - 1
    while i > 0 and probs[i] == 0.0:
        i -= 1
    return i


def greedy_token(probs: np.ndarray) -> int:
    return int(np.argmax(probs))


def _as_state(
    model: RWKV7, initial_state: ModelState | InitialState | None
) -> ModelState | None:
    if initial_state is None:
        return None
    if isinstance(initial_state, InitialState):
        return initial_state.state(1).detached()
    if initial_state.batch_size != 1:
        raise ValueError("infill runs on a single sequence")
    return initial_state


def generate_infill(
    model: RWKV7,
    vocab: Vocabulary,
    prompt_ids: Sequence[int],
    controls: Sequence[AttributeControls],
    cfg: SamplerConfig,
    *,
    initial_state: ModelState | InitialState | None = None,
    bar_caps: Sequence[int] | None = None,
    grammar: bool = True,
    greedy: bool = False,
) -> InfillResult:
    """Sample the fill section bar by bar. The prompt must already end
    with FillBar_Start and the first bar's controls; controls for later
    bars are injected after each sampled separator. Returns the complete
    fill section ready for splice-back."""
    n_bars = len(controls)
    if n_bars < 1:
        raise ValueError("need controls for at least one bar")
    if bar_caps is not None and len(bar_caps) != n_bars:
        raise ValueError("bar_caps length must match the bar count")
    for ctrl in controls:
        ctrl.validate(vocab.cfg)
    control_ids = [vocab.encode_tokens(c.tokens()) for c in controls]
    head = 1 + len(control_ids[0])
    if len(prompt_ids) < head:
        raise SamplerError("prompt too short to end with FillBar_Start + controls")
    tail = list(prompt_ids[-head:])
    expected = [vocab.id_of(TokenKind.FILLBAR_START), *control_ids[0]]
    if tail != expected:
        raise SamplerError(
            "prompt must end with FillBar_Start and the first bar's controls"
        )

    forbidden = infill_forbidden_ids(vocab)
    bar_none = vocab.bar_none_id
    fill_end = vocab.id_of(TokenKind.FILLBAR_END)
    caps = list(bar_caps) if bar_caps is not None else [vocab.cfg.max_positions] * n_bars
    fsm = _FillGrammar(vocab, caps[0]) if grammar else None

    rng = np.random.default_rng(cfg.seed)
    state = _as_state(model, initial_state)
    with torch.no_grad():
        logits, state = model(
            torch.tensor([list(prompt_ids)], dtype=torch.long), state
        )
        last = logits[0, -1]

    out: list[int] = []
    history: list[int] = []
    current_bar = 1
    prev_was_separator = False
    sampled = 0
    redraws = 0

    def partial() -> list[int]:
        return expected + out

    def append(token: int) -> None:
        if len(out) >= cfg.max_tokens:
            raise TruncationError(
                f"max_tokens={cfg.max_tokens} reached after "
                f"{current_bar - 1} complete bars",
                partial(),
                current_bar - 1,
            )
        out.append(token)
        history.append(token)

    def advance(token: int) -> None:
        nonlocal last, state
        with torch.no_grad():
            step_logits, new_state = model.forward_step(
                torch.tensor([token], dtype=torch.long), state
            )
        last = step_logits[0]
        state = new_state

    while True:
        block = set(forbidden)
        if prev_was_separator:
            block.add(bar_none)
        if fsm is not None:
            masked = last.detach().to(torch.float64).cpu().numpy().copy()
            masked[~fsm.legal_mask()] = MASKED_LOGIT
            probs = filter_logits(masked, history, cfg, block)
        else:
            probs = filter_logits(last, history, cfg, block)

        attempts = 0
        while True:
            token = greedy_token(probs) if greedy else _draw(rng, probs)
            if token == fill_end and current_bar < n_bars:
                redraws += 1
                attempts += 1
                if greedy or attempts >= MAX_EARLY_STOP_REDRAWS:
                    raise EarlyStopError(
                        f"end marker after bar {current_bar} of {n_bars}",
                        partial(),
                        current_bar - 1,
                    )
                continue
            break
        sampled += 1

        if token == fill_end:
            append(token)
            break
        if token == bar_none:
            if current_bar == n_bars:
                # the final boundary: normalize to the end marker
                append(fill_end)
                break
            append(token)
            advance(token)
            current_bar += 1
            for cid in control_ids[current_bar - 1]:
                append(cid)
                advance(cid)
            if fsm is not None:
                fsm.start_bar(caps[current_bar - 1])
            prev_was_separator = True
            continue

        append(token)
        advance(token)
        if fsm is not None:
            fsm.feed(token)
        prev_was_separator = False

    return InfillResult(
        fill_ids=expected + out,
        new_ids=out,
        n_bars=n_bars,
        sampled=sampled,
        redraws=redraws,
        controls=list(controls),
    )
