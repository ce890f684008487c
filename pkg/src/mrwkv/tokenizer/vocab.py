"""Event vocabulary: token kinds, quantization bins, merge table.

Base tokens are laid out in a fixed, documented order so that ids are
stable for a given config. Merged tokens (from BPE training) occupy ids
`base_size + rank`. Structural and attribute tokens are "protected":
they never take part in merges, which keeps bar and section boundaries
visible in merged sequences.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, fields
from enum import Enum


class TokenKind(str, Enum):
    PAD = "Pad"
    BAR_NONE = "Bar_None"
    TRACK_START = "Track_Start"
    TRACK_END = "Track_End"
    FILLBAR_START = "FillBar_Start"
    FILLBAR_END = "FillBar_End"
    INFILL_BAR = "Infill_Bar"
    DENSITY = "Density"
    DUR_CLASS = "DurClass"
    POLY_MIN = "PolyMin"
    POLY_MAX = "PolyMax"
    PITCH = "Pitch"
    VELOCITY = "Velocity"
    DURATION = "Duration"
    POSITION = "Position"
    TEMPO = "Tempo"
    TIMESIG = "TimeSig"
    PROGRAM = "Program"


STRUCTURAL_KINDS = frozenset(
    {
        TokenKind.PAD,
        TokenKind.BAR_NONE,
        TokenKind.TRACK_START,
        TokenKind.TRACK_END,
        TokenKind.FILLBAR_START,
        TokenKind.FILLBAR_END,
        TokenKind.INFILL_BAR,
    }
)

ATTRIBUTE_KINDS = frozenset(
    {TokenKind.DENSITY, TokenKind.DUR_CLASS, TokenKind.POLY_MIN, TokenKind.POLY_MAX}
)

# Duration classes in descending length order; values are quarter multiples.
DUR_CLASS_QUARTERS = (4.0, 2.0, 1.0, 0.5, 0.25)
DUR_CLASS_NAMES = ("whole", "half", "quarter", "eighth", "sixteenth")


@dataclass(frozen=True, slots=True)
class BaseToken:
    kind: TokenKind
    value: int = 0

    def __repr__(self) -> str:  # compact in assertion output
        return f"{self.kind.value}({self.value})"


@dataclass(frozen=True)
class TokenizerConfig:
    positions_per_quarter: int = 8
    max_positions: int = 128
    velocity_bins: int = 32
    max_duration_units: int = 128
    pitch_low: int = 21
    pitch_high: int = 108
    tempo_bins: int = 32
    tempo_low: float = 40.0
    tempo_high: float = 250.0
    timesig_numerators: tuple[int, ...] = tuple(range(1, 17))
    timesig_denominators: tuple[int, ...] = (2, 4, 8, 16)
    density_max: int = 18
    poly_limit: int = 12

    def __post_init__(self) -> None:
        if self.positions_per_quarter % 4:
            raise ValueError("positions_per_quarter must be a multiple of 4")
        if self.tempo_low <= 0 or self.tempo_high <= self.tempo_low:
            raise ValueError("bad tempo range")

    # density value density_max+1 stands for "more than density_max notes"
    @property
    def density_over(self) -> int:
        return self.density_max + 1

    @property
    def timesigs(self) -> tuple[tuple[int, int], ...]:
        return tuple(
            (num, den) for den in self.timesig_denominators for num in self.timesig_numerators
        )

    def timesig_index(self, numerator: int, denominator: int) -> int:
        try:
            return self.timesigs.index((numerator, denominator))
        except ValueError:
            raise KeyError(f"unsupported time signature {numerator}/{denominator}") from None

    @property
    def dur_class_units(self) -> tuple[int, ...]:
        return tuple(int(q * self.positions_per_quarter) for q in DUR_CLASS_QUARTERS)

    def velocity_bin(self, velocity: int) -> int:
        if not 1 <= velocity <= 127:
            raise ValueError(f"velocity {velocity} out of range")
        return (velocity - 1) * self.velocity_bins // 127

    def velocity_value(self, bin_index: int) -> int:
        return 1 + (2 * bin_index + 1) * 127 // (2 * self.velocity_bins)

    def tempo_bin(self, bpm: float) -> int:
        span = math.log(self.tempo_high / self.tempo_low)
        raw = math.floor(self.tempo_bins * math.log(bpm / self.tempo_low) / span)
        return min(max(raw, 0), self.tempo_bins - 1)

    def tempo_value(self, bin_index: int) -> float:
        ratio = self.tempo_high / self.tempo_low
        return self.tempo_low * ratio ** ((bin_index + 0.5) / self.tempo_bins)

    def to_json_dict(self) -> dict:
        out = {}
        for f in fields(self):
            v = getattr(self, f.name)
            out[f.name] = list(v) if isinstance(v, tuple) else v
        return out

    @classmethod
    def from_json_dict(cls, data: dict) -> "TokenizerConfig":
        kwargs = dict(data)
        for key in ("timesig_numerators", "timesig_denominators"):
            if key in kwargs:
                kwargs[key] = tuple(kwargs[key])
        return cls(**kwargs)


def build_base_tokens(cfg: TokenizerConfig) -> list[BaseToken]:
    """Deterministic base-token layout. PAD is always id 0."""
    toks: list[BaseToken] = [
        BaseToken(TokenKind.PAD),
        BaseToken(TokenKind.BAR_NONE),
        BaseToken(TokenKind.TRACK_START),
        BaseToken(TokenKind.TRACK_END),
        BaseToken(TokenKind.FILLBAR_START),
        BaseToken(TokenKind.FILLBAR_END),
        BaseToken(TokenKind.INFILL_BAR),
    ]
    toks += [BaseToken(TokenKind.DENSITY, v) for v in range(1, cfg.density_over + 1)]
    # DurClass value encodes (class index, present flag) as idx*2+flag
    toks += [BaseToken(TokenKind.DUR_CLASS, v) for v in range(2 * len(DUR_CLASS_QUARTERS))]
    toks += [BaseToken(TokenKind.POLY_MIN, v) for v in range(1, cfg.poly_limit + 1)]
    toks += [BaseToken(TokenKind.POLY_MAX, v) for v in range(1, cfg.poly_limit + 1)]
    toks += [BaseToken(TokenKind.PITCH, v) for v in range(cfg.pitch_low, cfg.pitch_high + 1)]
    toks += [BaseToken(TokenKind.VELOCITY, v) for v in range(cfg.velocity_bins)]
    toks += [BaseToken(TokenKind.DURATION, v) for v in range(1, cfg.max_duration_units + 1)]
    toks += [BaseToken(TokenKind.POSITION, v) for v in range(cfg.max_positions)]
    toks += [BaseToken(TokenKind.TEMPO, v) for v in range(cfg.tempo_bins)]
    toks += [BaseToken(TokenKind.TIMESIG, v) for v in range(len(cfg.timesigs))]
    toks += [BaseToken(TokenKind.PROGRAM, v) for v in range(129)]  # 128 = drums
    return toks


class Vocabulary:
    """Base tokens plus an ordered merge table."""

    def __init__(
        self,
        cfg: TokenizerConfig,
        merges: list[tuple[int, int]] | None = None,
        exhausted: bool = False,
    ) -> None:
        self.cfg = cfg
        self.base_tokens = build_base_tokens(cfg)
        self.token_to_id = {tok: i for i, tok in enumerate(self.base_tokens)}
        if len(self.token_to_id) != len(self.base_tokens):
            raise ValueError("duplicate base tokens")
        self.merges: list[tuple[int, int]] = list(merges or [])
        self.exhausted = exhausted
        self.protected_ids = frozenset(
            i for i, tok in enumerate(self.base_tokens) if tok.kind in STRUCTURAL_KINDS | ATTRIBUTE_KINDS
        )
        self._expansions: dict[int, tuple[int, ...]] = {}
        for rank, (left, right) in enumerate(self.merges):
            new_id = len(self.base_tokens) + rank
            if not (0 <= left < new_id and 0 <= right < new_id):
                raise ValueError(f"merge {rank} references id out of range")
            if left in self.protected_ids or right in self.protected_ids:
                raise ValueError(f"merge {rank} touches a protected token")

    @property
    def base_size(self) -> int:
        return len(self.base_tokens)

    @property
    def size(self) -> int:
        return len(self.base_tokens) + len(self.merges)

    def id_of(self, kind: TokenKind, value: int = 0) -> int:
        return self.token_to_id[BaseToken(kind, value)]

    def token(self, token_id: int) -> BaseToken:
        if not 0 <= token_id < self.base_size:
            raise KeyError(f"id {token_id} is not a base token")
        return self.base_tokens[token_id]

    def is_base(self, token_id: int) -> bool:
        return 0 <= token_id < self.base_size

    def expansion(self, token_id: int) -> tuple[int, ...]:
        """Base-token ids a (possibly merged) id stands for."""
        if token_id < 0 or token_id >= self.size:
            raise KeyError(f"id {token_id} out of vocabulary")
        if token_id < self.base_size:
            return (token_id,)
        cached = self._expansions.get(token_id)
        if cached is None:
            left, right = self.merges[token_id - self.base_size]
            cached = self.expansion(left) + self.expansion(right)
            self._expansions[token_id] = cached
        return cached

    def encode_tokens(self, tokens: list[BaseToken]) -> list[int]:
        return [self.token_to_id[t] for t in tokens]

    def decode_ids(self, ids: list[int]) -> list[BaseToken]:
        out: list[BaseToken] = []
        for i in ids:
            out.extend(self.base_tokens[b] for b in self.expansion(i))
        return out

    # frequently used ids
    @property
    def pad_id(self) -> int:
        return self.id_of(TokenKind.PAD)

    @property
    def bar_none_id(self) -> int:
        return self.id_of(TokenKind.BAR_NONE)

    @property
    def track_start_id(self) -> int:
        return self.id_of(TokenKind.TRACK_START)

    @property
    def track_end_id(self) -> int:
        return self.id_of(TokenKind.TRACK_END)

    @property
    def fillbar_start_id(self) -> int:
        return self.id_of(TokenKind.FILLBAR_START)

    @property
    def fillbar_end_id(self) -> int:
        return self.id_of(TokenKind.FILLBAR_END)

    @property
    def infill_bar_id(self) -> int:
        return self.id_of(TokenKind.INFILL_BAR)

    def to_json_dict(self) -> dict:
        return {
            "format": "mrwkv-vocab",
            "version": 1,
            "config": self.cfg.to_json_dict(),
            "base_tokens": [[t.kind.value, t.value] for t in self.base_tokens],
            "merges": [list(m) for m in self.merges],
            "exhausted": self.exhausted,
        }

    @classmethod
    def from_json_dict(cls, data: dict) -> "Vocabulary":
        if data.get("format") != "mrwkv-vocab" or data.get("version") != 1:
            raise ValueError("not a recognized vocabulary file")
        cfg = TokenizerConfig.from_json_dict(data["config"])
        vocab = cls(cfg, [tuple(m) for m in data["merges"]], bool(data.get("exhausted", False)))
        stored = [BaseToken(TokenKind(k), v) for k, v in data["base_tokens"]]
        if stored != vocab.base_tokens:
            raise ValueError("stored base tokens disagree with config-derived layout")
        return vocab

    def content_hash(self) -> str:
        blob = json.dumps(self.to_json_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()

    def hash64(self) -> int:
        return int.from_bytes(bytes.fromhex(self.content_hash())[:8], "little")
