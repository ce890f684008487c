"""Synthetic corpora for experiments and trainability checks.

Two kinds of material: styled multi-track scores (melody over a chord
grid, parameterized enough that two styles are statistically far apart)
and an order-2 Markov token source whose entropy rate has a closed
form, giving an analytic target for held-out cross-entropy.
"""

from __future__ import annotations

import random
from dataclasses import dataclass

import numpy as np

from ..midi_io import Note, Score, TempoEvent, TimeSigEvent, Track
from ..prompt import TrainingExample
from ..tokenizer import TokenizerConfig

__all__ = [
    "MarkovChain",
    "StyleSpec",
    "STYLE_PENTATONIC",
    "STYLE_CHROMATIC",
    "generate_style_score",
    "markov_examples",
    "style_corpus",
]


@dataclass(frozen=True)
class StyleSpec:
    """Parameters for one synthetic style.

    `scale` lists pitch classes relative to the root; `rhythm` the grid
    positions (8 per quarter) where melody onsets may fall; `chords`
    per-bar triads as scale degrees, cycled over bars.
    """

    name: str
    root: int
    scale: tuple[int, ...]
    rhythm: tuple[int, ...]
    note_units: tuple[int, ...]
    chords: tuple[tuple[int, ...], ...]
    chord_units: int
    melody_program: int
    chord_program: int
    velocity_bins: tuple[int, int]  # melody, chords
    tempo_bin: int
    rest_chance: float


STYLE_PENTATONIC = StyleSpec(
    name="pentatonic",
    root=60,
    scale=(0, 2, 4, 7, 9),
    rhythm=(0, 4, 8, 12, 16, 20, 24, 28),
    note_units=(4, 4, 8),
    chords=((0, 2, 4), (3, 5, 7), (4, 6, 8), (0, 2, 4)),
    chord_units=32,
    melody_program=0,
    chord_program=48,
    velocity_bins=(18, 12),
    tempo_bin=16,
    rest_chance=0.25,
)

STYLE_CHROMATIC = StyleSpec(
    name="chromatic",
    root=49,
    scale=(0, 1, 4, 5, 8, 10),
    rhythm=tuple(range(0, 32, 2)),
    note_units=(1, 2, 2, 16),
    chords=((0, 1, 3), (2, 4, 5), (1, 3, 5), (5, 0, 2)),
    chord_units=16,
    melody_program=25,
    chord_program=33,
    velocity_bins=(27, 22),
    tempo_bin=22,
    rest_chance=0.05,
)


def generate_style_score(
    style: StyleSpec,
    seed: int,
    *,
    n_bars: int = 16,
    cfg: TokenizerConfig | None = None,
    tpq: int = 480,
) -> Score:
    """One two-track score (melody + chords) in the given style.

    Everything lands on the tokenizer grid with bin-center velocities,
    so encoding round-trips exactly.
    """
    cfg = cfg or TokenizerConfig()
    step = tpq // cfg.positions_per_quarter
    bar_ticks = 4 * tpq
    rng = random.Random(f"{style.name}:{seed}")
    mel_vel = cfg.velocity_value(style.velocity_bins[0])
    chord_vel = cfg.velocity_value(style.velocity_bins[1])

    degrees = len(style.scale)
    melody: list[Note] = []
    ringing: dict[int, int] = {}  # pitch -> end tick, to avoid same-pitch overlap
    deg = rng.randrange(degrees)
    octave = 0
    for bar in range(n_bars):
        for pos in style.rhythm:
            if rng.random() < style.rest_chance:
                continue
            deg += rng.choice((-2, -1, -1, 1, 1, 2))
            octave = max(-1, min(1, octave + (deg // degrees)))
            deg %= degrees
            pitch = style.root + 12 * octave + style.scale[deg]
            onset = bar * bar_ticks + pos * step
            units = min(
                rng.choice(style.note_units),
                (n_bars * bar_ticks - onset) // step,
            )
            if ringing.get(pitch, 0) > onset:
                continue
            ringing[pitch] = onset + units * step
            melody.append(Note(onset, pitch, units * step, mel_vel))

    chords: list[Note] = []
    for bar in range(n_bars):
        triad = style.chords[bar % len(style.chords)]
        for sub in range(32 // style.chord_units):
            onset = bar * bar_ticks + sub * style.chord_units * step
            for degree in triad:
                pitch = style.root - 12 + style.scale[degree % degrees] + 12 * (
                    degree // degrees
                )
                chords.append(
                    Note(onset, pitch, style.chord_units * step, chord_vel)
                )

    return Score(
        ticks_per_quarter=tpq,
        tracks=[
            Track(style.melody_program, sorted(melody)),
            Track(style.chord_program, sorted(chords)),
        ],
        tempo_map=[TempoEvent.from_bpm(0, cfg.tempo_value(style.tempo_bin))],
        timesig_map=[TimeSigEvent(0, 4, 4)],
    )


def style_corpus(
    style: StyleSpec, n_scores: int, seed: int, *, n_bars: int = 16
) -> list[Score]:
    return [
        generate_style_score(style, seed * 1000 + i, n_bars=n_bars)
        for i in range(n_scores)
    ]


@dataclass(frozen=True)
class MarkovChain:
    """Order-2 Markov chain over symbols 0..K-1.

    `transitions[a, b]` is the distribution of the next symbol after
    the pair (a, b). The entropy rate has a closed form through the
    stationary distribution of the pair process, which is what a
    sequence model's held-out cross-entropy should approach.
    """

    transitions: np.ndarray

    def __post_init__(self) -> None:
        t = self.transitions
        if t.ndim != 3 or t.shape[0] != t.shape[1] or t.shape[1] != t.shape[2]:
            raise ValueError("transitions must be (K, K, K)")
        if not np.allclose(t.sum(axis=2), 1.0, atol=1e-9):
            raise ValueError("transition rows must sum to 1")

    @property
    def n_symbols(self) -> int:
        return self.transitions.shape[0]

    @staticmethod
    def random(
        n_symbols: int, seed: int, concentration: float = 0.15
    ) -> "MarkovChain":
        """Dirichlet-like random chain; small concentration gives peaked
        rows, hence an entropy rate well below log K."""
        rng = np.random.default_rng(seed)
        raw = rng.gamma(concentration, 1.0, (n_symbols,) * 3) + 1e-12
        return MarkovChain(raw / raw.sum(axis=2, keepdims=True))

    def stationary_pairs(self) -> np.ndarray:
        """Stationary distribution over (previous, current) pairs."""
        k = self.n_symbols
        pi = np.full((k, k), 1.0 / (k * k))
        for _ in range(10_000):
            # pair (a,b) -> (b,c) with prob transitions[a,b,c]
            nxt = np.einsum("ab,abc->bc", pi, self.transitions)
            if np.abs(nxt - pi).max() < 1e-14:
                return nxt
            pi = nxt
        return pi

    def entropy_rate(self) -> float:
        """Asymptotic per-symbol entropy in nats."""
        pi = self.stationary_pairs()
        t = self.transitions
        live = t > 0
        h_rows = -(np.where(live, t * np.log(np.where(live, t, 1.0)), 0.0)).sum(axis=2)
        return float((pi * h_rows).sum())

    def sample(self, length: int, seed: int, burn_in: int = 64) -> list[int]:
        rng = np.random.default_rng(seed)
        k = self.n_symbols
        a, b = rng.integers(k), rng.integers(k)
        out = []
        for i in range(burn_in + length):
            c = rng.choice(k, p=self.transitions[a, b])
            if i >= burn_in:
                out.append(int(c))
            a, b = b, c
        return out

    def sequence_nll(self, ids: list[int]) -> float:
        """Mean conditional negative log-likelihood (nats) of a sequence
        under the chain, skipping the first two symbols."""
        if len(ids) < 3:
            raise ValueError("need at least 3 symbols")
        total = 0.0
        for a, b, c in zip(ids, ids[1:], ids[2:]):
            total -= float(np.log(self.transitions[a, b, c]))
        return total / (len(ids) - 2)


def markov_examples(
    chain: MarkovChain, n_examples: int, seq_len: int, seed: int
) -> list[TrainingExample]:
    """Training examples whose loss span covers the whole sequence."""
    return [
        TrainingExample(
            ids=tuple(chain.sample(seq_len, seed * 7919 + i)),
            span=(0, seq_len - 1),
            n_bars=0,
        )
        for i in range(n_examples)
    ]
