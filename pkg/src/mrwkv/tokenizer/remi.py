"""Bar-structured event encoding of Scores.

Each track is rendered independently as
    Track_Start, Program, bar*, Track_End
where a bar is
    Bar_None, [TimeSig], (Position, Tempo*, (Pitch Velocity Duration)*)*

Notes are quantized onto a grid of `positions_per_quarter` steps; the
score's ticks_per_quarter must be a multiple of that rate so encoding
and decoding are exact on the grid (encode -> decode -> encode is the
identity on token streams). Time signatures and tempo are emitted on
change only, and always at the first emitted bar so any window of bars
is self-contained.
"""

from __future__ import annotations

from bisect import bisect_right
from dataclasses import dataclass

from ..midi_io import (
    Note,
    Score,
    TempoEvent,
    TimeSigEvent,
    Track,
    bar_grid,
    validate_score,
)
from .vocab import BaseToken, TokenizerConfig, TokenKind


class TokenizeError(Exception):
    pass


class DecodeError(Exception):
    """Ungrammatical token stream. Carries the offending token index."""

    def __init__(self, message: str, index: int) -> None:
        super().__init__(f"{message} (token index {index})")
        self.index = index


@dataclass(frozen=True, slots=True, order=True)
class QNote:
    """A note on the quantization grid: positions within its bar."""

    bar: int
    pos: int
    pitch: int
    units: int
    vbin: int


@dataclass(slots=True)
class ScoreEncoding:
    cfg: TokenizerConfig
    tpq: int
    step: int  # ticks per grid unit
    bars: list[tuple[int, int]]
    bar_positions: list[int]
    bar_unit_offset: list[int]
    sig_idx: list[int]
    tempo_events: list[list[tuple[int, int]]]  # per bar: (pos, tempo bin)
    active_tempo: list[int]  # tempo bin in force at each bar start
    programs: list[int]
    track_bar_notes: list[list[list[QNote]]]  # [track][bar] -> notes

    @property
    def n_bars(self) -> int:
        return len(self.bars)

    @property
    def n_tracks(self) -> int:
        return len(self.programs)

    def bar_notes(self, track: int, bar: int) -> list[QNote]:
        return self.track_bar_notes[track][bar]

    def onset_unit(self, note: QNote) -> int:
        return self.bar_unit_offset[note.bar] + note.pos

    def track_tokens(self, track: int) -> list[BaseToken]:
        """Full single-track stream over every bar of the score."""
        emitter = TrackEmitter(self, track)
        out = emitter.header()
        for b in range(self.n_bars):
            out.extend(emitter.bar_tokens(b))
        out.append(BaseToken(TokenKind.TRACK_END))
        return out

    def all_track_tokens(self) -> list[list[BaseToken]]:
        return [self.track_tokens(t) for t in range(self.n_tracks)]


def _round_div(numerator: int, denominator: int) -> int:
    """Round half up, non-negative operands."""
    return (2 * numerator + denominator) // (2 * denominator)


def _bar_sig_indices(score: Score, bars: list[tuple[int, int]], cfg: TokenizerConfig) -> list[int]:
    sigs = list(score.timesig_map)
    current = sigs.pop(0)
    out = []
    for start, _end in bars:
        while sigs and sigs[0].tick <= start:
            current = sigs.pop(0)
        out.append(cfg.timesig_index(current.numerator, current.denominator))
    return out


def _quantize_track(
    track: Track, enc_bars: list[tuple[int, int]], bar_positions: list[int], step: int,
    cfg: TokenizerConfig,
) -> list[QNote]:
    starts = [b[0] for b in enc_bars]
    offsets = [0]
    for n in bar_positions:
        offsets.append(offsets[-1] + n)
    raw: list[tuple[int, int, int, int]] = []  # (onset_unit, pitch, units, velocity)
    for note in track.notes:
        bar = bisect_right(starts, note.onset) - 1
        pos = min(_round_div(note.onset - starts[bar], step), bar_positions[bar] - 1)
        units = max(1, min(cfg.max_duration_units, _round_div(note.duration, step)))
        raw.append((offsets[bar] + pos, note.pitch, units, note.velocity))
    raw.sort()

    # quantization can create same-pitch overlaps; merge to the union
    merged: dict[int, list[tuple[int, int, int]]] = {}
    for onset_u, pitch, units, velocity in raw:
        lane = merged.setdefault(pitch, [])
        if lane and onset_u < lane[-1][0] + lane[-1][1]:
            o, u, v = lane[-1]
            lane[-1] = (o, min(cfg.max_duration_units, max(u, onset_u + units - o)), v)
        else:
            lane.append((onset_u, units, velocity))

    out: list[QNote] = []
    for pitch, lane in merged.items():
        for onset_u, units, velocity in lane:
            bar = bisect_right(offsets, onset_u) - 1
            out.append(QNote(bar, onset_u - offsets[bar], pitch, units, cfg.velocity_bin(velocity)))
    out.sort()
    return out


def encode_score(score: Score, cfg: TokenizerConfig) -> ScoreEncoding:
    validate_score(score)
    base_bars = bar_grid(score)
    if not base_bars:
        raise TokenizeError("cannot encode an empty score")
    tpq = score.ticks_per_quarter
    if tpq % cfg.positions_per_quarter:
        raise TokenizeError(
            f"ticks_per_quarter {tpq} is not a multiple of {cfg.positions_per_quarter};"
            " re-quantize the file first"
        )
    step = tpq // cfg.positions_per_quarter

    # quantize onto a provisional grid one bar longer than the raw extent
    # (duration rounding can push a note end past the last boundary),
    # then keep exactly the bars covering the quantized extent so that
    # decoding and re-encoding reproduce the same grid.
    last = base_bars[-1]
    bars = base_bars + [(last[1], 2 * last[1] - last[0])]
    sig_idx = _bar_sig_indices(score, bars, cfg)
    bar_positions = []
    for start, end in bars:
        if (end - start) % step:
            raise TokenizeError(f"bar at tick {start} is not integral on the grid")
        n = (end - start) // step
        if n > cfg.max_positions:
            raise TokenizeError(f"bar at tick {start} has {n} positions, over {cfg.max_positions}")
        bar_positions.append(n)
    offsets = [0]
    for n in bar_positions:
        offsets.append(offsets[-1] + n)

    quantized = [
        _quantize_track(track, bars, bar_positions, step, cfg) for track in score.tracks
    ]
    extent = max(offsets[q.bar] + q.pos + q.units for qs in quantized for q in qs)
    n_bars = next(b for b in range(1, len(offsets)) if offsets[b] >= extent)
    bars = bars[:n_bars]
    sig_idx = sig_idx[:n_bars]
    bar_positions = bar_positions[:n_bars]
    offsets = offsets[: n_bars + 1]

    starts = [b[0] for b in bars]
    # tempo ticks past the kept grid are clamped onto its final position
    dedup: dict[tuple[int, int], int] = {}
    for te in score.tempo_map:
        bar = min(bisect_right(starts, te.tick) - 1, n_bars - 1)
        pos = min(_round_div(te.tick - starts[bar], step), bar_positions[bar] - 1)
        dedup[(bar, pos)] = cfg.tempo_bin(te.bpm)
    tempo_events: list[list[tuple[int, int]]] = [[] for _ in bars]
    last_bin: int | None = None
    for (bar, pos), tbin in sorted(dedup.items()):
        if tbin != last_bin:
            tempo_events[bar].append((pos, tbin))
            last_bin = tbin
    active_tempo = []
    current = tempo_events[0][0][1]  # tick-0 tempo entry always exists
    for bar in range(n_bars):
        active_tempo.append(current)
        for _pos, tbin in tempo_events[bar]:
            current = tbin

    track_bar_notes = []
    for qs in quantized:
        per_bar: list[list[QNote]] = [[] for _ in bars]
        for q in qs:
            per_bar[q.bar].append(q)
        track_bar_notes.append(per_bar)

    return ScoreEncoding(
        cfg=cfg,
        tpq=tpq,
        step=step,
        bars=bars,
        bar_positions=bar_positions,
        bar_unit_offset=offsets,
        sig_idx=sig_idx,
        tempo_events=tempo_events,
        active_tempo=active_tempo,
        programs=[t.program for t in score.tracks],
        track_bar_notes=track_bar_notes,
    )


class TrackEmitter:
    """Stateful per-track token emitter.

    Emits time signature and tempo only when they differ from what was
    last emitted, and unconditionally at the first emitted bar, so a
    window of bars carries its own timing context. Skipped bars (for
    infill masking) simply are not emitted; state is unaffected.
    """

    def __init__(self, enc: ScoreEncoding, track: int) -> None:
        self.enc = enc
        self.track = track
        self._sig: int | None = None
        self._tempo: int | None = None

    def header(self) -> list[BaseToken]:
        return [
            BaseToken(TokenKind.TRACK_START),
            BaseToken(TokenKind.PROGRAM, self.enc.programs[self.track]),
        ]

    def bar_tokens(self, bar: int) -> list[BaseToken]:
        enc = self.enc
        out = [BaseToken(TokenKind.BAR_NONE)]
        sig = enc.sig_idx[bar]
        if sig != self._sig:
            out.append(BaseToken(TokenKind.TIMESIG, sig))
            self._sig = sig

        tempo_here = list(enc.tempo_events[bar])
        if self._tempo is None and not any(p == 0 for p, _ in tempo_here):
            tempo_here.insert(0, (0, enc.active_tempo[bar]))

        by_pos: dict[int, list[BaseToken]] = {}
        for pos, tbin in tempo_here:
            if tbin != self._tempo:
                by_pos.setdefault(pos, []).append(BaseToken(TokenKind.TEMPO, tbin))
                self._tempo = tbin
        for q in enc.bar_notes(self.track, bar):
            by_pos.setdefault(q.pos, []).extend(
                (
                    BaseToken(TokenKind.PITCH, q.pitch),
                    BaseToken(TokenKind.VELOCITY, q.vbin),
                    BaseToken(TokenKind.DURATION, q.units),
                )
            )
        for pos in sorted(by_pos):
            out.append(BaseToken(TokenKind.POSITION, pos))
            out.extend(by_pos[pos])
        return out

    def fill_bar_tokens(self, bar: int) -> list[BaseToken]:
        """Bar content for a fill section: notes only, no bar marker,
        no timing tokens."""
        out: list[BaseToken] = []
        last_pos = None
        for q in self.enc.bar_notes(self.track, bar):
            if q.pos != last_pos:
                out.append(BaseToken(TokenKind.POSITION, q.pos))
                last_pos = q.pos
            out.extend(
                (
                    BaseToken(TokenKind.PITCH, q.pitch),
                    BaseToken(TokenKind.VELOCITY, q.vbin),
                    BaseToken(TokenKind.DURATION, q.units),
                )
            )
        return out


# ---------------------------------------------------------------------------
# decoding


def parse_positions(
    tokens: list[BaseToken],
    i: int,
    *,
    allow_tempo: bool,
    terminators: frozenset[TokenKind],
) -> tuple[int, list[tuple[int, int, int, int]], list[tuple[int, int]]]:
    """Parse (Position, Tempo*, (Pitch Velocity Duration)*)* until a
    terminator kind. Returns (index, notes as (pos, pitch, vbin, units),
    tempo events as (pos, bin))."""
    notes: list[tuple[int, int, int, int]] = []
    tempos: list[tuple[int, int]] = []
    pos: int | None = None
    notes_at_pos = False
    while i < len(tokens):
        tok = tokens[i]
        if tok.kind in terminators:
            return i, notes, tempos
        if tok.kind is TokenKind.POSITION:
            if pos is not None and tok.value <= pos:
                raise DecodeError(f"positions not ascending ({pos} then {tok.value})", i)
            pos = tok.value
            notes_at_pos = False
            i += 1
        elif tok.kind is TokenKind.TEMPO:
            if not allow_tempo:
                raise DecodeError("tempo token not allowed here", i)
            if pos is None:
                raise DecodeError("tempo before any position", i)
            if notes_at_pos:
                raise DecodeError("tempo after a note group", i)
            tempos.append((pos, tok.value))
            i += 1
        elif tok.kind is TokenKind.PITCH:
            if pos is None:
                raise DecodeError("note group before any position", i)
            if i + 2 >= len(tokens):
                raise DecodeError("truncated note group", i)
            vel, dur = tokens[i + 1], tokens[i + 2]
            if vel.kind is not TokenKind.VELOCITY:
                raise DecodeError(f"expected velocity after pitch, got {vel}", i + 1)
            if dur.kind is not TokenKind.DURATION:
                raise DecodeError(f"expected duration after velocity, got {dur}", i + 2)
            notes.append((pos, tok.value, vel.value, dur.value))
            notes_at_pos = True
            i += 3
        else:
            raise DecodeError(f"unexpected token {tok}", i)
    raise DecodeError("stream ended inside a bar", i)


_BAR_TERMINATORS = frozenset({TokenKind.BAR_NONE, TokenKind.TRACK_END})


@dataclass(slots=True)
class _ParsedTrack:
    program: int
    n_bars: int
    sigs: dict[int, int]  # bar -> timesig index
    tempos: list[tuple[int, int, int]]  # (bar, pos, bin)
    notes: list[QNote]


def _parse_track(tokens: list[BaseToken], cfg: TokenizerConfig) -> _ParsedTrack:
    i = 0
    if not tokens or tokens[0].kind is not TokenKind.TRACK_START:
        raise DecodeError("track must start with Track_Start", 0)
    if len(tokens) < 2 or tokens[1].kind is not TokenKind.PROGRAM:
        raise DecodeError("expected program after Track_Start", 1)
    program = tokens[1].value
    i = 2
    bar = -1
    sigs: dict[int, int] = {}
    tempos: list[tuple[int, int, int]] = []
    notes: list[QNote] = []
    while i < len(tokens):
        tok = tokens[i]
        if tok.kind is TokenKind.TRACK_END:
            if i != len(tokens) - 1:
                raise DecodeError("tokens after Track_End", i + 1)
            if bar < 0:
                raise DecodeError("track has no bars", i)
            return _ParsedTrack(program, bar + 1, sigs, tempos, notes)
        if tok.kind is not TokenKind.BAR_NONE:
            raise DecodeError(f"expected bar marker, got {tok}", i)
        bar += 1
        i += 1
        if i < len(tokens) and tokens[i].kind is TokenKind.TIMESIG:
            sigs[bar] = tokens[i].value
            i += 1
        elif bar == 0:
            raise DecodeError("first bar must declare a time signature", i)
        i, bar_notes, bar_tempos = parse_positions(
            tokens, i, allow_tempo=True, terminators=_BAR_TERMINATORS
        )
        tempos.extend((bar, p, b) for p, b in bar_tempos)
        notes.extend(QNote(bar, p, pitch, units, vbin) for p, pitch, vbin, units in bar_notes)
    raise DecodeError("missing Track_End", len(tokens) - 1)


def decode_tracks(
    streams: list[list[BaseToken]], cfg: TokenizerConfig, tpq: int
) -> Score:
    """Rebuild a Score from per-track token streams.

    The bar grid, tempo map and time-signature map are taken from the
    first track (every encoded track carries identical timing tokens).
    """
    if tpq % cfg.positions_per_quarter:
        raise TokenizeError(f"tpq {tpq} incompatible with grid")
    if not streams:
        raise DecodeError("no tracks", 0)
    step = tpq // cfg.positions_per_quarter
    parsed = [_parse_track(s, cfg) for s in streams]
    n_bars = parsed[0].n_bars
    if any(p.n_bars != n_bars for p in parsed):
        raise DecodeError("tracks disagree on bar count", 0)

    timesigs = cfg.timesigs
    starts = [0]
    sig_at: list[tuple[int, int]] = []
    current_sig = timesigs[parsed[0].sigs[0]]
    for bar in range(n_bars):
        if bar in parsed[0].sigs:
            current_sig = timesigs[parsed[0].sigs[bar]]
        sig_at.append(current_sig)
        num, den = current_sig
        starts.append(starts[bar] + tpq * 4 * num // den)

    timesig_map = [TimeSigEvent(0, *sig_at[0])]
    for bar in range(1, n_bars):
        if sig_at[bar] != sig_at[bar - 1]:
            timesig_map.append(TimeSigEvent(starts[bar], *sig_at[bar]))

    tempo_map: list[TempoEvent] = []
    for bar, pos, tbin in parsed[0].tempos:
        tick = starts[bar] + pos * step
        tempo_map.append(TempoEvent.from_bpm(tick, cfg.tempo_value(tbin)))
    if not tempo_map or tempo_map[0].tick != 0:
        tempo_map.insert(0, TempoEvent(0, 500_000))

    tracks = []
    for p in parsed:
        track_notes = [
            Note(
                onset=starts[q.bar] + q.pos * step,
                pitch=q.pitch,
                duration=q.units * step,
                velocity=cfg.velocity_value(q.vbin),
            )
            for q in p.notes
        ]
        track_notes.sort()
        tracks.append(Track(program=p.program, notes=track_notes))  # 128 is the drums program

    score = Score(
        ticks_per_quarter=tpq,
        tracks=tracks,
        tempo_map=tempo_map,
        timesig_map=timesig_map,
    )
    validate_score(score)
    return score
