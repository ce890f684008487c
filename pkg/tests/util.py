"""Shared deterministic generators for tests."""

from __future__ import annotations

import random

from mrwkv.midi_io import (
    DRUMS,
    Note,
    Score,
    TempoEvent,
    TimeSigEvent,
    Track,
    bar_grid,
    validate_score,
)

_TIMESIGS = [(4, 4), (3, 4), (2, 4), (6, 8), (2, 2), (5, 4), (7, 8), (12, 8)]


def make_random_track(
    rng: random.Random,
    *,
    total_ticks: int,
    lattice: int,
    drums: bool = False,
    max_notes: int = 40,
) -> Track:
    """Random track with per-pitch non-overlapping notes on a tick lattice."""
    program = DRUMS if drums else rng.randrange(128)
    last_end: dict[int, int] = {}
    notes: list[Note] = []
    candidates = []
    for _ in range(rng.randint(1, max_notes)):
        onset = rng.randrange(0, max(1, total_ticks // lattice)) * lattice
        pitch = rng.randint(35, 60) if drums else rng.randint(21, 108)
        duration = lattice * rng.randint(1, 16)
        velocity = rng.randint(1, 127)
        candidates.append(Note(onset, pitch, duration, velocity))
    for n in sorted(candidates):
        if n.onset >= last_end.get(n.pitch, 0):
            notes.append(n)
            last_end[n.pitch] = n.onset + n.duration
    if not notes:
        notes = [Note(0, 60, lattice, 64)]
    return Track(program=program, notes=notes)


def make_busy_score(
    seed: int,
    *,
    n_bars: int = 10,
    n_tracks: int = 2,
    notes_per_bar: int = 3,
    drums: bool = False,
    pitch_lo: int = 45,
    pitch_hi: int = 84,
) -> Score:
    """4/4 score at tpq 480 with every bar of every track occupied.

    Pitches are distinct per onset slot and durations never cross the
    bar line, so per-pitch overlap cannot occur.
    """
    rng = random.Random(seed)
    tpq = 480
    slot = tpq // 2
    bar_len = tpq * 4
    span = pitch_hi - pitch_lo - 8
    tracks = []
    for t in range(n_tracks):
        is_dr = drums and t == n_tracks - 1
        program = DRUMS if is_dr else rng.randrange(128)
        notes = []
        for b in range(n_bars):
            for s in sorted(rng.sample(range(8), k=min(notes_per_bar, 8))):
                if is_dr:
                    pitch = 35 + (b % 10) + s
                else:
                    pitch = pitch_lo + (b * 2 + t * 5) % span + s
                dur = slot * rng.randint(1, 8 - s)
                notes.append(Note(b * bar_len + s * slot, pitch, dur, rng.randint(20, 110)))
        tracks.append(Track(program=program, notes=sorted(notes)))
    score = Score(
        ticks_per_quarter=tpq,
        tracks=tracks,
        tempo_map=[TempoEvent(0, 500_000)],
        timesig_map=[TimeSigEvent(0, 4, 4)],
    )
    validate_score(score)
    return score


def make_random_score(seed: int, *, max_tracks: int = 4, bars_hint: int = 8) -> Score:
    rng = random.Random(seed)
    tpq = rng.choice([240, 384, 480, 960])
    lattice = tpq // 8
    total_ticks = bars_hint * 4 * tpq

    tempo_ticks = sorted({0, *(rng.randrange(0, total_ticks) for _ in range(rng.randint(0, 2)))})
    tempo_map = [TempoEvent(t, rng.randint(240_000, 1_500_000)) for t in tempo_ticks]

    num, den = rng.choice(_TIMESIGS)
    timesig_map = [TimeSigEvent(0, num, den)]
    if rng.random() < 0.4:
        bar_len = tpq * 4 * num // den
        change_bar = rng.randint(1, 4)
        num2, den2 = rng.choice(_TIMESIGS)
        timesig_map.append(TimeSigEvent(bar_len * change_bar, num2, den2))

    n_tracks = rng.randint(1, max_tracks)
    drums_at = rng.randrange(n_tracks) if (n_tracks > 1 and rng.random() < 0.3) else -1
    tracks = [
        make_random_track(rng, total_ticks=total_ticks, lattice=lattice, drums=(i == drums_at))
        for i in range(n_tracks)
    ]

    score = Score(
        ticks_per_quarter=tpq,
        tracks=tracks,
        tempo_map=tempo_map,
        timesig_map=timesig_map,
    )
    validate_score(score)
    return score


def occupied_track_index(score: Score) -> int:
    """Index of a track that has at least one note in every bar, or -1."""
    bars = bar_grid(score)
    for ti, track in enumerate(score.tracks):
        onsets = [n.onset for n in track.notes]
        if all(any(s <= o < e for o in onsets) for s, e in bars):
            return ti
    return -1
