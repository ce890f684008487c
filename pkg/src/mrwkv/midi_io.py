"""Standard MIDI file (SMF) reading and writing plus bar geometry.

Only type 0 and type 1 files with PPQ time division are supported. The
in-memory :class:`Score` is the interchange type for the rest of the
package: plain ticks, explicit tempo/time-signature maps, one
:class:`Track` per (file track, channel) pair.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

# Sentinel program number for percussion tracks (channel 10 in the file).
DRUMS = 128

DEFAULT_TEMPO_MPQ = 500_000  # 120 BPM
DEFAULT_TIMESIG = (4, 4)

_ALLOWED_DENOMS = (1, 2, 4, 8, 16, 32)


class MidiError(Exception):
    pass


class MidiParseError(MidiError):
    """Malformed file. Carries the byte offset where parsing failed."""

    def __init__(self, message: str, offset: int) -> None:
        super().__init__(f"{message} (byte offset {offset})")
        self.offset = offset


class MidiValidationError(MidiError):
    pass


@dataclass(frozen=True, slots=True, order=True)
class Note:
    onset: int
    pitch: int
    duration: int
    velocity: int


@dataclass(frozen=True, slots=True)
class TempoEvent:
    tick: int
    mpq: int  # microseconds per quarter note, exact round-trip unit

    @property
    def bpm(self) -> float:
        return 60_000_000.0 / self.mpq

    @staticmethod
    def from_bpm(tick: int, bpm: float) -> "TempoEvent":
        return TempoEvent(tick, int(round(60_000_000.0 / bpm)))


@dataclass(frozen=True, slots=True)
class TimeSigEvent:
    tick: int
    numerator: int
    denominator: int


@dataclass(slots=True)
class Track:
    program: int  # 0..127, or DRUMS
    notes: list[Note] = field(default_factory=list)

    @property
    def is_drums(self) -> bool:
        return self.program == DRUMS


@dataclass(slots=True)
class Score:
    ticks_per_quarter: int
    tracks: list[Track] = field(default_factory=list)
    tempo_map: list[TempoEvent] = field(default_factory=list)
    timesig_map: list[TimeSigEvent] = field(default_factory=list)
    warnings: list[str] = field(default_factory=list, compare=False)
    dropped_events: int = field(default=0, compare=False)

    def end_tick(self) -> int:
        """Offset of the last sounding note, 0 for an empty score."""
        ends = [n.onset + n.duration for t in self.tracks for n in t.notes]
        return max(ends, default=0)


# ---------------------------------------------------------------------------
# normalization and validation


def merge_overlapping_notes(notes: list[Note]) -> tuple[list[Note], int]:
    """Merge same-pitch overlapping intervals to their union.

    Touching notes (one ends exactly where the next starts) are kept
    separate. The earliest note's velocity wins. Returns the sorted
    result and the number of merges performed.
    """
    merged = 0
    out: list[Note] = []
    by_pitch: dict[int, list[Note]] = {}
    for n in sorted(notes):
        by_pitch.setdefault(n.pitch, []).append(n)
    for pitch_notes in by_pitch.values():
        cur = pitch_notes[0]
        for n in pitch_notes[1:]:
            if n.onset < cur.onset + cur.duration:
                end = max(cur.onset + cur.duration, n.onset + n.duration)
                cur = Note(cur.onset, cur.pitch, end - cur.onset, cur.velocity)
                merged += 1
            else:
                out.append(cur)
                cur = n
        out.append(cur)
    out.sort()
    return out, merged


def validate_score(score: Score) -> None:
    """Raise MidiValidationError unless `score` satisfies all invariants."""
    if not 1 <= score.ticks_per_quarter <= 0x7FFF:
        raise MidiValidationError(f"ticks_per_quarter out of range: {score.ticks_per_quarter}")
    for which, events in (("tempo", score.tempo_map), ("timesig", score.timesig_map)):
        if not events or events[0].tick != 0:
            raise MidiValidationError(f"{which} map must start with an entry at tick 0")
        ticks = [e.tick for e in events]
        if ticks != sorted(set(ticks)):
            raise MidiValidationError(f"{which} map ticks must be strictly increasing")
    for ts in score.timesig_map:
        if ts.numerator < 1 or ts.numerator > 255:
            raise MidiValidationError(f"bad time signature numerator {ts.numerator}")
        if ts.denominator not in _ALLOWED_DENOMS:
            raise MidiValidationError(f"bad time signature denominator {ts.denominator}")
    for te in score.tempo_map:
        if not 1 <= te.mpq <= 0xFFFFFF:
            raise MidiValidationError(f"tempo out of range: {te.mpq} microseconds per quarter")
    for ti, track in enumerate(score.tracks):
        if track.program != DRUMS and not 0 <= track.program <= 127:
            raise MidiValidationError(f"track {ti}: bad program {track.program}")
        if not track.notes:
            raise MidiValidationError(f"track {ti}: empty tracks cannot round-trip")
        if track.notes != sorted(track.notes):
            raise MidiValidationError(f"track {ti}: notes not sorted")
        open_end: dict[int, int] = {}
        for n in track.notes:
            if not 0 <= n.pitch <= 127:
                raise MidiValidationError(f"track {ti}: pitch {n.pitch} out of range")
            if not 1 <= n.velocity <= 127:
                raise MidiValidationError(f"track {ti}: velocity {n.velocity} out of range")
            if n.duration < 1 or n.onset < 0:
                raise MidiValidationError(f"track {ti}: degenerate note {n}")
            if n.onset < open_end.get(n.pitch, 0):
                raise MidiValidationError(f"track {ti}: overlapping notes at pitch {n.pitch}")
            open_end[n.pitch] = n.onset + n.duration


# ---------------------------------------------------------------------------
# reading


class _Cursor:
    __slots__ = ("data", "pos")

    def __init__(self, data: bytes, pos: int = 0) -> None:
        self.data = data
        self.pos = pos

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise MidiParseError("unexpected end of data", self.pos)
        chunk = self.data[self.pos : self.pos + n]
        self.pos += n
        return chunk

    def u8(self) -> int:
        return self.take(1)[0]

    def varlen(self) -> int:
        value = 0
        for _ in range(4):
            b = self.u8()
            value = (value << 7) | (b & 0x7F)
            if not b & 0x80:
                return value
        raise MidiParseError("variable-length quantity longer than 4 bytes", self.pos)


def _parse_track_chunk(
    cur: _Cursor,
    length: int,
    chunk_index: int,
    notes_out: dict[tuple[int, int], list[tuple[Note, int]]],
    tempo_out: dict[int, int],
    timesig_out: dict[int, tuple[int, int]],
    warnings: list[str],
) -> int:
    """Parse one MTrk chunk body. Returns the number of dropped events.

    notes_out is keyed by (chunk_index, channel); each note is stored with
    the program active at its onset.
    """
    end_pos = cur.pos + length
    tick = 0
    running_status = 0
    dropped = 0
    program: list[int] = [0] * 16
    open_notes: dict[tuple[int, int], list[tuple[int, int, int]]] = {}

    def close(channel: int, pitch: int, off_tick: int) -> bool:
        queue = open_notes.get((channel, pitch))
        if not queue:
            return False
        onset, velocity, prog = queue.pop(0)
        duration = max(1, off_tick - onset)
        notes_out.setdefault((chunk_index, channel), []).append(
            (Note(onset, pitch, duration, velocity), prog)
        )
        return True

    while cur.pos < end_pos:
        tick += cur.varlen()
        status = cur.u8()
        if status < 0x80:
            if running_status < 0x80:
                raise MidiParseError("data byte with no running status", cur.pos - 1)
            cur.pos -= 1
            status = running_status
        if status < 0xF0:
            running_status = status
            kind = status & 0xF0
            channel = status & 0x0F
            if kind == 0x90:
                pitch, velocity = cur.take(2)
                if velocity == 0:
                    if not close(channel, pitch, tick):
                        warnings.append(f"track {chunk_index}: unmatched note-off at tick {tick}")
                else:
                    open_notes.setdefault((channel, pitch), []).append(
                        (tick, velocity, program[channel])
                    )
            elif kind == 0x80:
                pitch, _velocity = cur.take(2)
                if not close(channel, pitch, tick):
                    warnings.append(f"track {chunk_index}: unmatched note-off at tick {tick}")
            elif kind == 0xC0:
                program[channel] = cur.u8()
            elif kind in (0xA0, 0xB0, 0xE0):
                cur.take(2)
                dropped += 1
            else:  # 0xD0 channel pressure
                cur.take(1)
                dropped += 1
        elif status in (0xF0, 0xF7):
            running_status = 0
            cur.take(cur.varlen())
            dropped += 1
        elif status == 0xFF:
            running_status = 0
            meta = cur.u8()
            data = cur.take(cur.varlen())
            if meta == 0x51 and len(data) == 3:
                tempo_out[tick] = int.from_bytes(data, "big")
            elif meta == 0x58 and len(data) >= 2:
                timesig_out[tick] = (data[0], 1 << data[1])
            elif meta == 0x2F:
                break
            else:
                dropped += 1
        else:
            raise MidiParseError(f"unexpected status byte 0x{status:02x}", cur.pos - 1)

    for (channel, pitch), queue in sorted(open_notes.items()):
        for _ in range(len(queue)):
            close(channel, pitch, tick)
            warnings.append(
                f"track {chunk_index}: dangling note-on (pitch {pitch}) closed at track end"
            )
    cur.pos = end_pos
    return dropped


def read_midi(data: bytes) -> Score:
    """Parse SMF bytes into a Score.

    Channel 10 becomes a DRUMS track, velocity-0 note-ons are note-offs,
    same-pitch overlaps are merged to their union, and unsupported events
    are dropped (counted in `dropped_events`). Missing tempo/time
    signature default to 120 BPM and 4/4 at tick 0.
    """
    cur = _Cursor(data)
    if cur.take(4) != b"MThd":
        raise MidiParseError("missing MThd header", 0)
    if struct.unpack(">I", cur.take(4))[0] != 6:
        raise MidiParseError("bad MThd length", 4)
    fmt, ntrks, division = struct.unpack(">HHH", cur.take(6))
    if fmt not in (0, 1):
        raise MidiParseError(f"unsupported SMF type {fmt}", 8)
    if division & 0x8000:
        raise MidiParseError("SMPTE time division is not supported", 12)
    if division == 0:
        raise MidiParseError("zero ticks per quarter", 12)

    notes: dict[tuple[int, int], list[tuple[Note, int]]] = {}
    tempo: dict[int, int] = {}
    timesig: dict[int, tuple[int, int]] = {}
    warnings: list[str] = []
    dropped = 0
    chunk_index = 0
    while chunk_index < ntrks and cur.pos < len(data):
        tag = cur.take(4)
        length = struct.unpack(">I", cur.take(4))[0]
        if tag != b"MTrk":
            cur.take(length)  # unknown chunk, skip
            continue
        dropped += _parse_track_chunk(cur, length, chunk_index, notes, tempo, timesig, warnings)
        chunk_index += 1

    tracks: list[Track] = []
    for chunk, channel in sorted(notes):
        pairs = notes[(chunk, channel)]
        if channel == 9:
            prog = DRUMS
        else:
            prog = pairs[0][1] if pairs else 0
            if any(p != prog for _, p in pairs):
                warnings.append(f"track {chunk} channel {channel}: mid-track program change ignored")
        track_notes, merged = merge_overlapping_notes([n for n, _ in pairs])
        if merged:
            warnings.append(f"track {chunk} channel {channel}: merged {merged} overlapping notes")
        tracks.append(Track(program=prog, notes=track_notes))

    tempo.setdefault(0, DEFAULT_TEMPO_MPQ)
    timesig.setdefault(0, DEFAULT_TIMESIG)
    return Score(
        ticks_per_quarter=division,
        tracks=tracks,
        tempo_map=[TempoEvent(t, mpq) for t, mpq in sorted(tempo.items())],
        timesig_map=[TimeSigEvent(t, n, d) for t, (n, d) in sorted(timesig.items())],
        warnings=warnings,
        dropped_events=dropped,
    )


# ---------------------------------------------------------------------------
# writing


def _write_varlen(out: bytearray, value: int) -> None:
    if value < 0:
        raise MidiValidationError("negative delta time")
    chunks = [value & 0x7F]
    value >>= 7
    while value:
        chunks.append(0x80 | (value & 0x7F))
        value >>= 7
    out.extend(reversed(chunks))


def _encode_track(events: list[tuple[int, int, bytes]]) -> bytes:
    """events: (tick, order, payload) triples; payload includes status."""
    out = bytearray()
    last = 0
    for tick, _order, payload in sorted(events, key=lambda e: (e[0], e[1], e[2])):
        _write_varlen(out, tick - last)
        out.extend(payload)
        last = tick
    _write_varlen(out, 0)
    out.extend(b"\xff\x2f\x00")
    return b"MTrk" + struct.pack(">I", len(out)) + bytes(out)


def write_midi(score: Score) -> bytes:
    """Serialize a valid Score as an SMF type 1 file.

    Output is deterministic: conductor track first, then one track chunk
    per Track with an explicit status byte on every event; note-offs sort
    before note-ons at equal ticks so adjacent same-pitch notes re-pair.
    """
    validate_score(score)
    chunks: list[bytes] = []

    conductor: list[tuple[int, int, bytes]] = []
    for ts in score.timesig_map:
        dd = ts.denominator.bit_length() - 1
        conductor.append((ts.tick, 0, bytes((0xFF, 0x58, 4, ts.numerator, dd, 24, 8))))
    for te in score.tempo_map:
        conductor.append((te.tick, 1, bytes((0xFF, 0x51, 3)) + te.mpq.to_bytes(3, "big")))
    chunks.append(_encode_track(conductor))

    next_channel = 0
    for track in score.tracks:
        events: list[tuple[int, int, bytes]] = []
        if track.is_drums:
            channel = 9
        else:
            if next_channel == 9:
                next_channel += 1
            channel = next_channel % 16
            if channel == 9:
                channel += 1
            next_channel += 1
            events.append((0, 0, bytes((0xC0 | channel, track.program))))
        for n in track.notes:
            events.append((n.onset, 2, bytes((0x90 | channel, n.pitch, n.velocity))))
            events.append((n.onset + n.duration, 1, bytes((0x80 | channel, n.pitch, 0))))
        chunks.append(_encode_track(events))

    header = b"MThd" + struct.pack(">IHHH", 6, 1, len(chunks), score.ticks_per_quarter)
    return header + b"".join(chunks)


# ---------------------------------------------------------------------------
# bar geometry


def bar_length_ticks(tpq: int, numerator: int, denominator: int) -> int:
    length4 = tpq * 4 * numerator
    if length4 % denominator:
        raise MidiValidationError(
            f"bar length not integral: {numerator}/{denominator} at {tpq} ticks per quarter"
        )
    return length4 // denominator


def bar_grid(score: Score) -> list[tuple[int, int]]:
    """Contiguous (start, end) tick spans of whole bars covering [0, end_tick).

    Time-signature changes take effect at the first bar boundary at or
    after their tick. An empty score yields an empty grid.
    """
    validate_score(score)
    end = score.end_tick()
    if end == 0:
        return []
    sigs = list(score.timesig_map)
    current = sigs.pop(0)
    bars: list[tuple[int, int]] = []
    start = 0
    while start < end:
        while sigs and sigs[0].tick <= start:
            current = sigs.pop(0)
        length = bar_length_ticks(score.ticks_per_quarter, current.numerator, current.denominator)
        bars.append((start, start + length))
        start += length
    return bars


def notes_in_bar(track: Track, bar: tuple[int, int]) -> list[Note]:
    """Notes whose onset falls inside the half-open bar span."""
    start, end = bar
    return [n for n in track.notes if start <= n.onset < end]
