"""Bar-fill prompt assembly.

A prompt serializes a score with one region of N bars masked out on one
track. Each track appears as Track_Start, Program, bars, Track_End; the
masked bars are single Infill_Bar tokens. The fill section follows:
FillBar_Start, then for each masked bar its attribute controls and
content, bars separated by Bar_None (the first fill bar has no leading
separator), closed by FillBar_End. In inference mode the sequence stops
after the first bar's controls; the sampler supplies the rest.

Also provides per-bar attribute controls, training-example synthesis
with octave transposition and random track order, budget-maximal
context selection, splice-back of generated bars, and dataset shards.
"""

from __future__ import annotations

import hashlib
import json
import random
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Iterable, Sequence

from .midi_io import MidiError, Note, Score, Track, merge_overlapping_notes
from .tokenizer import (
    DUR_CLASS_QUARTERS,
    BaseToken,
    DecodeError,
    QNote,
    TokenizeError,
    ScoreEncoding,
    TokenizerConfig,
    TokenKind,
    TrackEmitter,
    Vocabulary,
    apply_bpe,
    encode_score,
    invert_bpe,
    pack_ids,
    parse_positions,
    unpack_ids,
)


class PromptError(Exception):
    pass


class EmptyBarError(PromptError):
    pass


class ExampleRejected(PromptError):
    pass


class SpliceError(PromptError):
    pass


class PromptGrammarError(PromptError):
    def __init__(self, message: str, index: int) -> None:
        super().__init__(f"{message} (token index {index})")
        self.index = index


# ---------------------------------------------------------------------------
# attribute controls


@dataclass(frozen=True, slots=True)
class AttributeControls:
    """Per-bar conditioning: note count bin, duration classes present
    (whole..sixteenth), and polyphony bounds."""

    density: int
    dur_classes: tuple[bool, bool, bool, bool, bool]
    poly_min: int
    poly_max: int

    def validate(self, cfg: TokenizerConfig) -> None:
        if not 1 <= self.density <= cfg.density_over:
            raise PromptError(f"density {self.density} out of range")
        if not 1 <= self.poly_min <= self.poly_max <= cfg.poly_limit:
            raise PromptError(f"bad polyphony bounds {self.poly_min}..{self.poly_max}")

    def tokens(self) -> list[BaseToken]:
        out = [BaseToken(TokenKind.DENSITY, self.density)]
        out += [
            BaseToken(TokenKind.DUR_CLASS, 2 * i + int(flag))
            for i, flag in enumerate(self.dur_classes)
        ]
        out.append(BaseToken(TokenKind.POLY_MIN, self.poly_min))
        out.append(BaseToken(TokenKind.POLY_MAX, self.poly_max))
        return out

    @staticmethod
    def parse(tokens: Sequence[BaseToken], i: int) -> tuple["AttributeControls", int]:
        """Parse the 8 control tokens in canonical order starting at i."""
        if i >= len(tokens) or tokens[i].kind is not TokenKind.DENSITY:
            raise PromptGrammarError("expected density control", i)
        density = tokens[i].value
        i += 1
        flags = []
        for cls in range(len(DUR_CLASS_QUARTERS)):
            if i >= len(tokens) or tokens[i].kind is not TokenKind.DUR_CLASS:
                raise PromptGrammarError(f"expected duration-class control {cls}", i)
            value = tokens[i].value
            if value // 2 != cls:
                raise PromptGrammarError("duration-class controls out of order", i)
            flags.append(bool(value % 2))
            i += 1
        if i >= len(tokens) or tokens[i].kind is not TokenKind.POLY_MIN:
            raise PromptGrammarError("expected poly-min control", i)
        poly_min = tokens[i].value
        i += 1
        if i >= len(tokens) or tokens[i].kind is not TokenKind.POLY_MAX:
            raise PromptGrammarError("expected poly-max control", i)
        poly_max = tokens[i].value
        return AttributeControls(density, tuple(flags), poly_min, poly_max), i + 1

    def to_json_dict(self) -> dict:
        return {
            "density": self.density,
            "dur_classes": list(self.dur_classes),
            "poly_min": self.poly_min,
            "poly_max": self.poly_max,
        }

    @classmethod
    def from_json_dict(cls, data: dict) -> "AttributeControls":
        return cls(
            density=int(data["density"]),
            dur_classes=tuple(bool(x) for x in data["dur_classes"]),
            poly_min=int(data["poly_min"]),
            poly_max=int(data["poly_max"]),
        )


def duration_class_of(units: int, cfg: TokenizerConfig) -> int:
    """Nearest duration class index (0=whole .. 4=sixteenth); ties go to
    the longer class."""
    best = 0
    best_dist = abs(units - cfg.dur_class_units[0])
    for idx, cu in enumerate(cfg.dur_class_units[1:], start=1):
        dist = abs(units - cu)
        if dist < best_dist:  # strict: earlier (longer) class wins ties
            best, best_dist = idx, dist
    return best


def compute_controls(bar_notes: Sequence[QNote], cfg: TokenizerConfig) -> AttributeControls:
    """Controls realized by one bar's quantized notes."""
    if not bar_notes:
        raise EmptyBarError("cannot compute controls for an empty bar")
    count = len(bar_notes)
    density = count if count <= cfg.density_max else cfg.density_over

    flags = [False] * len(DUR_CLASS_QUARTERS)
    for q in bar_notes:
        flags[duration_class_of(q.units, cfg)] = True

    onsets = sorted({q.pos for q in bar_notes})
    poly = [
        sum(1 for q in bar_notes if q.pos <= onset < q.pos + q.units) for onset in onsets
    ]
    poly_min = min(min(poly), cfg.poly_limit)
    poly_max = min(max(poly), cfg.poly_limit)
    return AttributeControls(density, tuple(flags), poly_min, poly_max)


# ---------------------------------------------------------------------------
# region and context selection


def draw_infill_length(n_bars: int, rng: random.Random) -> int:
    """N = max(choice([1,2,4,8]), floor(U(0.1,0.4) * bars)), clamped."""
    n = max(rng.choice([1, 2, 4, 8]), int(rng.uniform(0.1, 0.4) * n_bars))
    return max(1, min(n, n_bars))


def select_infill_region(
    occupancy: Sequence[bool], rng: random.Random, *, max_attempts: int = 32
) -> tuple[int, int]:
    """Draw the region length, then resample a uniform start until the
    window contains no empty bar. Returns (start, length)."""
    n_bars = len(occupancy)
    length = draw_infill_length(n_bars, rng)
    for _ in range(max_attempts):
        start = rng.randrange(n_bars - length + 1)
        if all(occupancy[start : start + length]):
            return start, length
    raise ExampleRejected(f"no non-empty window of {length} bars found")


@dataclass(frozen=True)
class PromptSpec:
    """Where to infill and how to lay the prompt out."""

    track_index: int
    start: int
    length: int
    context: int
    track_order: tuple[int, ...]
    controls: tuple[AttributeControls, ...] | None = None

    def validate(self, enc: ScoreEncoding) -> None:
        if sorted(self.track_order) != list(range(enc.n_tracks)):
            raise PromptError(f"track_order is not a permutation: {self.track_order}")
        if not 0 <= self.track_index < enc.n_tracks:
            raise PromptError(f"track index {self.track_index} out of range")
        if self.length < 1 or self.start < 0 or self.start + self.length > enc.n_bars:
            raise PromptError(
                f"region [{self.start}, {self.start + self.length}) outside 0..{enc.n_bars}"
            )
        if self.context < 0:
            raise PromptError("context must be non-negative")
        if self.controls is not None and len(self.controls) != self.length:
            raise PromptError(
                f"{len(self.controls)} controls for {self.length} bars"
            )

    def region(self) -> range:
        return range(self.start, self.start + self.length)


def resolve_controls(enc: ScoreEncoding, spec: PromptSpec) -> tuple[AttributeControls, ...]:
    """Spec-supplied controls, or controls computed from the source bars."""
    if spec.controls is not None:
        for c in spec.controls:
            c.validate(enc.cfg)
        return spec.controls
    return tuple(
        compute_controls(enc.bar_notes(spec.track_index, bar), enc.cfg)
        for bar in spec.region()
    )


@dataclass(frozen=True)
class BuiltPrompt:
    tokens: tuple[BaseToken, ...]
    controls: tuple[AttributeControls, ...]
    window: tuple[int, int]  # bar span serialized, [lo, hi)
    spec: PromptSpec
    mode: str


def build_prompt(enc: ScoreEncoding, spec: PromptSpec, mode: str = "train") -> BuiltPrompt:
    """Serialize the prompt. Deterministic given (encoding, spec, mode)."""
    if mode not in ("train", "infer"):
        raise PromptError(f"unknown mode {mode!r}")
    spec.validate(enc)
    controls = resolve_controls(enc, spec)
    region = spec.region()
    lo = max(0, spec.start - spec.context)
    hi = min(enc.n_bars, spec.start + spec.length + spec.context)

    out: list[BaseToken] = []
    for track in spec.track_order:
        emitter = TrackEmitter(enc, track)
        out.extend(emitter.header())
        for bar in range(lo, hi):
            if track == spec.track_index and bar in region:
                out.append(BaseToken(TokenKind.INFILL_BAR))
            else:
                out.extend(emitter.bar_tokens(bar))
        out.append(BaseToken(TokenKind.TRACK_END))

    fill = TrackEmitter(enc, spec.track_index)
    out.append(BaseToken(TokenKind.FILLBAR_START))
    for i, bar in enumerate(region):
        if i > 0:
            out.append(BaseToken(TokenKind.BAR_NONE))
        out.extend(controls[i].tokens())
        if mode == "train":
            content = fill.fill_bar_tokens(bar)
            if not content:
                raise EmptyBarError(f"infill bar {bar} is empty")
            out.extend(content)
        elif i == 0:
            break  # inference prompt carries only the first bar's controls
    if mode == "train":
        out.append(BaseToken(TokenKind.FILLBAR_END))
    return BuiltPrompt(tuple(out), controls, (lo, hi), spec, mode)


def prompt_ids(
    enc: ScoreEncoding, spec: PromptSpec, vocab: Vocabulary, mode: str = "train"
) -> tuple[list[int], tuple[int, int], BuiltPrompt]:
    """Prompt as merged ids plus the inclusive fill-section span.

    FillBar_Start/End never merge, so the span is located by id. In
    inference mode the span end is the last token.
    """
    built = build_prompt(enc, spec, mode)
    ids = apply_bpe(vocab.encode_tokens(list(built.tokens)), vocab)
    fs = ids.index(vocab.fillbar_start_id)
    fe = ids.index(vocab.fillbar_end_id) if mode == "train" else len(ids) - 1
    return ids, (fs, fe), built


def select_context(
    enc: ScoreEncoding,
    spec: PromptSpec,
    vocab: Vocabulary,
    seq_budget: int,
    mode: str = "train",
) -> int:
    """Largest context-bar count whose serialized example fits the
    budget after BPE. The spec's own context field is ignored."""
    cap = max(spec.start, enc.n_bars - (spec.start + spec.length))

    def fits(c: int) -> bool:
        ids, _, _ = prompt_ids(enc, replace(spec, context=c), vocab, mode)
        return len(ids) <= seq_budget

    if fits(cap):
        return cap
    if not fits(0):
        raise ExampleRejected("example exceeds the sequence budget even with no context")
    lo, hi = 0, cap  # fits(lo), not fits(hi)
    while hi - lo > 1:
        mid = (lo + hi) // 2
        if fits(mid):
            lo = mid
        else:
            hi = mid
    return lo


# ---------------------------------------------------------------------------
# training examples


@dataclass(frozen=True)
class TrainingExample:
    ids: tuple[int, ...]
    span: tuple[int, int]  # inclusive FillBar_Start..FillBar_End indices
    n_bars: int
    octave_shift: int = 0
    spec: PromptSpec | None = None


def transposed_score(score: Score, octaves: int, cfg: TokenizerConfig) -> Score | None:
    """Shift non-drum tracks by whole octaves; None if any pitch leaves
    the tokenizer range (drums must already be in range)."""
    semis = 12 * octaves
    tracks = []
    for track in score.tracks:
        if track.is_drums:
            if any(not cfg.pitch_low <= n.pitch <= cfg.pitch_high for n in track.notes):
                return None
            tracks.append(track)
            continue
        moved = []
        for n in track.notes:
            p = n.pitch + semis
            if not cfg.pitch_low <= p <= cfg.pitch_high:
                return None
            moved.append(Note(n.onset, p, n.duration, n.velocity))
        tracks.append(Track(track.program, moved))
    return Score(
        ticks_per_quarter=score.ticks_per_quarter,
        tracks=tracks,
        tempo_map=list(score.tempo_map),
        timesig_map=list(score.timesig_map),
    )


def make_training_example(
    score: Score,
    *,
    rng: random.Random,
    vocab: Vocabulary,
    seq_budget: int,
    max_region_attempts: int = 32,
    max_shift_attempts: int = 100,
) -> TrainingExample:
    """Octave shift, random track order, region/context draw, controls,
    serialization. Deterministic given the rng state."""
    cfg = vocab.cfg
    shifted = None
    octaves = 0
    for _ in range(max_shift_attempts):
        octaves = rng.randint(-6, 6)
        shifted = transposed_score(score, octaves, cfg)
        if shifted is not None:
            break
    if shifted is None:
        raise ExampleRejected("no octave shift keeps pitches in range")

    enc = encode_score(shifted, cfg)
    track = rng.randrange(enc.n_tracks)
    occupancy = [bool(enc.bar_notes(track, b)) for b in range(enc.n_bars)]
    start, length = select_infill_region(occupancy, rng, max_attempts=max_region_attempts)
    order = list(range(enc.n_tracks))
    rng.shuffle(order)

    spec = PromptSpec(
        track_index=track,
        start=start,
        length=length,
        context=0,
        track_order=tuple(order),
    )
    context = select_context(enc, spec, vocab, seq_budget)
    spec = replace(spec, context=context)
    ids, span, _ = prompt_ids(enc, spec, vocab, "train")
    return TrainingExample(tuple(ids), span, length, octaves, spec)


# ---------------------------------------------------------------------------
# fill-section parsing and splice-back

_FILL_TERMINATORS = frozenset({TokenKind.BAR_NONE, TokenKind.FILLBAR_END})


def parse_fill_section(
    tokens: Sequence[BaseToken], n_bars: int
) -> tuple[list[list[tuple[int, int, int, int]]], list[AttributeControls]]:
    """Parse controls+content for `n_bars` fill bars.

    Accepts streams with or without the enclosing FillBar_Start/End.
    Returns per-bar note tuples (pos, pitch, vbin, units) and the parsed
    controls.
    """
    toks = list(tokens)
    if toks and toks[0].kind is TokenKind.FILLBAR_START:
        toks = toks[1:]
    if not toks or toks[-1].kind is not TokenKind.FILLBAR_END:
        toks.append(BaseToken(TokenKind.FILLBAR_END))

    bars: list[list[tuple[int, int, int, int]]] = []
    controls: list[AttributeControls] = []
    i = 0
    for b in range(n_bars):
        if b > 0:
            if i >= len(toks) or toks[i].kind is not TokenKind.BAR_NONE:
                raise SpliceError(f"expected bar separator before fill bar {b + 1}")
            i += 1
        ctrl, i = AttributeControls.parse(toks, i)
        try:
            i, notes, _ = parse_positions(
                toks, i, allow_tempo=False, terminators=_FILL_TERMINATORS
            )
        except DecodeError as e:
            raise SpliceError(f"bad fill content in bar {b + 1}: {e}") from e
        bars.append(notes)
        controls.append(ctrl)
    if i != len(toks) - 1 or toks[i].kind is not TokenKind.FILLBAR_END:
        raise SpliceError(f"fill section does not contain exactly {n_bars} bars")
    return bars, controls


def splice_back(
    score: Score,
    spec: PromptSpec,
    generated: Sequence[BaseToken] | Sequence[int],
    vocab: Vocabulary,
) -> Score:
    """Replace the region's notes on the masked track with generated
    content. Notes starting outside the region are returned bitwise
    unchanged; generated notes are merged among themselves and then
    trimmed (or dropped) where they would collide with a same-pitch note
    sustaining into the region or starting after it."""
    cfg = vocab.cfg
    enc = encode_score(score, cfg)
    spec.validate(enc)
    if generated and isinstance(generated[0], int):
        tokens = vocab.decode_ids(invert_bpe(list(generated), vocab))
    else:
        tokens = list(generated)
    bars, _controls = parse_fill_section(tokens, spec.length)

    region_lo = enc.bars[spec.start][0]
    region_hi = enc.bars[spec.start + spec.length - 1][1]
    kept = [
        n
        for n in score.tracks[spec.track_index].notes
        if not region_lo <= n.onset < region_hi
    ]
    generated_notes: list[Note] = []
    for bar_offset, bar_notes in enumerate(bars):
        bar_start, bar_end = enc.bars[spec.start + bar_offset]
        for pos, pitch, vbin, units in bar_notes:
            if bar_start + pos * enc.step >= bar_end:
                raise SpliceError(
                    f"position {pos} falls beyond bar {spec.start + bar_offset}"
                )
            generated_notes.append(
                Note(
                    onset=bar_start + pos * enc.step,
                    pitch=pitch,
                    duration=units * enc.step,
                    velocity=cfg.velocity_value(vbin),
                )
            )
    merged, _ = merge_overlapping_notes(generated_notes)

    # untouched notes rule: per pitch, at most one note sustains across the
    # region start, and notes after the region bound generated durations
    sustain_end: dict[int, int] = {}
    after_onsets: dict[int, list[int]] = {}
    for n in kept:
        if n.onset < region_lo and n.onset + n.duration > region_lo:
            sustain_end[n.pitch] = max(
                sustain_end.get(n.pitch, 0), n.onset + n.duration
            )
        elif n.onset >= region_hi:
            after_onsets.setdefault(n.pitch, []).append(n.onset)
    for onsets in after_onsets.values():
        onsets.sort()
    resolved: list[Note] = []
    for g in merged:
        onset, end = g.onset, g.onset + g.duration
        held = sustain_end.get(g.pitch)
        if held is not None and onset < held:
            if held >= min(end, region_hi):
                continue
            onset = held
        following = after_onsets.get(g.pitch)
        if following and following[0] < end:
            end = following[0]
        resolved.append(Note(onset, g.pitch, end - onset, g.velocity))

    tracks = list(score.tracks)
    tracks[spec.track_index] = Track(
        tracks[spec.track_index].program, sorted(kept + resolved)
    )
    return Score(
        ticks_per_quarter=score.ticks_per_quarter,
        tracks=tracks,
        tempo_map=list(score.tempo_map),
        timesig_map=list(score.timesig_map),
        warnings=list(score.warnings),
        dropped_events=score.dropped_events,
    )


# ---------------------------------------------------------------------------
# structural validation


@dataclass(frozen=True)
class PromptShape:
    n_tracks: int
    window_bars: int
    masked_track_position: int  # position in serialization order
    n_infill_bars: int
    fill_bars: int
    controls: tuple[AttributeControls, ...]


def _positions_or_grammar_error(
    toks: list[BaseToken], i: int, *, allow_tempo: bool, terminators: frozenset[TokenKind]
) -> tuple[int, list[tuple[int, int, int, int]]]:
    try:
        i, notes, _ = parse_positions(toks, i, allow_tempo=allow_tempo, terminators=terminators)
    except DecodeError as e:
        raise PromptGrammarError(str(e).rsplit(" (token index", 1)[0], e.index) from e
    return i, notes


def validate_prompt(tokens: Sequence[BaseToken], mode: str = "train") -> PromptShape:
    """Walk a serialized prompt and enforce its grammar."""
    toks = list(tokens)
    i = 0
    track_bars: list[int] = []
    infill_counts: list[int] = []
    while i < len(toks) and toks[i].kind is TokenKind.TRACK_START:
        if i + 1 >= len(toks) or toks[i + 1].kind is not TokenKind.PROGRAM:
            raise PromptGrammarError("expected program after Track_Start", i + 1)
        i += 2
        bars = 0
        infills = 0
        while i < len(toks) and toks[i].kind is not TokenKind.TRACK_END:
            tok = toks[i]
            if tok.kind is TokenKind.INFILL_BAR:
                bars += 1
                infills += 1
                i += 1
            elif tok.kind is TokenKind.BAR_NONE:
                bars += 1
                i += 1
                if i < len(toks) and toks[i].kind is TokenKind.TIMESIG:
                    i += 1
                i, _ = _positions_or_grammar_error(
                    toks,
                    i,
                    allow_tempo=True,
                    terminators=frozenset(
                        {TokenKind.BAR_NONE, TokenKind.TRACK_END, TokenKind.INFILL_BAR}
                    ),
                )
            else:
                raise PromptGrammarError(f"unexpected {tok} in track body", i)
        if i >= len(toks):
            raise PromptGrammarError("missing Track_End", len(toks) - 1)
        if bars == 0:
            raise PromptGrammarError("track has no bars", i)
        track_bars.append(bars)
        infill_counts.append(infills)
        i += 1

    if not track_bars:
        raise PromptGrammarError("no track sections", 0)
    if len(set(track_bars)) != 1:
        raise PromptGrammarError(f"tracks disagree on window size {track_bars}", i)
    masked = [t for t, c in enumerate(infill_counts) if c]
    if len(masked) != 1:
        raise PromptGrammarError(f"expected exactly one masked track, got {len(masked)}", i)

    if i >= len(toks) or toks[i].kind is not TokenKind.FILLBAR_START:
        raise PromptGrammarError("expected FillBar_Start", i)
    i += 1
    fill_bars = 0
    controls: list[AttributeControls] = []
    if mode == "infer":
        ctrl, i = AttributeControls.parse(toks, i)
        if i != len(toks):
            raise PromptGrammarError("inference prompt must end after bar-1 controls", i)
        return PromptShape(
            len(track_bars), track_bars[0], masked[0], infill_counts[masked[0]], 1, (ctrl,)
        )
    while True:
        ctrl, i = AttributeControls.parse(toks, i)
        controls.append(ctrl)
        i, notes = _positions_or_grammar_error(
            toks, i, allow_tempo=False, terminators=_FILL_TERMINATORS
        )
        if not notes:
            raise PromptGrammarError("empty fill bar", i)
        fill_bars += 1
        if toks[i].kind is TokenKind.FILLBAR_END:
            break
        i += 1  # Bar_None separator
    if i != len(toks) - 1:
        raise PromptGrammarError("trailing tokens after FillBar_End", i + 1)
    if fill_bars != infill_counts[masked[0]]:
        raise PromptGrammarError(
            f"{fill_bars} fill bars for {infill_counts[masked[0]]} masked bars", i
        )
    return PromptShape(
        len(track_bars), track_bars[0], masked[0], infill_counts[masked[0]],
        fill_bars, tuple(controls),
    )


# ---------------------------------------------------------------------------
# dataset shards


def substream_rng(seed: int, epoch: int, file_index: int) -> random.Random:
    digest = hashlib.sha256(f"{seed}:{epoch}:{file_index}".encode()).digest()
    return random.Random(int.from_bytes(digest[:8], "little"))


def corpus_filter(enc: ScoreEncoding, *, min_bars: int = 8, min_notes: int = 100) -> bool:
    total = sum(
        len(enc.bar_notes(t, b)) for t in range(enc.n_tracks) for b in range(enc.n_bars)
    )
    return enc.n_bars >= min_bars and total >= min_notes


def build_dataset(
    scores: Iterable[Score],
    out_dir: str | Path,
    *,
    vocab: Vocabulary,
    seq_budget: int,
    seed: int,
    epoch: int,
    min_bars: int = 8,
    min_notes: int = 100,
    examples_per_file: int = 1,
) -> dict:
    """Synthesize one epoch of training examples into a shard directory:
    hash-checked id binaries plus a JSON manifest."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    manifest: dict = {
        "format": "mrwkv-dataset",
        "version": 1,
        "seed": seed,
        "epoch": epoch,
        "seq_budget": seq_budget,
        "filters": {"min_bars": min_bars, "min_notes": min_notes},
        "vocab_hash": vocab.content_hash(),
        "examples": [],
        "rejected": 0,
        "filtered": 0,
    }
    n = 0
    for file_index, score in enumerate(scores):
        try:
            enc = encode_score(score, vocab.cfg)
        except (TokenizeError, MidiError):
            manifest["filtered"] += 1
            continue
        if not corpus_filter(enc, min_bars=min_bars, min_notes=min_notes):
            manifest["filtered"] += 1
            continue
        rng = substream_rng(seed, epoch, file_index)
        for _ in range(examples_per_file):
            try:
                ex = make_training_example(
                    score, rng=rng, vocab=vocab, seq_budget=seq_budget
                )
            except ExampleRejected:
                manifest["rejected"] += 1
                continue
            name = f"ex_{n:06d}.bin"
            (out / name).write_bytes(pack_ids(list(ex.ids), vocab))
            manifest["examples"].append(
                {
                    "bin": name,
                    "file_index": file_index,
                    "span": list(ex.span),
                    "n_bars": ex.n_bars,
                    "octave_shift": ex.octave_shift,
                }
            )
            n += 1
    (out / "manifest.json").write_text(json.dumps(manifest, indent=1))
    return manifest


def load_dataset(shard_dir: str | Path, vocab: Vocabulary) -> list[TrainingExample]:
    shard = Path(shard_dir)
    manifest = json.loads((shard / "manifest.json").read_text())
    if manifest.get("format") != "mrwkv-dataset":
        raise PromptError("not a dataset shard")
    if manifest["vocab_hash"] != vocab.content_hash():
        raise PromptError("dataset was built with a different vocabulary")
    out = []
    for entry in manifest["examples"]:
        ids = unpack_ids((shard / entry["bin"]).read_bytes(), vocab)
        out.append(
            TrainingExample(
                ids=tuple(ids),
                span=tuple(entry["span"]),
                n_bars=entry["n_bars"],
                octave_shift=entry.get("octave_shift", 0),
            )
        )
    return out
