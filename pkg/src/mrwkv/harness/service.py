"""HTTP front end for the infilling model.

MIDI travels as base64-encoded standard MIDI files, never streamed. The
loaded checkpoint is shared and immutable; a single lock serializes
generation so concurrent requests produce exactly what serialized calls
with the same seeds would. Request problems map to 400 (bad region or
control spec), 422 (payload that does not parse as MIDI), and 503
(checkpoint still loading).
"""

from __future__ import annotations

import base64
import math
import os
import threading
import time
from contextlib import asynccontextmanager
from dataclasses import dataclass, replace
from pathlib import Path

from fastapi import FastAPI, HTTPException
from pydantic import BaseModel, Field

from .. import __version__
from ..metrics import MetricError, aggregate, region_metrics
from ..midi_io import MidiError, Score, read_midi, write_midi
from ..model import CheckpointError, InitialState, RWKV7, load_initial_state, load_lora, load_model
from ..prompt import (
    AttributeControls,
    EmptyBarError,
    PromptError,
    PromptSpec,
    SpliceError,
    compute_controls,
    prompt_ids,
    splice_back,
)
from ..sampler import SamplerConfig, SamplerError, generate_infill
from ..tokenizer import (
    DUR_CLASS_NAMES,
    ScoreEncoding,
    TokenizeError,
    Vocabulary,
    encode_score,
    load_vocab,
)

__all__ = [
    "CHECKPOINT_DIR_ENV",
    "LORA_FILE",
    "MODEL_FILE",
    "STATE_FILE",
    "VOCAB_FILE",
    "ModelBundle",
    "create_app",
]

CHECKPOINT_DIR_ENV = "MRWKV_CHECKPOINT_DIR"

MODEL_FILE = "model.ckpt"
VOCAB_FILE = "vocab.json"
STATE_FILE = "state.ckpt"
LORA_FILE = "lora.ckpt"

_DUR_FIELDS = tuple(f"dur_{name}" for name in DUR_CLASS_NAMES)


@dataclass
class ModelBundle:
    """A checkpoint ready to serve: model, vocabulary, and whichever
    personalization artifacts sat next to them."""

    model: RWKV7
    vocab: Vocabulary
    variant: str = "base"
    initial_state: InitialState | None = None

    def __post_init__(self) -> None:
        if self.variant not in ("base", "state", "lora"):
            raise ValueError(f"unknown variant {self.variant!r}")
        if self.model.cfg.vocab_size != self.vocab.size:
            raise CheckpointError(
                f"model vocab size {self.model.cfg.vocab_size} "
                f"!= vocabulary size {self.vocab.size}"
            )
        self.lock = threading.Lock()

    @staticmethod
    def load(checkpoint_dir: str | Path) -> "ModelBundle":
        """Read model.ckpt and vocab.json; an adjacent lora.ckpt or
        state.ckpt switches the served variant."""
        d = Path(checkpoint_dir)
        model = load_model(d / MODEL_FILE)
        model.eval()
        vocab = load_vocab(d / VOCAB_FILE)
        variant = "base"
        state = None
        if (d / LORA_FILE).exists():
            load_lora(d / LORA_FILE, model)
            variant = "lora"
        if (d / STATE_FILE).exists():
            state = load_initial_state(d / STATE_FILE, dtype=model.dtype)
            if state.cfg != model.cfg:
                raise CheckpointError(
                    "initial state was tuned for a different model config"
                )
            if variant == "base":
                variant = "state"
        return ModelBundle(model, vocab, variant, state)


class _BundleHolder:
    def __init__(self, bundle: ModelBundle | None):
        self.bundle = bundle
        self.error: str | None = None

    def load_from(self, checkpoint_dir: str | Path) -> None:
        try:
            self.bundle = ModelBundle.load(checkpoint_dir)
        except Exception as e:  # surfaced through /health and 503 details
            self.error = f"{type(e).__name__}: {e}"

    def require(self) -> ModelBundle:
        if self.bundle is not None:
            return self.bundle
        if self.error is not None:
            raise HTTPException(503, f"checkpoint failed to load: {self.error}")
        raise HTTPException(503, "checkpoint is loading")


# ---------------------------------------------------------------------------
# wire types


class ControlValues(BaseModel):
    """Per-bar conditioning; unset fields fall back to values computed
    from the original bar."""

    density: int | None = Field(default=None, ge=1)
    dur_whole: bool | None = None
    dur_half: bool | None = None
    dur_quarter: bool | None = None
    dur_eighth: bool | None = None
    dur_sixteenth: bool | None = None
    poly_min: int | None = Field(default=None, ge=1)
    poly_max: int | None = Field(default=None, ge=1)

    @staticmethod
    def from_controls(ctrl: AttributeControls) -> "ControlValues":
        values = {
            field: flag for field, flag in zip(_DUR_FIELDS, ctrl.dur_classes)
        }
        return ControlValues(
            density=ctrl.density,
            poly_min=ctrl.poly_min,
            poly_max=ctrl.poly_max,
            **values,
        )

    def merged_with(self, base: AttributeControls | None) -> AttributeControls:
        fields = {
            "density": self.density,
            "poly_min": self.poly_min,
            "poly_max": self.poly_max,
        }
        flags = [getattr(self, f) for f in _DUR_FIELDS]
        if base is not None:
            for name, value in list(fields.items()):
                if value is None:
                    fields[name] = getattr(base, name)
            flags = [
                flag if flag is not None else have
                for flag, have in zip(flags, base.dur_classes)
            ]
        if None in flags or any(v is None for v in fields.values()):
            raise PromptError(
                "bar has no original notes to compute controls from; "
                "all control fields must be provided"
            )
        return AttributeControls(dur_classes=tuple(flags), **fields)


class SamplerOverrides(BaseModel):
    temperature: float | None = None
    repetition_penalty: float | None = None
    top_k: int | None = None
    top_p: float | None = None
    max_tokens: int | None = None

    def applied_to(self, base: SamplerConfig) -> SamplerConfig:
        changes = {k: v for k, v in self.model_dump().items() if v is not None}
        return replace(base, **changes)


class RegionRequest(BaseModel):
    midi_base64: str
    track: int = Field(ge=0)
    start: int = Field(ge=0)
    length: int = Field(ge=1)


class InfillRequest(RegionRequest):
    context: int | None = Field(default=None, ge=0)
    controls: list[ControlValues | None] | None = None
    sampler: SamplerOverrides | None = None
    seed: int = 0


class InfillResponse(BaseModel):
    midi_base64: str
    requested_controls: list[ControlValues]
    realized_controls: list[ControlValues | None]
    n_bars: int
    seed: int
    elapsed_seconds: float


class ControlsResponse(BaseModel):
    controls: list[ControlValues | None]


class MetricsRequest(BaseModel):
    original_base64: str
    infilled_base64: str
    track: int = Field(ge=0)
    start: int = Field(ge=0)
    length: int = Field(ge=1)


class ModelInfo(BaseModel):
    config: dict
    variant: str
    vocab_hash: str
    vocab_size: int
    version: str


class Health(BaseModel):
    status: str


# ---------------------------------------------------------------------------
# request plumbing


def _decode_midi(data_b64: str) -> Score:
    try:
        raw = base64.b64decode(data_b64, validate=True)
    except ValueError as e:
        raise HTTPException(422, f"payload is not valid base64: {e}") from e
    try:
        return read_midi(raw)
    except MidiError as e:
        raise HTTPException(422, f"payload is not a readable MIDI file: {e}") from e


def _encode_region(
    vocab: Vocabulary, score: Score, track: int, start: int, length: int
) -> ScoreEncoding:
    try:
        enc = encode_score(score, vocab.cfg)
    except TokenizeError as e:
        raise HTTPException(422, f"MIDI does not fit the token grid: {e}") from e
    if not 0 <= track < enc.n_tracks:
        raise HTTPException(400, f"track {track} out of range 0..{enc.n_tracks - 1}")
    if start + length > enc.n_bars:
        raise HTTPException(
            400, f"bars [{start}, {start + length}) outside 0..{enc.n_bars}"
        )
    return enc


def _without_nan(value):
    if isinstance(value, dict):
        return {k: _without_nan(v) for k, v in value.items()}
    if isinstance(value, list):
        return [_without_nan(v) for v in value]
    if isinstance(value, float) and math.isnan(value):
        return None
    return value


def _bar_controls(enc: ScoreEncoding, track: int, bar: int) -> AttributeControls | None:
    try:
        return compute_controls(enc.bar_notes(track, bar), enc.cfg)
    except EmptyBarError:
        return None


def _resolve_requested(
    enc: ScoreEncoding, req: InfillRequest
) -> tuple[AttributeControls, ...]:
    overrides = req.controls
    if overrides is not None and len(overrides) != req.length:
        raise HTTPException(
            400, f"controls list has {len(overrides)} entries for {req.length} bars"
        )
    out = []
    for i, bar in enumerate(range(req.start, req.start + req.length)):
        base = _bar_controls(enc, req.track, bar)
        override = overrides[i] if overrides is not None else None
        try:
            if override is None:
                if base is None:
                    raise PromptError(
                        f"bar {bar} is empty; controls for it must be provided"
                    )
                ctrl = base
            else:
                ctrl = override.merged_with(base)
            ctrl.validate(enc.cfg)
        except PromptError as e:
            raise HTTPException(400, str(e)) from e
        out.append(ctrl)
    return tuple(out)


# ---------------------------------------------------------------------------
# application


def create_app(
    bundle: ModelBundle | None = None,
    *,
    checkpoint_dir: str | Path | None = None,
) -> FastAPI:
    """The service app. With a `bundle` it serves immediately; otherwise
    the checkpoint directory (argument or MRWKV_CHECKPOINT_DIR) loads in
    a background thread at startup and requests get 503 until it is in."""
    if bundle is None and checkpoint_dir is None:
        checkpoint_dir = os.environ.get(CHECKPOINT_DIR_ENV)
        if not checkpoint_dir:
            raise ValueError(
                f"need a bundle, a checkpoint_dir, or {CHECKPOINT_DIR_ENV}"
            )
    holder = _BundleHolder(bundle)

    @asynccontextmanager
    async def lifespan(app: FastAPI):
        if holder.bundle is None:
            threading.Thread(
                target=holder.load_from, args=(checkpoint_dir,), daemon=True
            ).start()
        yield

    app = FastAPI(
        title="mrwkv infilling service",
        description="Bar-level symbolic music infilling over base64 MIDI.",
        version=__version__,
        lifespan=lifespan,
    )

    @app.get("/health", response_model=Health)
    def health() -> Health:
        if holder.bundle is not None:
            return Health(status="ok")
        if holder.error is not None:
            return Health(status=f"error: {holder.error}")
        return Health(status="loading")

    @app.get("/model", response_model=ModelInfo)
    def model_info() -> ModelInfo:
        bundle = holder.require()
        return ModelInfo(
            config=bundle.model.cfg.to_json_dict(),
            variant=bundle.variant,
            vocab_hash=bundle.vocab.content_hash(),
            vocab_size=bundle.vocab.size,
            version=__version__,
        )

    @app.post("/infill", response_model=InfillResponse)
    def infill(req: InfillRequest) -> InfillResponse:
        bundle = holder.require()
        began = time.perf_counter()
        score = _decode_midi(req.midi_base64)
        enc = _encode_region(bundle.vocab, score, req.track, req.start, req.length)
        requested = _resolve_requested(enc, req)
        context = req.context if req.context is not None else 4 * req.length
        spec = PromptSpec(
            track_index=req.track,
            start=req.start,
            length=req.length,
            context=context,
            track_order=tuple(range(enc.n_tracks)),
            controls=requested,
        )
        try:
            ids, _, _ = prompt_ids(enc, spec, bundle.vocab, mode="infer")
        except PromptError as e:
            raise HTTPException(400, str(e)) from e
        try:
            sampler = (req.sampler or SamplerOverrides()).applied_to(SamplerConfig())
            sampler = replace(sampler, seed=req.seed)
        except ValueError as e:
            raise HTTPException(400, f"bad sampler settings: {e}") from e
        caps = tuple(
            enc.bar_positions[b] for b in range(req.start, req.start + req.length)
        )
        try:
            with bundle.lock:
                fill = generate_infill(
                    bundle.model,
                    bundle.vocab,
                    ids,
                    list(requested),
                    sampler,
                    initial_state=bundle.initial_state,
                    bar_caps=caps,
                ).fill_ids
            spliced = splice_back(score, spec, fill, bundle.vocab)
        except (SamplerError, SpliceError) as e:
            raise HTTPException(500, f"generation failed: {e}") from e
        enc_out = encode_score(spliced, bundle.vocab.cfg)
        realized = [
            _bar_controls(enc_out, req.track, b)
            for b in range(req.start, req.start + req.length)
        ]
        return InfillResponse(
            midi_base64=base64.b64encode(write_midi(spliced)).decode("ascii"),
            requested_controls=[ControlValues.from_controls(c) for c in requested],
            realized_controls=[
                ControlValues.from_controls(c) if c is not None else None
                for c in realized
            ],
            n_bars=req.length,
            seed=req.seed,
            elapsed_seconds=time.perf_counter() - began,
        )

    @app.post("/controls", response_model=ControlsResponse)
    def controls(req: RegionRequest) -> ControlsResponse:
        bundle = holder.require()
        score = _decode_midi(req.midi_base64)
        enc = _encode_region(bundle.vocab, score, req.track, req.start, req.length)
        return ControlsResponse(
            controls=[
                (
                    ControlValues.from_controls(c)
                    if (c := _bar_controls(enc, req.track, b)) is not None
                    else None
                )
                for b in range(req.start, req.start + req.length)
            ]
        )

    @app.post("/metrics")
    def metrics(req: MetricsRequest) -> dict:
        bundle = holder.require()
        enc_o = _encode_region(
            bundle.vocab, _decode_midi(req.original_base64),
            req.track, req.start, req.length,
        )
        enc_i = _encode_region(
            bundle.vocab, _decode_midi(req.infilled_base64),
            req.track, req.start, req.length,
        )
        bars = range(req.start, req.start + req.length)
        units = [enc_o.bar_positions[b] for b in bars]
        if units != [enc_i.bar_positions[b] for b in bars]:
            raise HTTPException(400, "scores disagree on the region's bar grid")
        try:
            example = region_metrics(
                [enc_o.bar_notes(req.track, b) for b in bars],
                [enc_i.bar_notes(req.track, b) for b in bars],
                units,
            )
        except MetricError as e:
            raise HTTPException(400, str(e)) from e
        return _without_nan(aggregate([example]).to_json_dict())

    return app
