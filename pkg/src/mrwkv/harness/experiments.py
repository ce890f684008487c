"""Batch evaluation runs: N-bar objectives, sampling ablations, and
seeded train/test splits for personalization comparisons.

Every run is a pure function of (inputs, config, seed): example regions
come from named substreams, sampler seeds derive from the experiment
seed, and reports carry per-example values so significance tests can be
run downstream.
"""

from __future__ import annotations

import json
import math
import random
from pathlib import Path
from dataclasses import dataclass, replace
from typing import Callable, Sequence

from ..metrics import (
    AdherenceReport,
    ExampleMetrics,
    MetricReport,
    aggregate,
    attribute_adherence,
    region_metrics,
)
from ..midi_io import MidiError, Score, read_midi
from ..model import RWKV7, InitialState
from ..prompt import (
    AttributeControls,
    PromptSpec,
    SpliceError,
    compute_controls,
    prompt_ids,
    splice_back,
)
from ..sampler import SamplerConfig, SamplerError, generate_infill
from ..tokenizer import (
    ScoreEncoding,
    TokenizeError,
    TokenizerConfig,
    Vocabulary,
    encode_score,
)
from ..training import (
    CorpusSource,
    TrainConfig,
    default_train_config,
    evaluate_loss,
    parameter_fingerprint,
    state_tune,
)

__all__ = [
    "EVAL_TASKS",
    "EvalTask",
    "ExperimentConfig",
    "HarnessError",
    "ablation_grid",
    "choose_eval_region",
    "evaluate_pairs",
    "replay_original_fill",
    "run_objective_eval",
    "run_sampling_ablation",
    "run_style_split_experiment",
]

EVAL_TASKS = ((2, 8), (4, 16), (8, 32))


class HarnessError(RuntimeError):
    pass


@dataclass(frozen=True)
class ExperimentConfig:
    """One N-bar infilling task; the context window is four times the
    infill length."""

    n_bars: int
    n_examples: int
    seed: int = 0
    sampler: SamplerConfig = SamplerConfig()

    def __post_init__(self) -> None:
        if self.n_bars < 1:
            raise ValueError("n_bars must be positive")
        if self.n_examples < 1:
            raise ValueError("n_examples must be positive")

    @property
    def context(self) -> int:
        return 4 * self.n_bars

    def to_json_dict(self) -> dict:
        return {
            "n_bars": self.n_bars,
            "context": self.context,
            "n_examples": self.n_examples,
            "seed": self.seed,
            "sampler": self.sampler.to_json_dict(),
        }


def choose_eval_region(enc, n_bars: int, rng: random.Random):
    """A (track, start) whose N consecutive bars all contain notes, or
    None when the score offers no such window."""
    candidates = [
        (t, s)
        for t in range(enc.n_tracks)
        for s in range(enc.n_bars - n_bars + 1)
        if all(enc.bar_notes(t, s + j) for j in range(n_bars))
    ]
    if not candidates:
        return None
    return candidates[rng.randrange(len(candidates))]


@dataclass(frozen=True)
class EvalTask:
    """Everything one generation call needs, plus the source encoding
    so replacement generators (e.g. replay oracles) can look back at
    the original bars."""

    ids: tuple[int, ...]
    controls: tuple[AttributeControls, ...]
    sampler: SamplerConfig
    caps: tuple[int, ...]
    enc: ScoreEncoding
    spec: PromptSpec


GenerateFn = Callable[[RWKV7, Vocabulary, EvalTask, InitialState | None], Sequence[int]]


def _sampled_fill(
    model: RWKV7,
    vocab: Vocabulary,
    task: EvalTask,
    initial_state: InitialState | None,
) -> Sequence[int]:
    return generate_infill(
        model,
        vocab,
        task.ids,
        task.controls,
        task.sampler,
        initial_state=initial_state,
        bar_caps=task.caps,
    ).fill_ids


def replay_original_fill(
    model: RWKV7,
    vocab: Vocabulary,
    task: EvalTask,
    initial_state: InitialState | None,
) -> Sequence[int]:
    """Oracle generator: the original bars' own fill section."""
    ids, (lo, hi), _ = prompt_ids(task.enc, task.spec, vocab, mode="train")
    return ids[lo : hi + 1]


def run_objective_eval(
    model: RWKV7,
    vocab: Vocabulary,
    scores: Sequence[Score],
    config: ExperimentConfig,
    *,
    initial_state: InitialState | None = None,
    generate: GenerateFn = _sampled_fill,
) -> MetricReport:
    """Mask, infill, splice, and measure `config.n_examples` regions.

    Scores are visited cyclically with a fresh region substream per
    visit; scores without an eligible window are skipped; generation
    failures are counted and excluded. `generate` can be swapped out,
    e.g. for an oracle that replays the original bars.
    """
    if not scores:
        raise HarnessError("no scores to evaluate")
    cfg = vocab.cfg
    encs = [encode_score(s, cfg) for s in scores]
    examples: list[ExampleMetrics] = []
    requested_all: list[AttributeControls] = []
    realized_all: list[list] = []
    failures = 0
    visits = 0
    max_visits = 8 * config.n_examples + len(scores)
    while len(examples) < config.n_examples and visits < max_visits:
        idx = visits % len(scores)
        rng = random.Random(f"objective:{config.seed}:{visits}")
        visits += 1
        score, enc = scores[idx], encs[idx]
        found = choose_eval_region(enc, config.n_bars, rng)
        if found is None:
            continue
        track, start = found
        bars = range(start, start + config.n_bars)
        requested = tuple(
            compute_controls(enc.bar_notes(track, b), cfg) for b in bars
        )
        spec = PromptSpec(
            track_index=track,
            start=start,
            length=config.n_bars,
            context=config.context,
            track_order=tuple(range(enc.n_tracks)),
            controls=requested,
        )
        ids, _, _ = prompt_ids(enc, spec, vocab, mode="infer")
        task = EvalTask(
            ids=tuple(ids),
            controls=requested,
            sampler=replace(
                config.sampler, seed=(config.seed * 1_000_003 + visits) & 0x7FFFFFFF
            ),
            caps=tuple(enc.bar_positions[b] for b in bars),
            enc=enc,
            spec=spec,
        )
        try:
            fill = generate(model, vocab, task, initial_state)
            spliced = splice_back(score, spec, list(fill), vocab)
        except (SamplerError, SpliceError):
            failures += 1
            continue
        enc_out = encode_score(spliced, cfg)
        original_bars = [enc.bar_notes(track, b) for b in bars]
        infilled_bars = [enc_out.bar_notes(track, b) for b in bars]
        examples.append(
            region_metrics(
                original_bars,
                infilled_bars,
                [enc.bar_positions[b] for b in bars],
            )
        )
        requested_all.extend(requested)
        realized_all.extend(infilled_bars)
    if len(examples) < config.n_examples:
        raise HarnessError(
            f"collected {len(examples)}/{config.n_examples} examples "
            f"({failures} generation failures)"
        )
    # splice collision handling can empty a realized bar; adherence is
    # only defined where controls can be recomputed
    pairs = [(r, b) for r, b in zip(requested_all, realized_all) if b]
    adherence: AdherenceReport | None = None
    if pairs:
        adherence = attribute_adherence(
            [r for r, _ in pairs], [b for _, b in pairs], cfg
        )
    return aggregate(examples, adherence=adherence, failures=failures)


ABLATION_VALUES = (
    ("temperature", (0.8, 1.2)),
    ("repetition_penalty", (1.0, 1.4)),
    ("top_p", (0.9, 0.98)),
    ("top_k", (15, 30)),
)


def ablation_grid(default: SamplerConfig) -> list[tuple[str, SamplerConfig]]:
    """The default plus eight single-parameter variants."""
    grid = [("default", default)]
    for field, values in ABLATION_VALUES:
        for value in values:
            grid.append((f"{field}={value}", replace(default, **{field: value})))
    return grid


def run_sampling_ablation(
    model: RWKV7,
    vocab: Vocabulary,
    scores: Sequence[Score],
    *,
    n_bars: int = 2,
    n_examples: int = 100,
    seed: int = 0,
    default: SamplerConfig = SamplerConfig(),
    initial_state: InitialState | None = None,
) -> list[tuple[str, MetricReport]]:
    """Objective metrics with one sampler parameter varied at a time."""
    out = []
    for label, sampler in ablation_grid(default):
        config = ExperimentConfig(
            n_bars=n_bars, n_examples=n_examples, seed=seed, sampler=sampler
        )
        out.append(
            (label, run_objective_eval(
                model, vocab, scores, config, initial_state=initial_state
            ))
        )
    return out


def run_style_split_experiment(
    model: RWKV7,
    vocab: Vocabulary,
    scores: Sequence[Score],
    *,
    train_size: int = 8,
    n_splits: int = 3,
    seed: int = 0,
    seq_budget: int = 1024,
    train_config: TrainConfig | None = None,
) -> list[dict]:
    """Seeded disjoint train/test splits; tune an initial state on each
    train side and compare held-out loss against the frozen base.

    Base weights are fingerprinted before and after to guarantee the
    comparison never leaks tuning into the shared model.
    """
    if not 0 < train_size < len(scores):
        raise HarnessError("train_size must split the corpus")
    cfg = train_config or default_train_config(
        "state", epochs=4, batch_size=4, seq_len=seq_budget
    )
    if cfg.mode != "state":
        raise HarnessError("split experiment tunes initial states")
    results = []
    before = parameter_fingerprint(model)
    for split in range(n_splits):
        rng = random.Random(f"split:{seed}:{split}")
        train_idx = sorted(rng.sample(range(len(scores)), train_size))
        test_idx = [i for i in range(len(scores)) if i not in set(train_idx)]
        train_scores = [scores[i] for i in train_idx]
        test_scores = [scores[i] for i in test_idx]
        source = CorpusSource(
            train_scores,
            vocab=vocab,
            seq_budget=cfg.seq_len,
            seed=cfg.seed + split,
        )
        state, train_result = state_tune(model, source, cfg)
        held_out = CorpusSource(
            test_scores,
            vocab=vocab,
            seq_budget=cfg.seq_len,
            seed=cfg.seed + split,
        ).examples(epoch=0)
        base_loss = evaluate_loss(model, held_out, batch_size=cfg.batch_size)
        tuned_loss = evaluate_loss(
            model, held_out, batch_size=cfg.batch_size, initial_state=state
        )
        results.append(
            {
                "split": split,
                "train_indices": train_idx,
                "test_size": len(test_idx),
                "train_steps": train_result.steps,
                "base_loss": base_loss,
                "tuned_loss": tuned_loss,
                "improved": tuned_loss < base_loss,
            }
        )
    if parameter_fingerprint(model) != before:
        raise HarnessError("split experiment mutated the base model")
    return results


def _finite(value):
    """NaN and infinities become None so reports stay strict JSON."""
    if isinstance(value, dict):
        return {k: _finite(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_finite(v) for v in value]
    if isinstance(value, float) and not math.isfinite(value):
        return None
    return value


def _load_region(path: Path) -> tuple[int, int, int]:
    try:
        raw = json.loads(path.read_text())
        track, start, length = int(raw["track"]), int(raw["start"]), int(raw["length"])
    except FileNotFoundError:
        raise HarnessError(f"missing region file {path.name}") from None
    except (ValueError, TypeError, KeyError) as e:
        raise HarnessError(f"{path.name} needs integer track, start, and length") from e
    if track < 0 or start < 0 or length < 1:
        raise HarnessError(f"{path.name} region is out of range")
    return track, start, length


def evaluate_pairs(pairs_dir: str | Path, cfg: TokenizerConfig) -> dict:
    """Score every original/infilled MIDI pair in a folder.

    A pair is <stem>.original.mid plus <stem>.infilled.mid, with the
    evaluated region named by <stem>.region.json (track, start, length).
    Returns the aggregate report as a JSON-ready dict; "examples" holds
    the per-pair values aligned with "pairs".
    """
    root = Path(pairs_dir)
    if not root.is_dir():
        raise HarnessError(f"pairs directory {root} does not exist")
    originals = sorted(root.glob("*.original.mid"))
    if not originals:
        raise HarnessError(f"no *.original.mid files in {root}")
    stems, examples = [], []
    for opath in originals:
        stem = opath.name[: -len(".original.mid")]
        track, start, length = _load_region(root / f"{stem}.region.json")
        ipath = root / f"{stem}.infilled.mid"
        if not ipath.is_file():
            raise HarnessError(f"missing infilled file {ipath.name}")
        try:
            enc_o = encode_score(read_midi(opath.read_bytes()), cfg)
            enc_i = encode_score(read_midi(ipath.read_bytes()), cfg)
        except (MidiError, TokenizeError) as e:
            raise HarnessError(f"{stem}: {e}") from e
        bars = range(start, start + length)
        for name, enc in ((opath.name, enc_o), (ipath.name, enc_i)):
            if track >= enc.n_tracks or start + length > enc.n_bars:
                raise HarnessError(f"{name} has no track {track} bars {start}..{start + length}")
        units = [enc_o.bar_positions[b] for b in bars]
        if units != [enc_i.bar_positions[b] for b in bars]:
            raise HarnessError(f"{stem}: scores disagree on the region's bar grid")
        examples.append(
            region_metrics(
                [enc_o.bar_notes(track, b) for b in bars],
                [enc_i.bar_notes(track, b) for b in bars],
                units,
            )
        )
        stems.append(stem)
    report = _finite(aggregate(examples).to_json_dict())
    report["pairs"] = stems
    return report
