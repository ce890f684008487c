"""Objective evaluation of infilled bars against the original content.

Four bar-level measures: content preservation (cosine similarity of
smoothed pitch-chroma sequences), groove similarity (matching onset
positions), pitch-class histogram entropy difference, and note F1.
Plus adherence measures comparing requested per-bar attribute controls
with what the generation actually realized.

Conventions, fixed here and relied on by the evaluation harness:
entropy is base 2; the chroma moving average uses trailing windows
clipped at the sequence start; a cosine term is skipped when either
averaged vector is zero; note F1 matches on (bar, position, pitch).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .prompt import AttributeControls, compute_controls
from .tokenizer import DUR_CLASS_NAMES, QNote, TokenizerConfig

__all__ = [
    "AdherenceReport",
    "ExampleMetrics",
    "MetricError",
    "MetricReport",
    "MetricSummary",
    "aggregate",
    "attribute_adherence",
    "density_error",
    "bar_chroma",
    "chroma_steps",
    "content_preservation",
    "entropy_bits",
    "f1_notes",
    "groove_pattern",
    "groove_similarity",
    "moving_average",
    "pche_difference",
    "region_metrics",
    "summarize",
]

CHROMA_STEPS = 16


class MetricError(ValueError):
    pass


def chroma_steps(
    notes: list[QNote], bar_units: int, steps: int = CHROMA_STEPS
) -> np.ndarray:
    """Per-step pitch-class distributions for one bar, shape (steps, 12).

    The bar's grid positions are partitioned into `steps` equal spans; a
    note contributes one count to the chroma of every step its sounding
    span overlaps (clipped at the bar end). Rows are normalized to sum
    to 1; silent steps stay all-zero.
    """
    if bar_units <= 0 or steps <= 0:
        raise MetricError("bar_units and steps must be positive")
    counts = np.zeros((steps, 12), dtype=np.float64)
    for q in notes:
        lo = q.pos * steps // bar_units
        end = min(q.pos + q.units, bar_units)
        hi = -((-end * steps) // bar_units)  # ceil division
        for s in range(max(lo, 0), min(hi, steps)):
            counts[s, q.pitch % 12] += 1.0
    totals = counts.sum(axis=1, keepdims=True)
    np.divide(counts, totals, out=counts, where=totals > 0)
    return counts


def moving_average(chroma: np.ndarray, frame: int) -> np.ndarray:
    """Trailing moving average over the step axis.

    Entry t averages rows max(0, t-frame+1)..t, so the output has the
    same length as the input and early windows are clipped at the start.
    """
    if frame <= 0:
        raise MetricError("frame must be positive")
    out = np.empty_like(chroma)
    csum = np.cumsum(chroma, axis=0)
    for t in range(len(chroma)):
        lo = t - frame + 1
        if lo <= 0:
            out[t] = csum[t] / (t + 1)
        else:
            out[t] = (csum[t] - csum[lo - 1]) / frame
    return out


def content_preservation(
    original: list[np.ndarray],
    infilled: list[np.ndarray],
    steps: int = CHROMA_STEPS,
) -> tuple[float | None, int]:
    """Average cosine similarity between smoothed chroma sequences.

    Takes per-bar (steps, 12) chroma arrays for both sides, concatenates
    them, smooths each with a trailing steps/2 moving average, and
    averages the per-step cosines. Steps where either averaged vector is
    zero are skipped; returns (value, skipped count), value None when
    every step was skipped.
    """
    if not original or len(original) != len(infilled):
        raise MetricError("need equal, nonzero bar counts")
    for arr in (*original, *infilled):
        if arr.shape != (steps, 12):
            raise MetricError(f"chroma array has shape {arr.shape}")
    a_o = moving_average(np.concatenate(original), frame=max(1, steps // 2))
    a_i = moving_average(np.concatenate(infilled), frame=max(1, steps // 2))
    norm_o = np.linalg.norm(a_o, axis=1)
    norm_i = np.linalg.norm(a_i, axis=1)
    live = (norm_o > 0) & (norm_i > 0)
    skipped = int(len(a_o) - live.sum())
    if not live.any():
        return None, skipped
    cosines = (a_o[live] * a_i[live]).sum(axis=1) / (norm_o[live] * norm_i[live])
    # identical rows are cosine 1 by definition; skip the sqrt round-off
    cosines[(a_o[live] == a_i[live]).all(axis=1)] = 1.0
    return float(cosines.mean()), skipped


def groove_pattern(notes: list[QNote], bar_units: int) -> np.ndarray:
    """Binary onset indicator per grid position of one bar."""
    if bar_units <= 0:
        raise MetricError("bar_units must be positive")
    g = np.zeros(bar_units, dtype=np.int64)
    for q in notes:
        if not 0 <= q.pos < bar_units:
            raise MetricError(f"onset position {q.pos} outside bar")
        g[q.pos] = 1
    return g


def groove_similarity(g_o: np.ndarray, g_i: np.ndarray) -> float:
    """Fraction of positions where the two onset patterns agree."""
    a = np.asarray(g_o)
    b = np.asarray(g_i)
    if a.shape != b.shape or a.ndim != 1 or len(a) == 0:
        raise MetricError("groove patterns must share a nonzero 1D shape")
    return float(1.0 - np.mean((a != 0) ^ (b != 0)))


def bar_chroma(notes: list[QNote]) -> np.ndarray:
    """Whole-bar pitch-class distribution (each note counted once)."""
    c = np.zeros(12, dtype=np.float64)
    for q in notes:
        c[q.pitch % 12] += 1.0
    total = c.sum()
    return c / total if total > 0 else c


def entropy_bits(dist: np.ndarray) -> float:
    """Base-2 entropy; zero entries contribute nothing."""
    p = np.asarray(dist, dtype=np.float64)
    live = p > 0
    return float(-(p[live] * np.log2(p[live])).sum())


def pche_difference(
    original: list[QNote], infilled: list[QNote]
) -> float | None:
    """Absolute pitch-class histogram entropy difference for a bar pair.

    An empty bar has entropy 0; the pair is skipped (None) only when
    both bars are empty.
    """
    if not original and not infilled:
        return None
    return abs(entropy_bits(bar_chroma(original)) - entropy_bits(bar_chroma(infilled)))


def f1_notes(
    original: set[tuple], infilled: set[tuple]
) -> float:
    """Harmonic mean of note precision and recall: 2|A∩B| / (|A|+|B|).

    Two empty sets compare as a perfect match.
    """
    if not original and not infilled:
        return 1.0
    return 2.0 * len(original & infilled) / (len(original) + len(infilled))


@dataclass(frozen=True)
class ExampleMetrics:
    """All four measures for one infilled region."""

    cp: float | None
    gs: float
    pche: float | None
    f1: float
    cp_skipped_steps: int
    notes_original: int
    notes_infilled: int

    def to_json_dict(self) -> dict:
        return {
            "cp": self.cp,
            "gs": self.gs,
            "pche": self.pche,
            "f1": self.f1,
            "cp_skipped_steps": self.cp_skipped_steps,
            "notes_original": self.notes_original,
            "notes_infilled": self.notes_infilled,
        }


def _note_keys(bars: list[list[QNote]], with_duration: bool) -> set[tuple]:
    keys = set()
    for b, notes in enumerate(bars):
        for q in notes:
            keys.add(
                (b, q.pos, q.pitch, q.units) if with_duration else (b, q.pos, q.pitch)
            )
    return keys


def region_metrics(
    original_bars: list[list[QNote]],
    infilled_bars: list[list[QNote]],
    bar_units: list[int],
    *,
    steps: int = CHROMA_STEPS,
    groove_on_steps: bool = False,
    f1_with_duration: bool = False,
) -> ExampleMetrics:
    """Evaluate one region: per-bar note lists for both sides plus the
    grid size of each bar.

    Groove patterns live on the tokenizer grid by default;
    `groove_on_steps` pools them onto the chroma step grid instead for
    comparisons against tools that fix 16 positions per bar. GS and
    PCHE are averaged over bars (PCHE over non-skipped pairs), CP runs
    over the concatenated step sequence, F1 over the region's note sets.
    """
    n = len(original_bars)
    if n == 0 or len(infilled_bars) != n or len(bar_units) != n:
        raise MetricError("need equal, nonzero bar counts")
    cp, cp_skipped = content_preservation(
        [chroma_steps(bar, u, steps) for bar, u in zip(original_bars, bar_units)],
        [chroma_steps(bar, u, steps) for bar, u in zip(infilled_bars, bar_units)],
        steps,
    )
    gs_terms = []
    pche_terms = []
    for bar_o, bar_i, units in zip(original_bars, infilled_bars, bar_units):
        if groove_on_steps:
            g_o = (chroma_steps(bar_o, units, steps).sum(axis=1) > 0).astype(int)
            g_i = (chroma_steps(bar_i, units, steps).sum(axis=1) > 0).astype(int)
            gs_terms.append(groove_similarity(g_o, g_i))
        else:
            gs_terms.append(
                groove_similarity(
                    groove_pattern(bar_o, units), groove_pattern(bar_i, units)
                )
            )
        d = pche_difference(bar_o, bar_i)
        if d is not None:
            pche_terms.append(d)
    return ExampleMetrics(
        cp=cp,
        gs=float(np.mean(gs_terms)),
        pche=float(np.mean(pche_terms)) if pche_terms else None,
        f1=f1_notes(
            _note_keys(original_bars, f1_with_duration),
            _note_keys(infilled_bars, f1_with_duration),
        ),
        cp_skipped_steps=cp_skipped,
        notes_original=sum(len(b) for b in original_bars),
        notes_infilled=sum(len(b) for b in infilled_bars),
    )


@dataclass(frozen=True)
class MetricSummary:
    """Mean and population std over the examples that produced a value."""

    mean: float
    std: float
    n: int
    skipped: int = 0

    def to_json_dict(self) -> dict:
        return {"mean": self.mean, "std": self.std, "n": self.n, "skipped": self.skipped}


def summarize(values: list[float | None]) -> MetricSummary:
    live = [v for v in values if v is not None]
    if not live:
        return MetricSummary(math.nan, math.nan, 0, len(values))
    arr = np.asarray(live, dtype=np.float64)
    return MetricSummary(
        float(arr.mean()), float(arr.std()), len(live), len(values) - len(live)
    )


DUR_CONTROL_NAMES = tuple(f"dur_{name}" for name in DUR_CLASS_NAMES)
CATEGORICAL_KINDS = DUR_CONTROL_NAMES + ("poly_min", "poly_max")


@dataclass(frozen=True)
class AdherenceReport:
    """How well realized bars follow their requested controls."""

    density_abs_diff: float
    categorical_success: dict[str, float]
    n_bars: int

    def to_json_dict(self) -> dict:
        return {
            "density_abs_diff": self.density_abs_diff,
            "categorical_success": dict(self.categorical_success),
            "n_bars": self.n_bars,
        }


def density_error(requested: int, realized_count: int, cfg: TokenizerConfig) -> float:
    """Absolute note-count error against a requested density bin.

    Bins 1..density_max name exact counts; the over bin is satisfied by
    any count of at least density_max, and shortfalls are measured from
    density_max.
    """
    if not 1 <= requested <= cfg.density_over:
        raise MetricError(f"density bin {requested} out of range")
    if requested == cfg.density_over:
        return float(max(0, cfg.density_max - realized_count))
    return float(abs(realized_count - requested))


def attribute_adherence(
    requested: list[AttributeControls],
    realized_bars: list[list[QNote]],
    cfg: TokenizerConfig,
) -> AdherenceReport:
    """Compare requested per-bar controls with controls recomputed from
    the realized bars. Density reports a mean absolute count error; the
    duration-class flags and polyphony bounds report per-kind success
    rates."""
    if not requested or len(requested) != len(realized_bars):
        raise MetricError("need equal, nonzero bar counts")
    density_total = 0.0
    hits = dict.fromkeys(CATEGORICAL_KINDS, 0)
    for want, notes in zip(requested, realized_bars):
        got = compute_controls(notes, cfg)
        density_total += density_error(want.density, len(notes), cfg)
        for name, w, g in zip(DUR_CONTROL_NAMES, want.dur_classes, got.dur_classes):
            hits[name] += int(w == g)
        hits["poly_min"] += int(want.poly_min == got.poly_min)
        hits["poly_max"] += int(want.poly_max == got.poly_max)
    n = len(requested)
    return AdherenceReport(
        density_abs_diff=density_total / n,
        categorical_success={k: hits[k] / n for k in CATEGORICAL_KINDS},
        n_bars=n,
    )


@dataclass(frozen=True)
class MetricReport:
    """Aggregate over a batch of evaluated regions."""

    cp: MetricSummary
    gs: MetricSummary
    pche: MetricSummary
    f1: MetricSummary
    examples: tuple[ExampleMetrics, ...]
    adherence: AdherenceReport | None = None
    failures: int = 0

    def to_json_dict(self) -> dict:
        out = {
            "cp": self.cp.to_json_dict(),
            "gs": self.gs.to_json_dict(),
            "pche": self.pche.to_json_dict(),
            "f1": self.f1.to_json_dict(),
            "examples": [e.to_json_dict() for e in self.examples],
            "failures": self.failures,
        }
        if self.adherence is not None:
            out["adherence"] = self.adherence.to_json_dict()
        return out


def aggregate(
    examples: list[ExampleMetrics],
    adherence: AdherenceReport | None = None,
    failures: int = 0,
) -> MetricReport:
    if not examples:
        raise MetricError("no examples to aggregate")
    return MetricReport(
        cp=summarize([e.cp for e in examples]),
        gs=summarize([e.gs for e in examples]),
        pche=summarize([e.pche for e in examples]),
        f1=summarize([e.f1 for e in examples]),
        examples=tuple(examples),
        adherence=adherence,
        failures=failures,
    )
