"""Paired significance testing for metric comparisons.

Exact Wilcoxon signed-rank test (zero differences dropped, tied
absolute differences given average ranks, null distribution enumerated
by dynamic programming) and the Holm step-down adjustment for families
of such tests.
"""

from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction

__all__ = [
    "HolmResult",
    "WilcoxonResult",
    "holm_bonferroni",
    "signed_rank_critical_value",
    "wilcoxon_signed_rank",
]


@dataclass(frozen=True)
class WilcoxonResult:
    statistic: float  # min(W+, W-)
    p_value: float
    n: int  # pairs remaining after dropping zero differences
    w_plus: float
    w_minus: float

    def to_json_dict(self) -> dict:
        return {
            "statistic": self.statistic,
            "p_value": self.p_value,
            "n": self.n,
            "w_plus": self.w_plus,
            "w_minus": self.w_minus,
        }


def _average_ranks(values: list[float]) -> list[float]:
    order = sorted(range(len(values)), key=lambda i: values[i])
    ranks = [0.0] * len(values)
    i = 0
    while i < len(order):
        j = i
        while j + 1 < len(order) and values[order[j + 1]] == values[order[i]]:
            j += 1
        avg = (i + j) / 2 + 1
        for k in range(i, j + 1):
            ranks[order[k]] = avg
        i = j + 1
    return ranks


def _null_counts(doubled_ranks: list[int]) -> list[int]:
    """Counts of sign assignments reaching each doubled W+ value."""
    total = sum(doubled_ranks)
    counts = [0] * (total + 1)
    counts[0] = 1
    for r in doubled_ranks:
        for s in range(total, r - 1, -1):
            counts[s] += counts[s - r]
    return counts


def wilcoxon_signed_rank(
    x: list[float], y: list[float] | None = None
) -> WilcoxonResult:
    """Exact two-sided test on paired samples (or on differences when
    `y` is omitted)."""
    diffs = list(x) if y is None else [a - b for a, b in zip(x, y, strict=True)]
    diffs = [d for d in diffs if d != 0]
    n = len(diffs)
    if n == 0:
        return WilcoxonResult(0.0, 1.0, 0, 0.0, 0.0)
    ranks = _average_ranks([abs(d) for d in diffs])
    w_plus = sum(r for d, r in zip(diffs, ranks) if d > 0)
    w_minus = sum(r for d, r in zip(diffs, ranks) if d < 0)

    doubled = [round(2 * r) for r in ranks]
    counts = _null_counts(doubled)
    denom = 2**n
    w2 = round(2 * w_plus)
    lower = sum(counts[: w2 + 1])
    upper = sum(counts[w2:])
    p = min(Fraction(1), 2 * Fraction(min(lower, upper), denom))
    return WilcoxonResult(min(w_plus, w_minus), float(p), n, w_plus, w_minus)


def signed_rank_critical_value(n: int, alpha: float = 0.05) -> int:
    """Largest statistic that is still significant at two-sided `alpha`
    for untied ranks 1..n, or -1 when no value rejects."""
    if n < 1:
        raise ValueError("n must be positive")
    counts = _null_counts([2 * r for r in range(1, n + 1)])
    denom = 2**n
    bound = Fraction(alpha).limit_denominator(10**9)
    best = -1
    acc = 0
    for w2 in range(0, len(counts), 2):  # untied statistics are integers
        acc += counts[w2]  # odd doubled sums are unreachable here
        if 2 * Fraction(acc, denom) <= bound:
            best = w2 // 2
    return best


@dataclass(frozen=True)
class HolmResult:
    adjusted: tuple[float, ...]
    rejected: tuple[bool, ...]
    alpha: float

    def to_json_dict(self) -> dict:
        return {
            "adjusted": list(self.adjusted),
            "rejected": list(self.rejected),
            "alpha": self.alpha,
        }


def holm_bonferroni(p_values: list[float], alpha: float = 0.05) -> HolmResult:
    """Step-down multiple-comparison adjustment.

    Adjusted p-values are monotone (each at least as large as the one
    before it in sorted order); a hypothesis is rejected when its
    adjusted p-value is at most alpha.
    """
    m = len(p_values)
    if m == 0:
        return HolmResult((), (), alpha)
    for p in p_values:
        if not 0.0 <= p <= 1.0:
            raise ValueError(f"p-value {p} outside [0, 1]")
    order = sorted(range(m), key=lambda i: p_values[i])
    adjusted = [0.0] * m
    running = 0.0
    for pos, idx in enumerate(order):
        running = max(running, min(1.0, (m - pos) * p_values[idx]))
        adjusted[idx] = running
    return HolmResult(
        tuple(adjusted), tuple(a <= alpha for a in adjusted), alpha
    )
