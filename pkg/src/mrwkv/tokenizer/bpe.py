"""Byte-pair merges over base token ids.

Merges are learned greedily by pair frequency. Pairs that contain a
protected id (structural or attribute tokens) are never candidates, so
merged tokens can never straddle a bar marker or swallow a control
token; applying BPE bar by bar gives the same result as applying it to
the whole stream.

Applying the table is a single left-to-right pass per merge, in rank
order. That is equivalent to repeatedly merging the lowest-rank pair
present: a merge introduces a fresh id, so it cannot create a new
occurrence of any earlier pair.
"""

from __future__ import annotations

import heapq
from collections.abc import Iterable, Sequence

from .vocab import TokenizerConfig, Vocabulary


def _merge_pass(ids: list[int], left: int, right: int, new_id: int) -> list[int]:
    out: list[int] = []
    i = 0
    n = len(ids)
    while i < n:
        if ids[i] == left and i + 1 < n and ids[i + 1] == right:
            out.append(new_id)
            i += 2
        else:
            out.append(ids[i])
            i += 1
    return out


def apply_bpe(ids: Sequence[int], vocab: Vocabulary) -> list[int]:
    """Replace occurrences of each merge pair, in training order."""
    seq = list(ids)
    present = set(seq)
    base = vocab.base_size
    for rank, (left, right) in enumerate(vocab.merges):
        if left not in present or right not in present:
            continue
        merged = _merge_pass(seq, left, right, base + rank)
        if len(merged) != len(seq):
            seq = merged
            present = set(seq)
    return seq


def invert_bpe(ids: Sequence[int], vocab: Vocabulary) -> list[int]:
    """Expand merged ids back to base ids."""
    out: list[int] = []
    for i in ids:
        out.extend(vocab.expansion(i))
    return out


def train_bpe(
    corpus: Iterable[Sequence[int]],
    cfg_or_vocab: TokenizerConfig | Vocabulary,
    target_size: int,
    *,
    min_pair_count: int = 2,
) -> Vocabulary:
    """Learn merges on base-id sequences until the vocabulary reaches
    `target_size` total ids.

    Ties in pair frequency break toward the smaller (left, right) id
    pair. If no pair reaches `min_pair_count` before the target, the
    returned vocabulary is smaller and flagged `exhausted`.
    """
    base_vocab = cfg_or_vocab if isinstance(cfg_or_vocab, Vocabulary) else Vocabulary(cfg_or_vocab)
    if base_vocab.merges:
        raise ValueError("training must start from a base (merge-free) vocabulary")
    if target_size < base_vocab.base_size:
        raise ValueError(
            f"target size {target_size} is below the base vocabulary ({base_vocab.base_size})"
        )
    protected = base_vocab.protected_ids
    seqs = [list(s) for s in corpus]
    for s in seqs:
        for i in s:
            if not 0 <= i < base_vocab.base_size:
                raise ValueError(f"corpus id {i} outside base vocabulary")

    counts: dict[tuple[int, int], int] = {}
    where: dict[tuple[int, int], set[int]] = {}
    heap: list[tuple[int, int, int]] = []

    def bump(pair: tuple[int, int], delta: int, seq_idx: int | None) -> None:
        if pair[0] in protected or pair[1] in protected:
            return
        c = counts.get(pair, 0) + delta
        if c:
            counts[pair] = c
        else:
            counts.pop(pair, None)
        if seq_idx is not None:
            where.setdefault(pair, set()).add(seq_idx)
        if c >= min_pair_count:
            heapq.heappush(heap, (-c, pair[0], pair[1]))

    for si, s in enumerate(seqs):
        for a, b in zip(s, s[1:]):
            bump((a, b), 1, si)

    merges: list[tuple[int, int]] = []
    exhausted = False
    n_merges_wanted = target_size - base_vocab.base_size
    while len(merges) < n_merges_wanted:
        pair = None
        while heap:
            negc, left, right = heapq.heappop(heap)
            if counts.get((left, right)) == -negc:
                pair = (left, right)
                break
        if pair is None:
            exhausted = True
            break
        left, right = pair
        new_id = base_vocab.base_size + len(merges)
        merges.append(pair)
        for si in sorted(where.get(pair, ())):
            s = seqs[si]
            out: list[int] = []
            i = 0
            n = len(s)
            while i < n:
                if s[i] == left and i + 1 < n and s[i + 1] == right:
                    bump(pair, -1, None)
                    # left neighbor: skip if it is the merged id from an
                    # immediately preceding occurrence (that occurrence's
                    # lookahead already accounted for this boundary)
                    if out and out[-1] != new_id:
                        bump((out[-1], left), -1, None)
                        bump((out[-1], new_id), 1, si)
                    if i + 2 < n:
                        nxt = s[i + 2]
                        chained = nxt == left and i + 3 < n and s[i + 3] == right
                        bump((right, nxt), -1, None)
                        bump((new_id, new_id if chained else nxt), 1, si)
                    out.append(new_id)
                    i += 2
                else:
                    out.append(s[i])
                    i += 1
            seqs[si] = out
        counts.pop(pair, None)
        where.pop(pair, None)

    return Vocabulary(base_vocab.cfg, merges, exhausted)
