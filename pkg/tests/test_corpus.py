"""Synthetic style scores and the analytic-entropy Markov source."""

from __future__ import annotations

import math

import numpy as np
import pytest

from mrwkv.harness import (
    STYLE_CHROMATIC,
    STYLE_PENTATONIC,
    MarkovChain,
    generate_style_score,
    markov_examples,
    style_corpus,
)
from mrwkv.midi_io import read_midi, validate_score, write_midi
from mrwkv.prompt import corpus_filter
from mrwkv.tokenizer import TokenizerConfig, decode_tracks, encode_score

CFG = TokenizerConfig()


class TestStyleScores:
    def test_valid_and_filter_worthy(self):
        for style in (STYLE_PENTATONIC, STYLE_CHROMATIC):
            score = generate_style_score(style, 0)
            validate_score(score)
            enc = encode_score(score, CFG)
            assert corpus_filter(enc)
            assert enc.n_bars == 16
            assert enc.n_tracks == 2

    def test_grid_exact_round_trips(self):
        for style in (STYLE_PENTATONIC, STYLE_CHROMATIC):
            for seed in range(3):
                score = generate_style_score(style, seed)
                enc = encode_score(score, CFG)
                assert decode_tracks(enc.all_track_tokens(), CFG, enc.tpq) == score
                assert read_midi(write_midi(score)) == score

    def test_deterministic_and_seed_sensitive(self):
        a = generate_style_score(STYLE_PENTATONIC, 7)
        b = generate_style_score(STYLE_PENTATONIC, 7)
        c = generate_style_score(STYLE_PENTATONIC, 8)
        assert a == b
        assert a != c

    def test_styles_are_statistically_far_apart(self):
        pent = generate_style_score(STYLE_PENTATONIC, 1)
        chrom = generate_style_score(STYLE_CHROMATIC, 1)
        pent_classes = {n.pitch % 12 for n in pent.tracks[0].notes}
        chrom_classes = {n.pitch % 12 for n in chrom.tracks[0].notes}
        assert pent_classes - chrom_classes
        assert chrom_classes - pent_classes
        assert len(chrom.tracks[0].notes) > 1.5 * len(pent.tracks[0].notes)
        assert pent.tracks[0].notes[0].velocity != chrom.tracks[0].notes[0].velocity
        assert pent.tempo_map[0].mpq != chrom.tempo_map[0].mpq

    def test_corpus_helper(self):
        scores = style_corpus(STYLE_CHROMATIC, 4, seed=2)
        assert len(scores) == 4
        assert len({write_midi(s) for s in scores}) == 4


class TestMarkovChain:
    def test_iid_rows_reduce_to_plain_entropy(self):
        p = np.array([0.5, 0.25, 0.125, 0.125])
        t = np.broadcast_to(p, (4, 4, 4)).copy()
        chain = MarkovChain(t)
        want = -(p * np.log(p)).sum()
        assert abs(chain.entropy_rate() - want) < 1e-12

    def test_deterministic_chain_has_zero_entropy(self):
        k = 3
        t = np.zeros((k, k, k))
        for a in range(k):
            for b in range(k):
                t[a, b, (a + b) % k] = 1.0
        assert MarkovChain(t).entropy_rate() == 0.0

    def test_stationary_matches_empirical_frequencies(self):
        chain = MarkovChain.random(4, seed=5)
        ids = chain.sample(120_000, seed=9)
        counts = np.zeros((4, 4))
        for a, b in zip(ids, ids[1:]):
            counts[a, b] += 1
        empirical = counts / counts.sum()
        assert np.abs(empirical - chain.stationary_pairs()).max() < 0.01

    def test_entropy_matches_empirical_nll(self):
        chain = MarkovChain.random(6, seed=11, concentration=0.2)
        ids = chain.sample(150_000, seed=3)
        assert abs(chain.sequence_nll(ids) - chain.entropy_rate()) < 0.02

    def test_peaked_chains_sit_well_below_uniform(self):
        for seed in range(3):
            chain = MarkovChain.random(12, seed=seed)
            assert chain.entropy_rate() < 0.6 * math.log(12)

    def test_sampling_deterministic(self):
        chain = MarkovChain.random(5, seed=0)
        assert chain.sample(200, seed=1) == chain.sample(200, seed=1)
        assert chain.sample(200, seed=1) != chain.sample(200, seed=2)

    def test_validation(self):
        with pytest.raises(ValueError):
            MarkovChain(np.ones((2, 2)))
        with pytest.raises(ValueError):
            MarkovChain(np.ones((2, 2, 2)))
        with pytest.raises(ValueError):
            MarkovChain.random(3, 0).sequence_nll([0, 1])

    def test_examples_cover_full_span(self):
        chain = MarkovChain.random(8, seed=2)
        examples = markov_examples(chain, 5, 64, seed=4)
        assert len(examples) == 5
        for ex in examples:
            assert len(ex.ids) == 64
            assert ex.span == (0, 63)
            assert all(0 <= t < 8 for t in ex.ids)
        assert markov_examples(chain, 5, 64, seed=4) == examples
