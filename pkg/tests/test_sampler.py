"""Filter pipeline oracles and constrained infill generation."""

from __future__ import annotations

import math

import numpy as np
import pytest
import torch

from mrwkv.model import ModelConfig, RWKV7
from mrwkv.prompt import (
    PromptSpec,
    parse_fill_section,
    prompt_ids,
    resolve_controls,
    splice_back,
)
from mrwkv.sampler import (
    IDENTITY,
    EarlyStopError,
    EmptyDistributionError,
    SamplerConfig,
    SamplerError,
    TruncationError,
    filter_logits,
    generate_infill,
    greedy_token,
    infill_forbidden_ids,
)
from mrwkv.tokenizer import TokenKind, TokenizerConfig, Vocabulary, encode_score
from util import make_busy_score

CFG = TokenizerConfig()
VOCAB = Vocabulary(CFG)


def softmax(x):
    x = np.asarray(x, dtype=np.float64)
    x = x - x.max()
    e = np.exp(x)
    return e / e.sum()


class TestFilterLogits:
    def test_identity_config_is_plain_softmax(self):
        rng = np.random.default_rng(0)
        for _ in range(20):
            logits = rng.normal(size=37) * 3
            probs = filter_logits(logits, [], IDENTITY)
            assert np.array_equal(probs, softmax(logits))

    def test_repetition_penalty_convention(self):
        logits = np.array([2.0, -1.0, 0.5])
        probs = filter_logits(
            logits,
            [0, 1],
            SamplerConfig(repetition_penalty=1.2, top_k=0, top_p=1.0),
        )
        expected = softmax([2.0 / 1.2, -1.0 * 1.2, 0.5])
        assert np.allclose(probs, expected, atol=1e-15)
        assert abs(2.0 / 1.2 - 1.6666666666666667) < 1e-15

    def test_history_token_counted_once(self):
        logits = np.array([2.0, 0.0])
        once = filter_logits(
            logits, [0], SamplerConfig(repetition_penalty=1.5, top_k=0, top_p=1.0)
        )
        thrice = filter_logits(
            logits, [0, 0, 0], SamplerConfig(repetition_penalty=1.5, top_k=0, top_p=1.0)
        )
        assert np.array_equal(once, thrice)

    def test_top_k_one_is_point_mass(self):
        rng = np.random.default_rng(1)
        for _ in range(10):
            logits = rng.normal(size=23)
            probs = filter_logits(
                logits, [], SamplerConfig(repetition_penalty=1.0, top_k=1, top_p=1.0)
            )
            assert probs[int(np.argmax(logits))] == 1.0
            assert np.count_nonzero(probs) == 1

    def test_top_p_keeps_smallest_sufficient_prefix(self):
        # probabilities 0.5, 0.3, 0.2 by construction
        logits = np.log(np.array([0.5, 0.3, 0.2]))
        probs = filter_logits(
            logits, [], SamplerConfig(repetition_penalty=1.0, top_k=0, top_p=0.75)
        )
        assert probs[2] == 0.0
        assert np.allclose(probs[:2], [0.5 / 0.8, 0.3 / 0.8], atol=1e-12)
        exact = filter_logits(
            logits, [], SamplerConfig(repetition_penalty=1.0, top_k=0, top_p=0.5)
        )
        assert np.allclose(exact, [1.0, 0.0, 0.0], atol=1e-12)

    def test_temperature_sharpens(self):
        logits = np.array([1.0, 0.0])
        cold = filter_logits(
            logits, [], SamplerConfig(temperature=0.25, repetition_penalty=1.0, top_k=0, top_p=1.0)
        )
        assert np.allclose(cold, softmax([4.0, 0.0]), atol=1e-15)

    def test_forbidden_zeroed_and_renormalized(self):
        logits = np.array([1.0, 1.0, 1.0, 1.0])
        probs = filter_logits(logits, [], IDENTITY, forbidden=[1, 3])
        assert probs.tolist() == [0.5, 0.0, 0.5, 0.0]

    def test_all_mass_removed_raises(self):
        logits = np.array([10.0, 0.0, 0.0])
        cfg = SamplerConfig(repetition_penalty=1.0, top_k=1, top_p=1.0)
        with pytest.raises(EmptyDistributionError):
            filter_logits(logits, [], cfg, forbidden=[0])

    def test_input_validation(self):
        with pytest.raises(ValueError):
            filter_logits([math.inf, 0.0], [], IDENTITY)
        with pytest.raises(ValueError):
            filter_logits(np.zeros((2, 3)), [], IDENTITY)

    def test_torch_input_matches_numpy(self):
        logits = np.linspace(-2, 2, 11)
        a = filter_logits(logits, [3], SamplerConfig())
        b = filter_logits(torch.tensor(logits), [3], SamplerConfig())
        assert np.array_equal(a, b)

    def test_config_validation(self):
        with pytest.raises(ValueError):
            SamplerConfig(temperature=0.0)
        with pytest.raises(ValueError):
            SamplerConfig(repetition_penalty=0.9)
        with pytest.raises(ValueError):
            SamplerConfig(top_p=0.0)
        with pytest.raises(ValueError):
            SamplerConfig(top_k=-1)
        with pytest.raises(ValueError):
            SamplerConfig(max_tokens=0)

    def test_json_round_trip(self):
        cfg = SamplerConfig(temperature=0.8, top_k=15, seed=9)
        assert SamplerConfig.from_json_dict(cfg.to_json_dict()) == cfg


class TestForbiddenSet:
    def test_base_kinds(self):
        forbidden = infill_forbidden_ids(VOCAB)
        assert VOCAB.pad_id in forbidden
        assert VOCAB.track_start_id in forbidden
        assert VOCAB.id_of(TokenKind.DENSITY, 1) in forbidden
        assert VOCAB.id_of(TokenKind.TEMPO, 0) in forbidden
        assert VOCAB.id_of(TokenKind.PROGRAM, 0) in forbidden
        assert VOCAB.bar_none_id not in forbidden
        assert VOCAB.id_of(TokenKind.FILLBAR_END) not in forbidden
        assert VOCAB.id_of(TokenKind.PITCH, 60) not in forbidden

    def test_merged_expansions_checked(self):
        pitch = VOCAB.id_of(TokenKind.PITCH, 60)
        vel = VOCAB.id_of(TokenKind.VELOCITY, 10)
        tempo = VOCAB.id_of(TokenKind.TEMPO, 3)
        good = Vocabulary(CFG, merges=[(pitch, vel)])
        bad = Vocabulary(CFG, merges=[(pitch, tempo)])
        assert good.base_size not in infill_forbidden_ids(good)
        assert bad.base_size in infill_forbidden_ids(bad)


class _ConstantModel:
    """Duck model emitting fixed logits; lets tests force token choices."""

    def __init__(self, size: int, hot: dict[int, float]):
        self.logits = torch.zeros(size, dtype=torch.float64)
        for token, value in hot.items():
            self.logits[token] = value

    def __call__(self, ids, state=None):
        return self.logits.expand(ids.shape[0], ids.shape[1], -1), state

    def forward_step(self, ids, state=None):
        return self.logits.expand(ids.shape[0], -1), state


def infer_setup(seed=0, n_bars=2, track=0, start=3, context=4):
    score = make_busy_score(seed=seed, n_bars=10, n_tracks=2, notes_per_bar=3)
    enc = encode_score(score, CFG)
    spec = PromptSpec(
        track_index=track,
        start=start,
        length=n_bars,
        context=context,
        track_order=tuple(range(len(score.tracks))),
    )
    ids, _span, _built = prompt_ids(enc, spec, VOCAB, mode="infer")
    controls = resolve_controls(enc, spec)
    caps = [
        (enc.bars[b][1] - enc.bars[b][0]) // enc.step
        for b in range(spec.start, spec.start + spec.length)
    ]
    return score, enc, spec, ids, list(controls), caps


class _Biased:
    """Real network plus a fixed logit offset; keeps bars short so the
    structural loops finish quickly."""

    def __init__(self, inner, bias: torch.Tensor):
        self.inner = inner
        self.bias = bias

    def __call__(self, ids, state=None):
        logits, state = self.inner(ids, state)
        return logits + self.bias, state

    def forward_step(self, ids, state=None):
        logits, state = self.inner.forward_step(ids, state)
        return logits + self.bias, state


def tiny_music_model(seed=0, separator_bias=4.0):
    cfg = ModelConfig(
        n_layers=2, d_model=16, head_size=8, d_ffn=32, vocab_size=VOCAB.size,
        decay_rank=4, iclr_rank=4, value_rank=4, gate_rank=4,
    )
    model = RWKV7(cfg, dtype=torch.float32, seed=seed)
    g = torch.Generator().manual_seed(seed + 77)
    with torch.no_grad():
        for p in model.parameters():
            p.add_(torch.randn(p.shape, generator=g, dtype=p.dtype) * 0.03)
    bias = torch.zeros(VOCAB.size)
    bias[VOCAB.bar_none_id] = separator_bias
    bias[VOCAB.id_of(TokenKind.FILLBAR_END)] = separator_bias / 4
    return _Biased(model, bias)


class TestInfill:
    def test_structure_over_seeds(self):
        model = tiny_music_model()
        score, enc, spec, ids, controls, caps = infer_setup(n_bars=3)
        bar_none = VOCAB.bar_none_id
        for seed in range(25):
            result = generate_infill(
                model, VOCAB, ids, controls, SamplerConfig(seed=seed, max_tokens=400),
                bar_caps=caps,
            )
            tokens = VOCAB.decode_ids(result.fill_ids)
            bars, parsed = parse_fill_section(tokens, spec.length)
            assert len(bars) == spec.length
            assert list(parsed) == controls
            flat = [
                t for t in result.fill_ids
                if t == bar_none or t not in VOCAB.protected_ids
            ]
            for a, b in zip(flat, flat[1:]):
                assert not (a == bar_none and b == bar_none)
            separators = sum(1 for t in result.fill_ids if t == bar_none)
            assert separators == spec.length - 1

    def test_single_bar_has_no_separator(self):
        model = tiny_music_model(1)
        _, _, spec, ids, controls, caps = infer_setup(n_bars=1)
        result = generate_infill(
            model, VOCAB, ids, controls, SamplerConfig(seed=3, max_tokens=200),
            bar_caps=caps,
        )
        assert VOCAB.bar_none_id not in result.fill_ids
        bars, _ = parse_fill_section(VOCAB.decode_ids(result.fill_ids), 1)
        assert len(bars) == 1

    def test_controls_forced_after_each_separator(self):
        model = tiny_music_model(2)
        _, _, spec, ids, controls, caps = infer_setup(n_bars=3)
        result = generate_infill(
            model, VOCAB, ids, controls, SamplerConfig(seed=5, max_tokens=400),
            bar_caps=caps,
        )
        fill = result.fill_ids
        bar = 0
        for i, token in enumerate(fill):
            if token != VOCAB.bar_none_id:
                continue
            bar += 1
            injected = fill[i + 1 : i + 1 + 8]
            assert injected == VOCAB.encode_tokens(controls[bar].tokens())

    def test_deterministic_per_seed(self):
        model = tiny_music_model(3)
        _, _, _, ids, controls, caps = infer_setup(n_bars=2)
        runs = [
            generate_infill(
                model, VOCAB, ids, controls, SamplerConfig(seed=11, max_tokens=300),
                bar_caps=caps,
            ).fill_ids
            for _ in range(2)
        ]
        assert runs[0] == runs[1]
        other = generate_infill(
            model, VOCAB, ids, controls, SamplerConfig(seed=12, max_tokens=300),
            bar_caps=caps,
        ).fill_ids
        assert other != runs[0]

    def test_greedy_ignores_seed(self):
        model = tiny_music_model(4)
        _, _, _, ids, controls, caps = infer_setup(n_bars=2)
        a = generate_infill(
            model, VOCAB, ids, controls, SamplerConfig(seed=1, max_tokens=300),
            bar_caps=caps, greedy=True,
        )
        b = generate_infill(
            model, VOCAB, ids, controls, SamplerConfig(seed=2, max_tokens=300),
            bar_caps=caps, greedy=True,
        )
        assert a.fill_ids == b.fill_ids

    def test_splices_back_within_region(self):
        model = tiny_music_model(5)
        score, enc, spec, ids, controls, caps = infer_setup(n_bars=2, track=1)
        result = generate_infill(
            model, VOCAB, ids, controls, SamplerConfig(seed=7, max_tokens=300),
            bar_caps=caps,
        )
        out = splice_back(score, spec, result.fill_ids, VOCAB)
        region_lo = enc.bars[spec.start][0]
        region_hi = enc.bars[spec.start + spec.length - 1][1]
        for before, after in zip(score.tracks, out.tracks):
            assert before.program == after.program
        keep = [
            n for n in score.tracks[1].notes if not region_lo <= n.onset < region_hi
        ]
        kept_after = [
            n for n in out.tracks[1].notes if not region_lo <= n.onset < region_hi
        ]
        assert keep == kept_after
        assert out.tracks[0].notes == score.tracks[0].notes

    def test_positions_respect_bar_caps(self):
        model = tiny_music_model(6)
        _, enc, spec, ids, controls, caps = infer_setup(n_bars=2)
        for seed in range(10):
            result = generate_infill(
                model, VOCAB, ids, controls, SamplerConfig(seed=seed, max_tokens=300),
                bar_caps=caps,
            )
            bars, _ = parse_fill_section(VOCAB.decode_ids(result.fill_ids), 2)
            for cap, bar_notes in zip(caps, bars):
                for pos, _pitch, _vbin, _units in bar_notes:
                    assert pos < cap

    def test_max_tokens_truncates_with_partial(self):
        model = tiny_music_model(7)
        _, _, _, ids, controls, _ = infer_setup(n_bars=4)
        with pytest.raises(TruncationError) as info:
            generate_infill(
                model, VOCAB, ids, controls, SamplerConfig(seed=1, max_tokens=6)
            )
        err = info.value
        assert len(err.fill_ids) >= 9
        assert err.bars_completed < 4

    def test_output_never_exceeds_max_tokens(self):
        model = tiny_music_model(8)
        _, _, _, ids, controls, caps = infer_setup(n_bars=2)
        for budget in (12, 40, 300):
            try:
                result = generate_infill(
                    model, VOCAB, ids, controls,
                    SamplerConfig(seed=2, max_tokens=budget), bar_caps=caps,
                )
                assert len(result.new_ids) <= budget
            except TruncationError as err:
                assert len(err.fill_ids) - 9 <= budget

    def test_early_stop_resamples_then_raises(self):
        _, _, _, ids, controls, _ = infer_setup(n_bars=2)
        hot = {VOCAB.id_of(TokenKind.FILLBAR_END): 60.0}
        model = _ConstantModel(VOCAB.size, hot)
        with pytest.raises(EarlyStopError) as info:
            generate_infill(
                model, VOCAB, ids, controls,
                SamplerConfig(seed=0, repetition_penalty=1.0, top_k=1, max_tokens=100),
            )
        assert info.value.bars_completed == 0

    def test_early_stop_greedy_fails_fast(self):
        _, _, _, ids, controls, _ = infer_setup(n_bars=3)
        hot = {VOCAB.id_of(TokenKind.FILLBAR_END): 60.0}
        model = _ConstantModel(VOCAB.size, hot)
        with pytest.raises(EarlyStopError):
            generate_infill(
                model, VOCAB, ids, controls, SamplerConfig(max_tokens=100),
                greedy=True,
            )

    def test_sampled_end_marker_kept_on_final_bar(self):
        _, _, _, ids, controls, _ = infer_setup(n_bars=1)
        hot = {VOCAB.id_of(TokenKind.FILLBAR_END): 60.0}
        model = _ConstantModel(VOCAB.size, hot)
        result = generate_infill(
            model, VOCAB, ids, controls,
            SamplerConfig(seed=0, repetition_penalty=1.0, top_k=1, max_tokens=50),
        )
        assert result.new_ids == [VOCAB.id_of(TokenKind.FILLBAR_END)]
        assert result.sampled == 1

    def test_bad_prompt_tail_rejected(self):
        model = tiny_music_model(9)
        _, _, _, ids, controls, _ = infer_setup(n_bars=2)
        with pytest.raises(SamplerError):
            generate_infill(
                model, VOCAB, ids[:-1], controls, SamplerConfig(max_tokens=50)
            )
        with pytest.raises(SamplerError):
            generate_infill(
                model, VOCAB, ids, controls[::-1], SamplerConfig(max_tokens=50)
            )

    def test_greedy_token_helper(self):
        assert greedy_token(np.array([0.1, 0.7, 0.2])) == 1
