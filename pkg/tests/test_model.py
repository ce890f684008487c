"""Network forward paths, gradients, counts, adapters, checkpoints."""

from __future__ import annotations

import math
import random

import pytest
import torch

from mrwkv.model import (
    RWKV7,
    CheckpointError,
    InitialState,
    ModelConfig,
    apply_lora,
    count_trainable,
    load_initial_state,
    load_lora,
    load_model,
    load_tensors,
    lora_target_shapes,
    loss_and_grads,
    remove_lora,
    save_initial_state,
    save_lora,
    save_model,
    save_tensors,
    sequence_loss,
    span_mask,
    zero_state,
)

TINY = ModelConfig(
    n_layers=2, d_model=16, head_size=8, d_ffn=32, vocab_size=30,
    decay_rank=4, iclr_rank=4, value_rank=4, gate_rank=4,
)


def noised(model: RWKV7, scale: float = 0.05, seed: int = 1) -> RWKV7:
    """Zero-initialized residual projections make the net ignore its
    state at exact init; nudge every weight off that point."""
    g = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for p in model.parameters():
            p.add_(torch.randn(p.shape, generator=g, dtype=p.dtype) * scale)
    return model


def tiny_model(seed: int = 0, dtype: torch.dtype = torch.float64) -> RWKV7:
    return noised(RWKV7(TINY, dtype=dtype, seed=seed), seed=seed + 100)


def rand_ids(batch: int, length: int, seed: int = 3, vocab: int = 30) -> torch.Tensor:
    g = torch.Generator().manual_seed(seed)
    return torch.randint(0, vocab, (batch, length), generator=g)


class TestForward:
    @torch.no_grad()
    def test_step_matches_sequence_f32(self):
        model = tiny_model(dtype=torch.float32)
        ids = rand_ids(2, 12)
        seq_logits, seq_state = model(ids)
        state = None
        steps = []
        for t in range(ids.shape[1]):
            lg, state = model.forward_step(ids[:, t], state)
            steps.append(lg)
        diff = (torch.stack(steps, dim=1) - seq_logits).abs().max()
        assert float(diff) < 1e-5
        assert torch.allclose(state.wkv, seq_state.wkv, atol=1e-5)

    @torch.no_grad()
    def test_step_matches_sequence_f64(self):
        model = tiny_model(dtype=torch.float64)
        ids = rand_ids(1, 10, seed=5)
        seq_logits, _ = model(ids)
        state = None
        steps = []
        for t in range(ids.shape[1]):
            lg, state = model.forward_step(ids[:, t], state)
            steps.append(lg)
        assert float((torch.stack(steps, dim=1) - seq_logits).abs().max()) < 1e-10

    @torch.no_grad()
    def test_first_step_equals_position_zero(self):
        model = tiny_model()
        ids = rand_ids(2, 4)
        seq_logits, _ = model(ids)
        step_logits, _ = model.forward_step(ids[:, 0])
        assert torch.allclose(step_logits, seq_logits[:, 0], atol=1e-13, rtol=0)

    def test_prefix_property(self):
        model = tiny_model(seed=2)
        ids = rand_ids(2, 10, seed=7)
        whole, state_whole = model(ids)
        first, mid = model(ids[:, :4])
        second, state_split = model(ids[:, 4:], mid)
        assert torch.allclose(torch.cat([first, second], dim=1), whole, atol=1e-12)
        assert torch.allclose(state_split.wkv, state_whole.wkv, atol=1e-12)
        assert torch.allclose(state_split.shift_att, state_whole.shift_att, atol=1e-12)

    def test_empty_sequence_returns_state_unchanged(self):
        model = tiny_model()
        state = model.init_state(3)
        state.wkv.normal_()
        logits, out = model(torch.zeros(3, 0, dtype=torch.long), state)
        assert logits.shape == (3, 0, TINY.vocab_size)
        assert torch.equal(out.wkv, state.wkv)

    def test_state_sensitivity(self):
        model = tiny_model()
        ids = rand_ids(1, 1)
        zero, _ = model.forward_step(ids[:, 0])
        richer = model.init_state(1)
        richer.wkv.normal_(generator=torch.Generator().manual_seed(1))
        other, _ = model.forward_step(ids[:, 0], richer)
        assert not torch.allclose(zero, other)

    def test_deterministic_build_and_eval(self):
        a = RWKV7(TINY, dtype=torch.float32, seed=11)
        b = RWKV7(TINY, dtype=torch.float32, seed=11)
        for (na, pa), (nb, pb) in zip(a.named_parameters(), b.named_parameters()):
            assert na == nb and torch.equal(pa, pb)
        ids = rand_ids(2, 8)
        la, _ = a(ids)
        lb, _ = b(ids)
        assert torch.equal(la, lb)
        again, _ = a(ids)
        assert torch.equal(la, again)

    def test_input_validation(self):
        model = tiny_model()
        with pytest.raises(ValueError):
            model(torch.tensor([[0, 30]]))
        with pytest.raises(ValueError):
            model(torch.tensor([[0, -1]]))
        with pytest.raises(ValueError):
            model(torch.tensor([0, 1]))
        with pytest.raises(ValueError):
            model.forward_step(torch.tensor([[0]]))
        with pytest.raises(ValueError):
            model(torch.tensor([[0, 1]]), model.init_state(2))

    def test_state_footprint_constant_in_length(self):
        model = tiny_model(dtype=torch.float32)
        _, short = model(rand_ids(2, 4))
        _, long = model(rand_ids(2, 64))
        for a, b in ((short.wkv, long.wkv), (short.shift_att, long.shift_att)):
            assert a.shape == b.shape


class TestLoss:
    @torch.no_grad()
    def test_uniform_logits_give_log_vocab(self):
        model = tiny_model()
        with torch.no_grad():
            model.head.weight.zero_()
        ids = rand_ids(2, 6)
        mask = torch.ones(2, 6, dtype=torch.bool)
        loss = sequence_loss(model, ids, mask)
        assert abs(float(loss) - math.log(TINY.vocab_size)) < 1e-12

    def test_all_false_mask_rejected(self):
        model = tiny_model()
        ids = rand_ids(1, 5)
        with pytest.raises(ValueError):
            sequence_loss(model, ids, torch.zeros(1, 5, dtype=torch.bool))
        # a mask selecting only position 0 is equally unusable
        only_first = torch.zeros(1, 5, dtype=torch.bool)
        only_first[:, 0] = True
        with pytest.raises(ValueError):
            sequence_loss(model, ids, only_first)

    def test_span_mask_layout(self):
        mask = span_mask(8, (2, 5))
        assert mask.tolist() == [False, False, False, True, True, True, False, False]
        with pytest.raises(ValueError):
            span_mask(8, (2, 9))

    @torch.no_grad()
    def test_causality_loss_ignores_later_tokens(self):
        model = tiny_model()
        ids = rand_ids(1, 8)
        mask = torch.zeros(1, 8, dtype=torch.bool)
        mask[:, 3] = True
        changed = ids.clone()
        changed[0, 5:] = (changed[0, 5:] + 7) % TINY.vocab_size
        assert float(sequence_loss(model, ids, mask)) == float(
            sequence_loss(model, changed, mask)
        )

    def test_causality_zero_grad_for_later_tokens(self):
        model = tiny_model()
        ids = torch.tensor([[1, 2, 3, 4, 29, 29, 29]])
        mask = torch.zeros(1, 7, dtype=torch.bool)
        mask[:, 2] = True  # token 29 appears only after the target
        _, grads, _ = loss_and_grads(model, ids, mask)
        assert float(grads["emb.weight"][29].abs().max()) == 0.0
        assert float(grads["emb.weight"][1].abs().max()) > 0.0


def _fd_compare(model, ist, ids, mask, *, entries: int, rng: random.Random, h=1e-5):
    batch = ids.shape[0]
    _, grads, sgrads = loss_and_grads(model, ids, mask, ist)
    named = {n: p for n, p in model.named_parameters()}
    named.update({f"state::{n}": p for n, p in ist.named_parameters()})
    all_grads = dict(grads)
    all_grads.update({f"state::{n}": g for n, g in sgrads.items()})
    worst = 0.0
    for name, p in named.items():
        grad = all_grads[name].view(-1)
        flat = p.detach().view(-1)
        picks = range(flat.numel()) if entries <= 0 else rng.sample(
            range(flat.numel()), min(entries, flat.numel())
        )
        for i in picks:
            orig = float(flat[i])
            with torch.no_grad():
                flat[i] = orig + h
                plus = float(sequence_loss(model, ids, mask, ist.state(batch)))
                flat[i] = orig - h
                minus = float(sequence_loss(model, ids, mask, ist.state(batch)))
                flat[i] = orig
            fd = (plus - minus) / (2 * h)
            ag = float(grad[i])
            scale = max(abs(fd), abs(ag))
            err = abs(fd - ag) if scale < 1e-7 else abs(fd - ag) / scale
            worst = max(worst, err)
            assert err < 1e-3, f"{name}[{i}]: fd={fd} autograd={ag}"
    return worst


class TestGradients:
    def test_matches_finite_differences(self):
        for seed in (0, 1, 2):
            model = tiny_model(seed=seed)
            ist = InitialState(TINY, dtype=torch.float64)
            with torch.no_grad():
                ist.wkv.normal_(generator=torch.Generator().manual_seed(seed))
                ist.wkv.mul_(0.1)
            ids = rand_ids(1, 6, seed=seed + 40)
            mask = torch.zeros(1, 6, dtype=torch.bool)
            mask[:, 2:] = True
            worst = _fd_compare(
                model, ist, ids, mask, entries=4, rng=random.Random(seed)
            )
            assert worst < 1e-3

    def test_state_gradients_flow_with_tuned_shift(self):
        model = tiny_model(seed=4)
        ist = InitialState(TINY, tune_shift=True, dtype=torch.float64)
        ids = rand_ids(1, 6, seed=9)
        mask = torch.ones(1, 6, dtype=torch.bool)
        _, _, sgrads = loss_and_grads(model, ids, mask, ist)
        assert set(sgrads) == {"wkv", "shift_att", "shift_ffn"}
        assert float(sgrads["wkv"].abs().max()) > 0.0
        assert float(sgrads["shift_att"].abs().max()) > 0.0


class TestCounts:
    def test_preset_arithmetic(self):
        cfg = ModelConfig()
        assert cfg.n_heads == 6
        assert count_trainable(cfg, "state") == 294_912
        model = RWKV7(cfg, seed=0)
        total = count_trainable(model, "full")
        assert total == 38_414_976
        assert abs(total - 38_000_000) / 38_000_000 < 0.05

    def test_tiny_state_count(self):
        assert count_trainable(TINY, "state") == 2 * 2 * 8 * 8

    def test_lora_count_matches_adapter(self):
        model = RWKV7(TINY, seed=0)
        analytic = count_trainable(TINY, "lora", rank=4)
        assert analytic == sum(4 * (m + n) for _, m, n in lora_target_shapes(TINY))
        adapter = apply_lora(model, rank=4, alpha=4.0)
        assert adapter.trainable_count() == analytic

    def test_state_count_from_module(self):
        ist = InitialState(TINY)
        assert count_trainable(ist, "state") == 256
        assert count_trainable(InitialState(TINY, tune_shift=True), "state") == 256 + 2 * 2 * 16

    def test_mode_validation(self):
        with pytest.raises(ValueError):
            count_trainable(TINY, "lora")
        with pytest.raises(ValueError):
            count_trainable(TINY, "sparse")
        with pytest.raises(TypeError):
            count_trainable(TINY, "full")


class TestInitialState:
    def test_expands_over_batch(self):
        ist = InitialState(TINY, dtype=torch.float64)
        with torch.no_grad():
            ist.wkv.normal_()
        state = ist.state(3)
        assert state.batch_size == 3
        assert torch.equal(state.wkv[:, 0], state.wkv[:, 2])

    def test_finite_check(self):
        state = zero_state(TINY, 1)
        state.wkv[0, 0, 0, 0, 0] = float("nan")
        with pytest.raises(ValueError):
            state.require_finite()


class TestLora:
    def test_fresh_adapter_is_identity(self):
        model = tiny_model(dtype=torch.float32)
        ids = rand_ids(2, 8)
        before, _ = model(ids)
        apply_lora(model, rank=4, alpha=8.0, seed=3)
        after, _ = model(ids)
        assert torch.equal(before, after)

    def test_remove_restores_module(self):
        model = tiny_model(dtype=torch.float32)
        base_count = count_trainable(model, "full")
        ids = rand_ids(1, 6)
        before, _ = model(ids)
        adapter = apply_lora(model, rank=2, alpha=2.0, seed=1)
        with torch.no_grad():
            for p in adapter.parameters():
                p.normal_()
        changed, _ = model(ids)
        assert not torch.equal(before, changed)
        remove_lora(model)
        assert count_trainable(model, "full") == base_count
        restored, _ = model(ids)
        assert torch.equal(before, restored)

    def test_double_attach_rejected(self):
        model = tiny_model(dtype=torch.float32)
        apply_lora(model, rank=2, alpha=2.0)
        with pytest.raises(ValueError):
            apply_lora(model, rank=2, alpha=2.0)

    def test_composes_with_tuned_state(self):
        model = tiny_model(dtype=torch.float32)
        ids = rand_ids(1, 6)
        g = torch.Generator().manual_seed(5)
        rich = model.init_state(1)
        rich.wkv.normal_(generator=g)
        base, _ = model(ids)
        state_only, _ = model(ids, rich.clone())
        adapter = apply_lora(model, rank=2, alpha=2.0, seed=2)
        with torch.no_grad():
            for p in adapter.parameters():
                p.normal_(generator=g)
                p.mul_(0.1)
        lora_only, _ = model(ids)
        both, _ = model(ids, rich.clone())
        outs = [base, state_only, lora_only, both]
        for i in range(len(outs)):
            for j in range(i + 1, len(outs)):
                assert not torch.equal(outs[i], outs[j])


class TestCheckpoints:
    def test_model_round_trip(self, tmp_path):
        model = tiny_model(dtype=torch.float32, seed=6)
        path = tmp_path / "model.ckpt"
        save_model(path, model)
        again = load_model(path)
        assert again.dtype == torch.float32
        for (na, pa), (nb, pb) in zip(
            model.named_parameters(), again.named_parameters()
        ):
            assert na == nb and torch.equal(pa, pb)
        ids = rand_ids(1, 6)
        la, _ = model(ids)
        lb, _ = again(ids)
        assert torch.equal(la, lb)

    def test_f64_round_trip_keeps_dtype(self, tmp_path):
        model = tiny_model(dtype=torch.float64, seed=7)
        save_model(tmp_path / "m.ckpt", model)
        again = load_model(tmp_path / "m.ckpt")
        assert again.dtype == torch.float64
        assert torch.equal(again.emb.weight, model.emb.weight)

    def test_initial_state_round_trip(self, tmp_path):
        ist = InitialState(TINY, tune_shift=True, dtype=torch.float64)
        with torch.no_grad():
            ist.wkv.normal_()
            ist.shift_att.normal_()
        save_initial_state(tmp_path / "s.ckpt", ist)
        again = load_initial_state(tmp_path / "s.ckpt")
        assert again.tune_shift
        assert torch.equal(again.wkv, ist.wkv)
        assert torch.equal(again.shift_att, ist.shift_att)

    def test_lora_round_trip(self, tmp_path):
        model = tiny_model(dtype=torch.float32, seed=8)
        save_model(tmp_path / "base.ckpt", model)
        adapter = apply_lora(model, rank=4, alpha=16.0, seed=9)
        with torch.no_grad():
            for p in adapter.parameters():
                p.normal_()
        save_lora(tmp_path / "ad.ckpt", adapter, model.cfg)
        ids = rand_ids(1, 8)
        tuned, _ = model(ids)

        fresh = load_model(tmp_path / "base.ckpt")
        restored = load_lora(tmp_path / "ad.ckpt", fresh)
        assert restored.rank == 4 and restored.alpha == 16.0
        again, _ = fresh(ids)
        assert torch.equal(tuned, again)

    def test_lora_config_mismatch(self, tmp_path):
        model = tiny_model(dtype=torch.float32)
        adapter = apply_lora(model, rank=2, alpha=2.0)
        save_lora(tmp_path / "ad.ckpt", adapter, model.cfg)
        other = RWKV7(
            ModelConfig(
                n_layers=2, d_model=16, head_size=8, d_ffn=48, vocab_size=30,
                decay_rank=4, iclr_rank=4, value_rank=4, gate_rank=4,
            ),
            seed=0,
        )
        with pytest.raises(CheckpointError):
            load_lora(tmp_path / "ad.ckpt", other)

    def test_kind_and_corruption_checks(self, tmp_path):
        model = tiny_model(dtype=torch.float32)
        path = tmp_path / "m.ckpt"
        save_model(path, model)
        with pytest.raises(CheckpointError):
            load_initial_state(path)

        data = path.read_bytes()
        bad_magic = tmp_path / "bad.ckpt"
        bad_magic.write_bytes(b"XXXX" + data[4:])
        with pytest.raises(CheckpointError):
            load_tensors(bad_magic)

        truncated = tmp_path / "trunc.ckpt"
        truncated.write_bytes(data[: len(data) - 16])
        with pytest.raises(CheckpointError):
            load_tensors(truncated)

        trailing = tmp_path / "trail.ckpt"
        trailing.write_bytes(data + b"\x00")
        with pytest.raises(CheckpointError):
            load_tensors(trailing)

    def test_generic_tensor_file(self, tmp_path):
        tensors = {"a": torch.randn(3, 4, dtype=torch.float64), "b": torch.zeros(5)}
        save_tensors(tmp_path / "t.ckpt", "blob", {"note": 1}, tensors)
        kind, config, loaded = load_tensors(tmp_path / "t.ckpt")
        assert kind == "blob" and config == {"note": 1}
        assert torch.equal(loaded["a"], tensors["a"])
        assert loaded["b"].dtype == torch.float32


class TestConfig:
    def test_validation(self):
        with pytest.raises(ValueError):
            ModelConfig(d_model=100, head_size=64)
        with pytest.raises(ValueError):
            ModelConfig(n_layers=0)

    def test_json_round_trip(self):
        cfg = ModelConfig()
        assert ModelConfig.from_json_dict(cfg.to_json_dict()) == cfg
