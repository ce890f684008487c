"""End-to-end runs of every CLI subcommand on a tiny synthetic setup."""

import contextlib
import hashlib
import io
import json
import shutil
from pathlib import Path

import pytest

from mrwkv.harness.cli import main
from mrwkv.harness.service import CHECKPOINT_DIR_ENV
from mrwkv.midi_io import read_midi
from mrwkv.model import load_model
from mrwkv.tokenizer import TokenizerConfig, Vocabulary, encode_score, load_vocab

BAR = 4 * 480

TINY_MODEL_FLAGS = (
    "--n-layers", "2", "--d-model", "16", "--head-size", "8", "--d-ffn", "32",
    "--decay-rank", "4", "--iclr-rank", "4", "--value-rank", "4", "--gate-rank", "4",
)


def run(*argv):
    buf = io.StringIO()
    with contextlib.redirect_stdout(buf):
        code = main([str(a) for a in argv])
    out = buf.getvalue()
    return code, (json.loads(out) if out.strip() else None)


def run_ok(*argv):
    code, payload = run(*argv)
    assert code == 0, f"{argv[0]} failed with code {code}"
    return payload


@pytest.fixture(scope="module")
def ws(tmp_path_factory):
    """Corpus, vocabulary, dataset shard, and a trained checkpoint dir."""
    root = tmp_path_factory.mktemp("cli")
    corpus = root / "corpus"
    vocab_path = root / "vocab.json"
    shard = root / "shard"
    ckpt = root / "ckpt"
    ckpt.mkdir()

    summaries = {}
    summaries["synth"] = run_ok(
        "dataset", "synth", "--style", "pentatonic", "--count", 6,
        "--out", corpus, "--seed", 0, "--bars", 8,
    )
    base_size = Vocabulary(TokenizerConfig()).size
    summaries["vocab"] = run_ok(
        "tokenizer", "train", "--corpus", corpus,
        "--size", base_size + 24, "--out", vocab_path,
    )
    summaries["build"] = run_ok(
        "dataset", "build", "--corpus", corpus, "--vocab", vocab_path,
        "--out", shard, "--seq-budget", 768, "--seed", 0,
        "--min-bars", 4, "--min-notes", 40,
    )
    summaries["train"] = run_ok(
        "train", "--data", shard, "--vocab", vocab_path,
        "--out", ckpt / "model.ckpt", *TINY_MODEL_FLAGS,
        "--epochs", 2, "--batch-size", 2, "--seq-len", 768, "--seed", 0,
        "--metrics-log", root / "train.jsonl",
    )
    shutil.copy(vocab_path, ckpt / "vocab.json")
    return {
        "root": root,
        "corpus": corpus,
        "vocab": vocab_path,
        "shard": shard,
        "ckpt": ckpt,
        "summaries": summaries,
    }


class TestPipelineArtifacts:
    def test_synth_writes_readable_midi(self, ws):
        files = sorted(ws["corpus"].glob("*.mid"))
        assert len(files) == 6
        assert ws["summaries"]["synth"]["count"] == 6
        score = read_midi(files[0].read_bytes())
        assert len(score.tracks) == 2

    def test_vocab_trained_with_merges(self, ws):
        vocab = load_vocab(ws["vocab"])
        assert vocab.size == ws["summaries"]["vocab"]["size"]
        assert vocab.size > vocab.base_size
        assert ws["summaries"]["vocab"]["hash"] == vocab.content_hash()

    def test_info_matches_vocab_file(self, ws):
        info = run_ok("tokenizer", "info", "--vocab", ws["vocab"])
        assert info["size"] == ws["summaries"]["vocab"]["size"]
        assert info["hash"] == ws["summaries"]["vocab"]["hash"]
        assert info["merges"] == 24

    def test_dataset_build_kept_every_file(self, ws):
        assert ws["summaries"]["build"]["examples"] == 6
        manifest = json.loads((ws["shard"] / "manifest.json").read_text())
        assert len(manifest["examples"]) == 6

    def test_train_wrote_a_loadable_model(self, ws):
        model = load_model(ws["ckpt"] / "model.ckpt")
        assert model.cfg.n_layers == 2
        assert model.cfg.d_model == 16
        assert model.cfg.vocab_size == load_vocab(ws["vocab"]).size
        assert ws["summaries"]["train"]["steps"] > 0
        assert ws["summaries"]["train"]["final_loss"] > 0.0

    def test_train_metrics_log_is_jsonl(self, ws):
        lines = (ws["root"] / "train.jsonl").read_text().splitlines()
        assert len(lines) == ws["summaries"]["train"]["steps"]
        row = json.loads(lines[0])
        assert set(row) >= {"step", "loss", "lr", "wall_time"}


class TestTokenizerRoundTrip:
    def test_encode_then_decode_reproduces_notes(self, ws, tmp_path):
        src = sorted(ws["corpus"].glob("*.mid"))[0]
        ids_path = tmp_path / "a.ids"
        out_midi = tmp_path / "a.mid"
        enc_summary = run_ok(
            "tokenizer", "encode", "--midi", src, "--vocab", ws["vocab"],
            "--out", ids_path,
        )
        assert enc_summary["ids"] < enc_summary["base_tokens"]
        run_ok(
            "tokenizer", "decode", "--ids", ids_path, "--vocab", ws["vocab"],
            "--out", out_midi,
        )
        cfg = load_vocab(ws["vocab"]).cfg
        a = encode_score(read_midi(src.read_bytes()), cfg)
        b = encode_score(read_midi(out_midi.read_bytes()), cfg)
        assert a.n_tracks == b.n_tracks
        for t in range(a.n_tracks):
            assert a.track_tokens(t) == b.track_tokens(t)


class TestFinetune:
    def test_state_mode_writes_state_and_leaves_model_alone(self, ws, tmp_path):
        model_bytes = hashlib.sha256(
            (ws["ckpt"] / "model.ckpt").read_bytes()
        ).hexdigest()
        out = tmp_path / "state.ckpt"
        summary = run_ok(
            "finetune", "--checkpoint", ws["ckpt"], "--corpus", ws["corpus"],
            "--out", out, "--mode", "state", "--epochs", 1, "--batch-size", 2,
            "--seq-len", 768, "--min-bars", 4, "--min-notes", 40,
            "--metrics-log", tmp_path / "ft.jsonl",
        )
        assert out.is_file()
        assert summary["mode"] == "state"
        assert summary["files"] == 6
        assert summary["steps"] >= 1
        assert (tmp_path / "ft.jsonl").read_text().strip()
        after = hashlib.sha256((ws["ckpt"] / "model.ckpt").read_bytes()).hexdigest()
        assert after == model_bytes

    def test_lora_mode_writes_adapter(self, ws, tmp_path):
        out = tmp_path / "lora.ckpt"
        summary = run_ok(
            "finetune", "--checkpoint", ws["ckpt"], "--corpus", ws["corpus"],
            "--out", out, "--mode", "lora", "--rank", 2, "--alpha", 4,
            "--epochs", 1, "--batch-size", 2, "--seq-len", 768,
            "--min-bars", 4, "--min-notes", 40,
        )
        assert out.is_file()
        assert summary["mode"] == "lora"
        assert summary["steps"] >= 1


class TestInfill:
    def infill(self, ws, out, *extra):
        src = sorted(ws["corpus"].glob("*.mid"))[0]
        return run_ok(
            "infill", "--checkpoint", ws["ckpt"], "--midi", src,
            "--track", 0, "--bars", "2..4", "--out", out,
            "--seed", 3, "--max-tokens", 600, *extra,
        )

    def test_only_the_region_changes(self, ws, tmp_path):
        out = tmp_path / "out.mid"
        summary = self.infill(ws, out)
        assert summary["bars"] == [2, 4]
        assert summary["context"] == 8
        assert summary["variant"] == "base"
        src = sorted(ws["corpus"].glob("*.mid"))[0]
        before = read_midi(src.read_bytes())
        after = read_midi(out.read_bytes())
        assert sorted(after.tracks[1].notes) == sorted(before.tracks[1].notes)
        outside = lambda notes: sorted(
            n for n in notes if n.onset < 2 * BAR or n.onset >= 4 * BAR
        )
        assert outside(after.tracks[0].notes) == outside(before.tracks[0].notes)

    def test_same_seed_same_bytes(self, ws, tmp_path):
        self.infill(ws, tmp_path / "a.mid")
        self.infill(ws, tmp_path / "b.mid")
        assert (tmp_path / "a.mid").read_bytes() == (tmp_path / "b.mid").read_bytes()

    def test_control_flags_reach_the_prompt(self, ws, tmp_path):
        summary = self.infill(
            ws, tmp_path / "c.mid",
            "--density", 3, "--poly-min", 1, "--poly-max", 2,
            "--dur-classes", "quarter,eighth",
        )
        assert len(summary["controls"]) == 2
        for ctrl in summary["controls"]:
            assert ctrl["density"] == 3
            assert ctrl["poly_min"] == 1
            assert ctrl["poly_max"] == 2
            assert ctrl["dur_quarter"] and ctrl["dur_eighth"]
            assert not ctrl["dur_whole"] and not ctrl["dur_sixteenth"]

    def test_bad_bars_flag(self, ws, tmp_path, capsys):
        src = sorted(ws["corpus"].glob("*.mid"))[0]
        code = main([
            "infill", "--checkpoint", str(ws["ckpt"]), "--midi", str(src),
            "--track", "0", "--bars", "3", "--out", str(tmp_path / "x.mid"),
        ])
        assert code == 2
        assert "START..END" in capsys.readouterr().err

    def test_checkpoint_dir_required(self, ws, tmp_path, capsys, monkeypatch):
        monkeypatch.delenv(CHECKPOINT_DIR_ENV, raising=False)
        src = sorted(ws["corpus"].glob("*.mid"))[0]
        code = main([
            "infill", "--midi", str(src), "--track", "0",
            "--bars", "0..1", "--out", str(tmp_path / "x.mid"),
        ])
        assert code == 2
        assert CHECKPOINT_DIR_ENV in capsys.readouterr().err

    def test_checkpoint_env_fallback(self, ws, tmp_path, monkeypatch):
        monkeypatch.setenv(CHECKPOINT_DIR_ENV, str(ws["ckpt"]))
        src = sorted(ws["corpus"].glob("*.mid"))[0]
        summary = run_ok(
            "infill", "--midi", src, "--track", 0, "--bars", "2..3",
            "--out", tmp_path / "env.mid", "--seed", 1, "--max-tokens", 600,
        )
        assert (tmp_path / "env.mid").is_file()
        assert summary["bars"] == [2, 3]


class TestEval:
    def pairs_dir(self, ws, tmp_path):
        pairs = tmp_path / "pairs"
        pairs.mkdir()
        files = sorted(ws["corpus"].glob("*.mid"))
        for stem, src in zip(("a", "b"), files):
            shutil.copy(src, pairs / f"{stem}.original.mid")
            shutil.copy(src, pairs / f"{stem}.infilled.mid")
            (pairs / f"{stem}.region.json").write_text(
                json.dumps({"track": 0, "start": 1, "length": 2})
            )
        return pairs

    def test_identical_pairs_score_perfectly(self, ws, tmp_path):
        pairs = self.pairs_dir(ws, tmp_path)
        report_path = tmp_path / "report.json"
        summary = run_ok("eval", "--pairs", pairs, "--report", report_path)
        assert summary["pairs"] == 2
        assert abs(summary["cp"] - 1.0) < 1e-12
        assert summary["gs"] == 1.0
        assert summary["pche"] == 0.0
        assert summary["f1"] == 1.0
        report = json.loads(report_path.read_text())
        assert report["pairs"] == ["a", "b"]
        assert len(report["examples"]) == 2
        assert report["failures"] == 0

    def test_missing_counterpart_fails(self, ws, tmp_path, capsys):
        pairs = self.pairs_dir(ws, tmp_path)
        (pairs / "a.infilled.mid").unlink()
        code = main([
            "eval", "--pairs", str(pairs), "--report", str(tmp_path / "r.json"),
        ])
        assert code == 2
        assert "a.infilled.mid" in capsys.readouterr().err

    def test_bad_region_file_fails(self, ws, tmp_path, capsys):
        pairs = self.pairs_dir(ws, tmp_path)
        (pairs / "b.region.json").write_text('{"track": 0}')
        code = main([
            "eval", "--pairs", str(pairs), "--report", str(tmp_path / "r.json"),
        ])
        assert code == 2
        assert "b.region.json" in capsys.readouterr().err


class TestAblate:
    def test_runs_one_default_and_eight_variants(self, ws, tmp_path):
        report_path = tmp_path / "ablation.json"
        summary = run_ok(
            "ablate", "--checkpoint", ws["ckpt"], "--corpus", ws["corpus"],
            "--report", report_path, "--bars", 1, "--examples", 2,
            "--seed", 0, "--max-tokens", 600,
        )
        assert len(summary["runs"]) == 9
        assert summary["runs"][0] == "default"
        report = json.loads(report_path.read_text())
        assert [r["label"] for r in report["runs"]] == summary["runs"]
        for entry in report["runs"]:
            assert len(entry["report"]["examples"]) == 2


class TestServe:
    def test_openapi_export_matches_shipped_document(self, tmp_path):
        out = tmp_path / "openapi.json"
        run_ok("serve", "--openapi-out", out)
        exported = json.loads(out.read_text())
        shipped = json.loads(
            (Path(__file__).parent.parent / "docs" / "openapi.json").read_text()
        )
        assert exported == shipped


class TestParser:
    def test_version_flag(self, capsys):
        with pytest.raises(SystemExit) as exc:
            main(["--version"])
        assert exc.value.code == 0

    def test_unknown_command_is_a_usage_error(self):
        with pytest.raises(SystemExit) as exc:
            main(["flambe"])
        assert exc.value.code == 2

    def test_missing_corpus_dir(self, tmp_path, capsys):
        code = main([
            "tokenizer", "train", "--corpus", str(tmp_path / "nope"),
            "--size", "300", "--out", str(tmp_path / "v.json"),
        ])
        assert code == 2
        assert "does not exist" in capsys.readouterr().err
