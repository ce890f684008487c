"""Command line umbrella for the workbench.

Subcommands cover the whole loop: vocabulary training, dataset shards,
model training and personalization, single-file infilling, pair-folder
evaluation, sampler ablations, and the HTTP service. Each command prints
a small JSON summary to stdout; warnings go to stderr.
"""

from __future__ import annotations

import argparse
import base64
import json
import sys
import time
from dataclasses import replace
from pathlib import Path

import torch

from .. import __version__
from ..midi_io import MidiError, Score, read_midi, write_midi
from ..model import (
    CheckpointError,
    ModelConfig,
    RWKV7,
    save_initial_state,
    save_lora,
    save_model,
)
from ..prompt import (
    PromptError,
    PromptSpec,
    build_dataset,
    load_dataset,
    prompt_ids,
    splice_back,
)
from ..sampler import SamplerConfig, SamplerError, generate_infill
from ..tokenizer import (
    DUR_CLASS_NAMES,
    TokenFileError,
    TokenizeError,
    TokenizerConfig,
    TokenKind,
    Vocabulary,
    apply_bpe,
    decode_tracks,
    encode_score,
    invert_bpe,
    load_ids,
    load_vocab,
    save_ids,
    save_vocab,
    train_bpe,
)
from ..training import (
    CorpusSource,
    FixedSource,
    TrainingDiverged,
    default_train_config,
    lora_tune,
    pretrain,
    state_tune,
)
from .corpus import STYLE_CHROMATIC, STYLE_PENTATONIC, style_corpus
from .experiments import HarnessError, evaluate_pairs, run_sampling_ablation
from .service import CHECKPOINT_DIR_ENV, ModelBundle, create_app

STYLES = {s.name: s for s in (STYLE_PENTATONIC, STYLE_CHROMATIC)}


class CliError(Exception):
    pass


def _emit(payload: dict) -> None:
    print(json.dumps(payload, indent=2, sort_keys=True))


def _read_scores(corpus: str | Path) -> list[tuple[str, Score]]:
    """Sorted (stem, score) pairs from every readable .mid/.midi file."""
    root = Path(corpus)
    if not root.is_dir():
        raise CliError(f"corpus directory {root} does not exist")
    paths = sorted(p for p in root.iterdir() if p.suffix.lower() in (".mid", ".midi"))
    if not paths:
        raise CliError(f"no MIDI files in {root}")
    out = []
    for p in paths:
        try:
            out.append((p.stem, read_midi(p.read_bytes())))
        except MidiError as e:
            print(f"skipping {p.name}: {e}", file=sys.stderr)
    if not out:
        raise CliError(f"no readable MIDI files in {root}")
    return out


def _checkpoint_dir(args) -> Path:
    import os

    raw = args.checkpoint or os.environ.get(CHECKPOINT_DIR_ENV)
    if not raw:
        raise CliError(
            f"pass --checkpoint or set {CHECKPOINT_DIR_ENV}"
        )
    return Path(raw)


def _outfile(raw) -> Path:
    path = Path(raw)
    path.parent.mkdir(parents=True, exist_ok=True)
    return path


def _overrides(args, names: tuple[str, ...]) -> dict:
    return {n: getattr(args, n) for n in names if getattr(args, n) is not None}


def _sampler_config(args, seed: int) -> SamplerConfig:
    fields = ("temperature", "repetition_penalty", "top_k", "top_p", "max_tokens")
    return replace(SamplerConfig(seed=seed), **_overrides(args, fields))


def _add_sampler_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--temperature", type=float)
    p.add_argument("--repetition-penalty", type=float, dest="repetition_penalty")
    p.add_argument("--top-k", type=int, dest="top_k")
    p.add_argument("--top-p", type=float, dest="top_p")
    p.add_argument("--max-tokens", type=int, dest="max_tokens")


# ---------------------------------------------------------------------------
# tokenizer


def _split_tracks(tokens):
    streams, cur = [], None
    for t in tokens:
        if t.kind is TokenKind.TRACK_START:
            cur = [t]
            streams.append(cur)
        elif cur is not None:
            cur.append(t)
    if not streams:
        raise CliError("token stream contains no tracks")
    return streams


def cmd_tokenizer(args) -> None:
    if args.tok_cmd == "train":
        cfg = TokenizerConfig()
        seqs = []
        base = Vocabulary(cfg)
        for _stem, score in _read_scores(args.corpus):
            try:
                enc = encode_score(score, cfg)
            except TokenizeError as e:
                print(f"skipping a score: {e}", file=sys.stderr)
                continue
            for t in range(enc.n_tracks):
                seqs.append(base.encode_tokens(enc.track_tokens(t)))
        vocab = train_bpe(seqs, cfg, args.size)
        save_vocab(vocab, _outfile(args.out))
        _emit({
            "vocab": str(args.out),
            "size": vocab.size,
            "base_size": vocab.base_size,
            "merges": len(vocab.merges),
            "hash": vocab.content_hash(),
            "exhausted": vocab.exhausted,
        })
    elif args.tok_cmd == "info":
        vocab = load_vocab(args.vocab)
        _emit({
            "size": vocab.size,
            "base_size": vocab.base_size,
            "merges": len(vocab.merges),
            "hash": vocab.content_hash(),
        })
    elif args.tok_cmd == "encode":
        vocab = load_vocab(args.vocab)
        score = read_midi(Path(args.midi).read_bytes())
        enc = encode_score(score, vocab.cfg)
        tokens = [t for track in range(enc.n_tracks) for t in enc.track_tokens(track)]
        ids = apply_bpe(vocab.encode_tokens(tokens), vocab)
        save_ids(ids, vocab, _outfile(args.out))
        _emit({
            "out": str(args.out),
            "tracks": enc.n_tracks,
            "bars": enc.n_bars,
            "base_tokens": len(tokens),
            "ids": len(ids),
        })
    else:  # decode
        vocab = load_vocab(args.vocab)
        ids = load_ids(args.ids, vocab)
        tokens = vocab.decode_ids(invert_bpe(ids, vocab))
        score = decode_tracks(_split_tracks(tokens), vocab.cfg, args.tpq)
        _outfile(args.out).write_bytes(write_midi(score))
        _emit({"out": str(args.out), "tracks": len(score.tracks)})


# ---------------------------------------------------------------------------
# dataset


def cmd_dataset(args) -> None:
    if args.data_cmd == "synth":
        style = STYLES[args.style]
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        scores = style_corpus(style, args.count, args.seed, n_bars=args.bars)
        for i, score in enumerate(scores):
            (out / f"{style.name}_{i:03d}.mid").write_bytes(write_midi(score))
        _emit({"out": str(out), "style": style.name, "count": len(scores)})
    else:  # build
        vocab = load_vocab(args.vocab)
        scores = [score for _stem, score in _read_scores(args.corpus)]
        manifest = build_dataset(
            scores,
            args.out,
            vocab=vocab,
            seq_budget=args.seq_budget,
            seed=args.seed,
            epoch=args.epoch,
            min_bars=args.min_bars,
            min_notes=args.min_notes,
            examples_per_file=args.examples_per_file,
        )
        _emit({
            "out": str(args.out),
            "examples": len(manifest["examples"]),
            "rejected": manifest["rejected"],
            "filtered": manifest["filtered"],
        })


# ---------------------------------------------------------------------------
# training


_MODEL_FIELDS = (
    "n_layers", "d_model", "head_size", "d_ffn",
    "decay_rank", "iclr_rank", "value_rank", "gate_rank",
)


def cmd_train(args) -> None:
    vocab = load_vocab(args.vocab)
    examples = []
    for shard in args.data:
        examples.extend(load_dataset(shard, vocab))
    if not examples:
        raise CliError("dataset shards contain no examples")
    cfg = default_train_config(
        "pretrain",
        **_overrides(args, (
            "lr", "weight_decay", "epochs", "batch_size",
            "seq_len", "seed", "time_budget", "grad_clip",
        )),
    )
    model_cfg = ModelConfig(vocab_size=vocab.size, **_overrides(args, _MODEL_FIELDS))
    model = RWKV7(model_cfg, dtype=torch.float32, seed=cfg.seed)
    source = FixedSource(examples, seed=cfg.seed)
    result = pretrain(model, source, cfg, metrics_path=args.metrics_log)
    save_model(_outfile(args.out), model)
    _emit({
        "out": str(args.out),
        "examples": len(examples),
        "steps": result.steps,
        "epochs_completed": result.epochs_completed,
        "final_loss": result.final_loss,
        "wall_time": result.wall_time,
        "stopped": result.stopped,
    })


def cmd_finetune(args) -> None:
    bundle = ModelBundle.load(_checkpoint_dir(args))
    cfg = default_train_config(
        args.mode,
        **_overrides(args, (
            "lr", "epochs", "batch_size", "seq_len",
            "seed", "time_budget", "rank", "alpha",
        )),
    )
    scores = [score for _stem, score in _read_scores(args.corpus)]
    source = CorpusSource(
        scores,
        vocab=bundle.vocab,
        seq_budget=cfg.seq_len,
        seed=cfg.seed,
        min_bars=args.min_bars,
        min_notes=args.min_notes,
    )
    if args.mode == "state":
        state, result = state_tune(
            bundle.model, source, cfg, metrics_path=args.metrics_log
        )
        save_initial_state(_outfile(args.out), state)
    else:
        adapter, result = lora_tune(
            bundle.model,
            source,
            cfg,
            initial_state=bundle.initial_state,
            metrics_path=args.metrics_log,
        )
        save_lora(_outfile(args.out), adapter, bundle.model.cfg)
    _emit({
        "out": str(args.out),
        "mode": args.mode,
        "files": len(source.files),
        "steps": result.steps,
        "final_loss": result.final_loss,
        "wall_time": result.wall_time,
        "stopped": result.stopped,
    })


# ---------------------------------------------------------------------------
# inference


def _parse_bars(text: str) -> tuple[int, int]:
    try:
        start_s, end_s = text.split("..")
        start, end = int(start_s), int(end_s)
    except ValueError:
        raise CliError(f"--bars wants START..END, got {text!r}") from None
    if start < 0 or end <= start:
        raise CliError(f"--bars range {text!r} is empty or negative")
    return start, end - start


def _parse_dur_classes(text: str) -> tuple[bool, ...]:
    names = [n.strip() for n in text.split(",") if n.strip()]
    for n in names:
        if n not in DUR_CLASS_NAMES:
            raise CliError(
                f"unknown duration class {n!r}; choose from {', '.join(DUR_CLASS_NAMES)}"
            )
    return tuple(name in names for name in DUR_CLASS_NAMES)


def cmd_infill(args) -> None:
    from .service import ControlValues, _bar_controls

    bundle = ModelBundle.load(_checkpoint_dir(args))
    score = read_midi(Path(args.midi).read_bytes())
    enc = encode_score(score, bundle.vocab.cfg)
    start, length = _parse_bars(args.bars)
    if not 0 <= args.track < enc.n_tracks:
        raise CliError(f"track {args.track} out of range 0..{enc.n_tracks - 1}")
    if start + length > enc.n_bars:
        raise CliError(f"bars {args.bars} outside the score's {enc.n_bars} bars")

    flags = _parse_dur_classes(args.dur_classes) if args.dur_classes else None
    override = ControlValues(
        density=args.density,
        poly_min=args.poly_min,
        poly_max=args.poly_max,
        **(
            {f"dur_{name}": flag for name, flag in zip(DUR_CLASS_NAMES, flags)}
            if flags is not None
            else {}
        ),
    )
    controls = []
    for bar in range(start, start + length):
        base = _bar_controls(enc, args.track, bar)
        ctrl = override.merged_with(base)
        ctrl.validate(enc.cfg)
        controls.append(ctrl)

    spec = PromptSpec(
        track_index=args.track,
        start=start,
        length=length,
        context=args.context if args.context is not None else 4 * length,
        track_order=tuple(range(enc.n_tracks)),
        controls=tuple(controls),
    )
    ids, _, _ = prompt_ids(enc, spec, bundle.vocab, mode="infer")
    sampler = _sampler_config(args, args.seed)
    caps = tuple(enc.bar_positions[b] for b in range(start, start + length))
    began = time.perf_counter()
    fill = generate_infill(
        bundle.model,
        bundle.vocab,
        ids,
        controls,
        sampler,
        initial_state=bundle.initial_state,
        bar_caps=caps,
        greedy=args.greedy,
    ).fill_ids
    spliced = splice_back(score, spec, fill, bundle.vocab)
    _outfile(args.out).write_bytes(write_midi(spliced))
    _emit({
        "out": str(args.out),
        "track": args.track,
        "bars": [start, start + length],
        "context": spec.context,
        "variant": bundle.variant,
        "seed": args.seed,
        "fill_tokens": len(fill),
        "elapsed_seconds": time.perf_counter() - began,
        "controls": [ControlValues.from_controls(c).model_dump() for c in controls],
    })


# ---------------------------------------------------------------------------
# evaluation


def cmd_eval(args) -> None:
    cfg = load_vocab(args.vocab).cfg if args.vocab else TokenizerConfig()
    report = evaluate_pairs(args.pairs, cfg)
    _outfile(args.report).write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    _emit({
        "report": str(args.report),
        "pairs": len(report["pairs"]),
        "cp": report["cp"]["mean"],
        "gs": report["gs"]["mean"],
        "pche": report["pche"]["mean"],
        "f1": report["f1"]["mean"],
    })


def cmd_ablate(args) -> None:
    bundle = ModelBundle.load(_checkpoint_dir(args))
    scores = [score for _stem, score in _read_scores(args.corpus)]
    default = _sampler_config(args, seed=0)
    results = run_sampling_ablation(
        bundle.model,
        bundle.vocab,
        scores,
        n_bars=args.bars,
        n_examples=args.examples,
        seed=args.seed,
        default=default,
        initial_state=bundle.initial_state,
    )
    payload = {
        "n_bars": args.bars,
        "n_examples": args.examples,
        "seed": args.seed,
        "default_sampler": default.to_json_dict(),
        "runs": [
            {"label": label, "report": report.to_json_dict()}
            for label, report in results
        ],
    }
    _outfile(args.report).write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
    _emit({
        "report": str(args.report),
        "runs": [label for label, _ in results],
    })


# ---------------------------------------------------------------------------
# service


def cmd_serve(args) -> None:
    if args.openapi_out:
        app = create_app(checkpoint_dir=args.checkpoint or "unused")
        doc = json.dumps(app.openapi(), indent=2, sort_keys=True) + "\n"
        _outfile(args.openapi_out).write_text(doc)
        _emit({"openapi": str(args.openapi_out)})
        return
    import uvicorn

    app = create_app(checkpoint_dir=_checkpoint_dir(args))
    uvicorn.run(app, host=args.host, port=args.port)


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mrwkv",
        description="Multi-track symbolic music infilling workbench.",
    )
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    tok = sub.add_parser("tokenizer", help="vocabulary and id-file tools")
    tok_sub = tok.add_subparsers(dest="tok_cmd", required=True)
    t = tok_sub.add_parser("train", help="learn BPE merges from a MIDI folder")
    t.add_argument("--corpus", required=True)
    t.add_argument("--size", type=int, required=True, help="total vocabulary size")
    t.add_argument("--out", required=True)
    t = tok_sub.add_parser("info", help="describe a vocabulary file")
    t.add_argument("--vocab", required=True)
    t = tok_sub.add_parser("encode", help="MIDI file to id binary")
    t.add_argument("--midi", required=True)
    t.add_argument("--vocab", required=True)
    t.add_argument("--out", required=True)
    t = tok_sub.add_parser("decode", help="id binary back to MIDI")
    t.add_argument("--ids", required=True)
    t.add_argument("--vocab", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--tpq", type=int, default=480)
    tok.set_defaults(func=cmd_tokenizer)

    ds = sub.add_parser("dataset", help="training shards and synthetic corpora")
    ds_sub = ds.add_subparsers(dest="data_cmd", required=True)
    d = ds_sub.add_parser("build", help="serialize one epoch of training examples")
    d.add_argument("--corpus", required=True)
    d.add_argument("--vocab", required=True)
    d.add_argument("--out", required=True)
    d.add_argument("--seq-budget", type=int, default=2048, dest="seq_budget")
    d.add_argument("--seed", type=int, default=0)
    d.add_argument("--epoch", type=int, default=0)
    d.add_argument("--min-bars", type=int, default=8, dest="min_bars")
    d.add_argument("--min-notes", type=int, default=100, dest="min_notes")
    d.add_argument(
        "--examples-per-file", type=int, default=1, dest="examples_per_file"
    )
    d = ds_sub.add_parser("synth", help="write a synthetic style corpus")
    d.add_argument("--style", choices=sorted(STYLES), required=True)
    d.add_argument("--count", type=int, required=True)
    d.add_argument("--out", required=True)
    d.add_argument("--seed", type=int, default=0)
    d.add_argument("--bars", type=int, default=16)
    ds.set_defaults(func=cmd_dataset)

    tr = sub.add_parser("train", help="pretrain a model on dataset shards")
    tr.add_argument("--data", action="append", required=True, help="shard directory (repeatable)")
    tr.add_argument("--vocab", required=True)
    tr.add_argument("--out", required=True)
    for field in _MODEL_FIELDS:
        tr.add_argument(f"--{field.replace('_', '-')}", type=int, dest=field)
    tr.add_argument("--lr", type=float)
    tr.add_argument("--weight-decay", type=float, dest="weight_decay")
    tr.add_argument("--epochs", type=int)
    tr.add_argument("--batch-size", type=int, dest="batch_size")
    tr.add_argument("--seq-len", type=int, dest="seq_len")
    tr.add_argument("--seed", type=int)
    tr.add_argument("--time-budget", type=float, dest="time_budget")
    tr.add_argument("--grad-clip", type=float, dest="grad_clip")
    tr.add_argument("--metrics-log", dest="metrics_log")
    tr.set_defaults(func=cmd_train)

    ft = sub.add_parser("finetune", help="personalize a checkpoint on a MIDI folder")
    ft.add_argument("--checkpoint", help=f"defaults to {CHECKPOINT_DIR_ENV}")
    ft.add_argument("--corpus", required=True)
    ft.add_argument("--out", required=True)
    ft.add_argument("--mode", choices=("state", "lora"), required=True)
    ft.add_argument("--rank", type=int)
    ft.add_argument("--alpha", type=float)
    ft.add_argument("--lr", type=float)
    ft.add_argument("--epochs", type=int)
    ft.add_argument("--batch-size", type=int, dest="batch_size")
    ft.add_argument("--seq-len", type=int, dest="seq_len")
    ft.add_argument("--time-budget", type=float, dest="time_budget")
    ft.add_argument("--seed", type=int, default=42)
    ft.add_argument("--min-bars", type=int, default=8, dest="min_bars")
    ft.add_argument("--min-notes", type=int, default=100, dest="min_notes")
    ft.add_argument("--metrics-log", dest="metrics_log")
    ft.set_defaults(func=cmd_finetune)

    inf = sub.add_parser("infill", help="regenerate bars of one track")
    inf.add_argument("--checkpoint", help=f"defaults to {CHECKPOINT_DIR_ENV}")
    inf.add_argument("--midi", required=True)
    inf.add_argument("--track", type=int, required=True)
    inf.add_argument("--bars", required=True, help="START..END, end exclusive")
    inf.add_argument("--context", type=int)
    inf.add_argument("--out", required=True)
    inf.add_argument("--density", type=int)
    inf.add_argument("--poly-min", type=int, dest="poly_min")
    inf.add_argument("--poly-max", type=int, dest="poly_max")
    inf.add_argument(
        "--dur-classes", dest="dur_classes",
        help="comma list of " + ",".join(DUR_CLASS_NAMES),
    )
    inf.add_argument("--seed", type=int, default=0)
    inf.add_argument("--greedy", action="store_true")
    _add_sampler_flags(inf)
    inf.set_defaults(func=cmd_infill)

    ev = sub.add_parser("eval", help="score original/infilled MIDI pairs")
    ev.add_argument("--pairs", required=True, help="folder of <stem>.original.mid triples")
    ev.add_argument("--report", required=True)
    ev.add_argument("--vocab", help="use this vocabulary's grid settings")
    ev.set_defaults(func=cmd_eval)

    ab = sub.add_parser("ablate", help="sampler parameter sweep")
    ab.add_argument("--checkpoint", help=f"defaults to {CHECKPOINT_DIR_ENV}")
    ab.add_argument("--corpus", required=True)
    ab.add_argument("--report", required=True)
    ab.add_argument("--bars", type=int, default=2)
    ab.add_argument("--examples", type=int, default=100)
    ab.add_argument("--seed", type=int, default=0)
    _add_sampler_flags(ab)
    ab.set_defaults(func=cmd_ablate)

    sv = sub.add_parser("serve", help="run the HTTP service")
    sv.add_argument("--checkpoint", help=f"defaults to {CHECKPOINT_DIR_ENV}")
    sv.add_argument("--host", default="127.0.0.1")
    sv.add_argument("--port", type=int, default=8000)
    sv.add_argument(
        "--openapi-out", dest="openapi_out",
        help="write the OpenAPI document and exit",
    )
    sv.set_defaults(func=cmd_serve)

    return parser


_KNOWN_ERRORS = (
    CliError,
    CheckpointError,
    HarnessError,
    MidiError,
    PromptError,
    SamplerError,
    TokenFileError,
    TokenizeError,
    TrainingDiverged,
    FileNotFoundError,
    ValueError,
)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        args.func(args)
    except _KNOWN_ERRORS as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
