"""Event vocabulary, bar-structured encoding, and BPE over token ids."""

from .binio import (
    TokenFileError,
    load_ids,
    load_vocab,
    pack_ids,
    save_ids,
    save_vocab,
    unpack_ids,
)
from .bpe import apply_bpe, invert_bpe, train_bpe
from .remi import (
    DecodeError,
    QNote,
    ScoreEncoding,
    TokenizeError,
    TrackEmitter,
    decode_tracks,
    encode_score,
    parse_positions,
)
from .vocab import (
    ATTRIBUTE_KINDS,
    DUR_CLASS_NAMES,
    DUR_CLASS_QUARTERS,
    STRUCTURAL_KINDS,
    BaseToken,
    TokenizerConfig,
    TokenKind,
    Vocabulary,
    build_base_tokens,
)

__all__ = [
    "ATTRIBUTE_KINDS",
    "BaseToken",
    "DecodeError",
    "DUR_CLASS_NAMES",
    "DUR_CLASS_QUARTERS",
    "QNote",
    "ScoreEncoding",
    "STRUCTURAL_KINDS",
    "TokenFileError",
    "TokenizeError",
    "TokenizerConfig",
    "TokenKind",
    "TrackEmitter",
    "Vocabulary",
    "apply_bpe",
    "build_base_tokens",
    "decode_tracks",
    "encode_score",
    "invert_bpe",
    "load_ids",
    "load_vocab",
    "pack_ids",
    "parse_positions",
    "save_ids",
    "save_vocab",
    "train_bpe",
    "unpack_ids",
]
