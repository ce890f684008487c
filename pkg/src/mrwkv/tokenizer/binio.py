"""On-disk formats for vocabularies and token sequences.

Vocabulary files are versioned JSON. Token sequences use a small binary
format: an ``MRTK`` magic, format version, integer width, the first
eight bytes of the producing vocabulary's content hash (so stale pairs
of model and vocabulary fail loudly), then little-endian ids.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Sequence

import numpy as np

from .vocab import Vocabulary

_MAGIC = b"MRTK"
_VERSION = 1
_HEADER = struct.Struct("<4sHHQQ")


class TokenFileError(Exception):
    pass


def save_vocab(vocab: Vocabulary, path: str | Path) -> None:
    Path(path).write_text(json.dumps(vocab.to_json_dict(), indent=1, sort_keys=True))


def load_vocab(path: str | Path) -> Vocabulary:
    return Vocabulary.from_json_dict(json.loads(Path(path).read_text()))


def pack_ids(ids: Sequence[int], vocab: Vocabulary) -> bytes:
    width = 2 if vocab.size <= 0xFFFF else 4
    dtype = "<u2" if width == 2 else "<u4"
    arr = np.asarray(ids, dtype=np.int64)
    if arr.size and (arr.min() < 0 or arr.max() >= vocab.size):
        raise TokenFileError("id out of vocabulary range")
    header = _HEADER.pack(_MAGIC, _VERSION, width, vocab.hash64(), len(ids))
    return header + arr.astype(dtype).tobytes()


def unpack_ids(
    data: bytes, vocab: Vocabulary | None = None, *, check_hash: bool = True
) -> list[int]:
    if len(data) < _HEADER.size:
        raise TokenFileError("truncated token file header")
    magic, version, width, vhash, count = _HEADER.unpack_from(data)
    if magic != _MAGIC:
        raise TokenFileError("not a token file")
    if version != _VERSION:
        raise TokenFileError(f"unsupported token file version {version}")
    if width not in (2, 4):
        raise TokenFileError(f"bad integer width {width}")
    if vocab is not None and check_hash and vhash != vocab.hash64():
        raise TokenFileError("token file was produced with a different vocabulary")
    body = data[_HEADER.size :]
    if len(body) != count * width:
        raise TokenFileError("token file length mismatch")
    arr = np.frombuffer(body, dtype="<u2" if width == 2 else "<u4")
    return arr.astype(np.int64).tolist()


def save_ids(ids: Sequence[int], vocab: Vocabulary, path: str | Path) -> None:
    Path(path).write_bytes(pack_ids(ids, vocab))


def load_ids(path: str | Path, vocab: Vocabulary | None = None, *, check_hash: bool = True) -> list[int]:
    return unpack_ids(Path(path).read_bytes(), vocab, check_hash=check_hash)
