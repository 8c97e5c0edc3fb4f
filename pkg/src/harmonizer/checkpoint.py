"""Bit-exact binary checkpoint format.

Layout (all integers little-endian):

    magic   4 bytes  b"HKPT"
    version u16
    config  u32 byte length, then UTF-8 "key = value" lines
    record* until end of file:
        name   u16 length + UTF-8 bytes
        rank   u8
        dims   u32 per axis
        data   float32 payload, row-major

The reader validates that every record's payload matches its dims and that
the file ends exactly on a record boundary, so save -> load -> save is
byte-identical.
"""
from __future__ import annotations

import struct
from typing import Dict, Tuple

import numpy as np

from .errors import CheckpointError
from .tensor import ParamStore

MAGIC = b"HKPT"
VERSION = 1


def save_checkpoint(path, config_text: str, params: ParamStore) -> None:
    blob = bytearray()
    blob += MAGIC
    blob += struct.pack("<H", VERSION)
    cfg = config_text.encode("utf-8")
    blob += struct.pack("<I", len(cfg))
    blob += cfg
    for name, tensor in params:
        encoded = name.encode("utf-8")
        arr = np.ascontiguousarray(tensor.data, dtype="<f4")
        blob += struct.pack("<H", len(encoded))
        blob += encoded
        blob += struct.pack("<B", arr.ndim)
        for dim in arr.shape:
            blob += struct.pack("<I", dim)
        blob += arr.tobytes()
    with open(path, "wb") as fh:
        fh.write(bytes(blob))


def load_checkpoint(path) -> Tuple[str, Dict[str, np.ndarray]]:
    with open(path, "rb") as fh:
        blob = fh.read()
    total = len(blob)

    def need(offset: int, count: int) -> None:
        if offset + count > total:
            raise CheckpointError(
                f"truncated checkpoint: wanted {count} bytes at offset {offset}, "
                f"file has {total}"
            )

    need(0, 6)
    if blob[:4] != MAGIC:
        raise CheckpointError(f"bad magic {blob[:4]!r}, expected {MAGIC!r}")
    (version,) = struct.unpack_from("<H", blob, 4)
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    pos = 6
    need(pos, 4)
    (cfg_len,) = struct.unpack_from("<I", blob, pos)
    pos += 4
    need(pos, cfg_len)
    config_text = blob[pos : pos + cfg_len].decode("utf-8")
    pos += cfg_len

    arrays: Dict[str, np.ndarray] = {}
    while pos < total:
        need(pos, 2)
        (name_len,) = struct.unpack_from("<H", blob, pos)
        pos += 2
        need(pos, name_len)
        name = blob[pos : pos + name_len].decode("utf-8")
        pos += name_len
        need(pos, 1)
        rank = blob[pos]
        pos += 1
        need(pos, 4 * rank)
        dims = struct.unpack_from(f"<{rank}I", blob, pos) if rank else ()
        pos += 4 * rank
        count = int(np.prod(dims)) if rank else 1
        need(pos, 4 * count)
        arr = np.frombuffer(blob, dtype="<f4", count=count, offset=pos).reshape(dims)
        pos += 4 * count
        if name in arrays:
            raise CheckpointError(f"duplicate parameter {name!r}")
        arrays[name] = arr.copy()
    if pos != total:
        raise CheckpointError(f"trailing bytes after last record at offset {pos}")
    return config_text, arrays


def restore_params(params: ParamStore, arrays: Dict[str, np.ndarray]) -> None:
    names = set(params.names())
    stored = set(arrays.keys())
    if names != stored:
        missing = sorted(names - stored)
        extra = sorted(stored - names)
        raise CheckpointError(
            f"parameter set mismatch: missing {missing[:4]}, unexpected {extra[:4]}"
        )
    for name, tensor in params:
        arr = arrays[name]
        if arr.shape != tensor.data.shape:
            raise CheckpointError(
                f"parameter {name!r}: stored shape {arr.shape} != model {tensor.data.shape}"
            )
        tensor.data = arr.astype(tensor.data.dtype)
