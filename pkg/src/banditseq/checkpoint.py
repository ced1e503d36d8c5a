"""Versioned binary checkpoints: vocabulary + named float64 tensors.

Layout (all integers little-endian):

    magic            4 bytes        b"BNSQ"
    version          u32            currently 1
    iteration        u64
    seed             u64
    config_hash      u32 len + UTF-8 bytes (sha256 hex of the run config)
    vocabulary       u32 count, then per token: u32 len + UTF-8 bytes,
                     in id order (reserved tokens first)
    tensor block     u32 count, then per tensor:
                       u32 name-len + UTF-8 name
                       u32 rank, rank x u64 dims
                       float64 values, row-major
    optimizer flag   u8 (0 or 1)
    optimizer block  tensor block with the same encoding, present iff flag=1

Tensors are written in sorted-name order so save -> load -> save is byte
identical. Loading validates the magic, the version, structural
completeness (truncation is reported with the failing byte offset), and
that embedding and output shapes agree with the stored vocabulary.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .model import Vocabulary

__all__ = ["Checkpoint", "CheckpointFormatError", "save_checkpoint",
           "load_checkpoint", "MAGIC", "VERSION"]

MAGIC = b"BNSQ"
VERSION = 1


class CheckpointFormatError(ValueError):
    """Malformed checkpoint file; the message includes the byte offset."""


@dataclass
class Checkpoint:
    """Everything needed to restore a model (and optionally its optimizer)."""

    vocab: Vocabulary
    tensors: dict
    iteration: int = 0
    seed: int = 0
    config_hash: str = ""
    optimizer: dict | None = None
    version: int = VERSION

    def to_model(self):
        from .model import ModelParams

        return ModelParams.from_tensors(len(self.vocab), self.tensors)


def _write_string(out, text):
    data = text.encode("utf-8")
    out.append(struct.pack("<I", len(data)))
    out.append(data)


def _write_tensor_block(out, tensors):
    out.append(struct.pack("<I", len(tensors)))
    for name in sorted(tensors):
        arr = np.ascontiguousarray(tensors[name], dtype=np.float64)
        _write_string(out, name)
        out.append(struct.pack("<I", arr.ndim))
        out.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        out.append(arr.astype("<f8").tobytes())


def save_checkpoint(path, ckpt):
    out = [MAGIC, struct.pack("<I", ckpt.version)]
    out.append(struct.pack("<Q", ckpt.iteration))
    out.append(struct.pack("<Q", ckpt.seed))
    _write_string(out, ckpt.config_hash)
    tokens = ckpt.vocab.tokens
    out.append(struct.pack("<I", len(tokens)))
    for tok in tokens:
        _write_string(out, tok)
    _write_tensor_block(out, ckpt.tensors)
    if ckpt.optimizer is None:
        out.append(struct.pack("<B", 0))
    else:
        out.append(struct.pack("<B", 1))
        _write_tensor_block(out, ckpt.optimizer)
    with open(path, "wb") as fh:
        fh.write(b"".join(out))
    return path


class _Reader:
    def __init__(self, data):
        self.data = data
        self.offset = 0

    def take(self, n, what):
        if self.offset + n > len(self.data):
            raise CheckpointFormatError(
                f"truncated file: needed {n} bytes for {what} at offset "
                f"{self.offset}, have {len(self.data) - self.offset}"
            )
        chunk = self.data[self.offset:self.offset + n]
        self.offset += n
        return chunk

    def u8(self, what):
        return struct.unpack("<B", self.take(1, what))[0]

    def u32(self, what):
        return struct.unpack("<I", self.take(4, what))[0]

    def u64(self, what):
        return struct.unpack("<Q", self.take(8, what))[0]

    def string(self, what):
        n = self.u32(f"{what} length")
        try:
            return self.take(n, what).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise CheckpointFormatError(f"bad UTF-8 in {what}: {exc}")

    def tensor_block(self, what):
        count = self.u32(f"{what} count")
        tensors = {}
        for i in range(count):
            name = self.string(f"{what} tensor {i} name")
            rank = self.u32(f"{what} tensor {name!r} rank")
            if rank > 8:
                raise CheckpointFormatError(
                    f"implausible rank {rank} for tensor {name!r} at offset "
                    f"{self.offset - 4}"
                )
            dims = struct.unpack(
                f"<{rank}Q", self.take(8 * rank, f"dims of {name!r}")
            )
            size = 1
            for d in dims:
                size *= d
            raw = self.take(8 * size, f"values of {name!r}")
            tensors[name] = np.frombuffer(raw, dtype="<f8").reshape(dims).copy()
        return tensors


def load_checkpoint(path):
    with open(path, "rb") as fh:
        data = fh.read()
    r = _Reader(data)
    magic = r.take(4, "magic")
    if magic != MAGIC:
        raise CheckpointFormatError(
            f"bad magic {magic!r} at offset 0, expected {MAGIC!r}"
        )
    version = r.u32("version")
    if version != VERSION:
        raise CheckpointFormatError(
            f"unsupported version {version} at offset 4 (supported: {VERSION})"
        )
    iteration = r.u64("iteration")
    seed = r.u64("seed")
    config_hash = r.string("config hash")
    token_count = r.u32("vocabulary count")
    tokens = [r.string(f"vocabulary token {i}") for i in range(token_count)]
    if tuple(tokens[:3]) != Vocabulary.RESERVED:
        raise CheckpointFormatError(
            "vocabulary does not start with the reserved tokens"
        )
    vocab = Vocabulary(tokens[3:])
    tensors = r.tensor_block("parameter")
    flag = r.u8("optimizer flag")
    optimizer = r.tensor_block("optimizer") if flag == 1 else None
    if r.offset != len(data):
        raise CheckpointFormatError(
            f"{len(data) - r.offset} trailing bytes after offset {r.offset}"
        )
    _check_vocab_consistency(tensors, len(vocab))
    return Checkpoint(vocab=vocab, tensors=tensors, iteration=iteration,
                      seed=seed, config_hash=config_hash, optimizer=optimizer,
                      version=version)


def _check_vocab_consistency(tensors, vocab_size):
    for name, rows in (("src_emb", 0), ("tgt_emb", 0), ("out.W", 0),
                       ("out.b", 0)):
        if name in tensors and tensors[name].shape[rows] != vocab_size:
            raise CheckpointFormatError(
                f"tensor {name!r} has leading dimension "
                f"{tensors[name].shape[rows]} but the vocabulary holds "
                f"{vocab_size} tokens"
            )
