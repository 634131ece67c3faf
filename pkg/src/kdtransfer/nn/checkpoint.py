"""Binary checkpoint format.

Layout (all integers little-endian ``uint32``)::

    magic      8 bytes  b"KDTCKPT\\0"
    version    uint32
    name       uint32 length + utf-8
    descriptor uint32 length + utf-8 (canonical architecture text)
    arch hash  32 bytes, sha256 of the descriptor
    channels   uint32, then mean[channels], std[channels] as <f4
    params     <f4 values, parameters in declaration order, C order

Nothing follows the last parameter.
"""

from __future__ import annotations

import hashlib
import struct

import numpy as np

from .model import Model

MAGIC = b"KDTCKPT\0"
VERSION = 1


class CheckpointError(ValueError):
    """Malformed or incompatible checkpoint file."""


class ArchitectureMismatch(CheckpointError):
    pass


def _pack_str(text):
    raw = text.encode("utf-8")
    return struct.pack("<I", len(raw)) + raw


def save_checkpoint(model, path):
    parts = [
        MAGIC,
        struct.pack("<I", VERSION),
        _pack_str(model.name),
        _pack_str(model.descriptor),
        bytes.fromhex(model.arch_hash),
        struct.pack("<I", len(model.mean)),
        model.mean.astype("<f4").tobytes(),
        model.std.astype("<f4").tobytes(),
    ]
    for key in model.param_shapes():
        parts.append(np.ascontiguousarray(model.params[key]).astype("<f4").tobytes())
    with open(path, "wb") as fh:
        fh.write(b"".join(parts))


class _Reader:
    def __init__(self, raw):
        self.raw, self.pos = raw, 0

    def take(self, n, what):
        if self.pos + n > len(self.raw):
            raise CheckpointError(f"truncated checkpoint while reading {what} at byte {self.pos}")
        out = self.raw[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self, what):
        return struct.unpack("<I", self.take(4, what))[0]

    def text(self, what):
        return self.take(self.u32(what), what).decode("utf-8")


def load_checkpoint(path, architecture=None):
    """Load a model saved by :func:`save_checkpoint`.

    ``architecture`` (a :class:`Model` or descriptor text) makes the load fail
    with :class:`ArchitectureMismatch` unless the stored hash matches it.
    """
    with open(path, "rb") as fh:
        raw = fh.read()
    r = _Reader(raw)
    if r.take(len(MAGIC), "magic") != MAGIC:
        raise CheckpointError(f"{path}: bad magic bytes, not a checkpoint")
    version = r.u32("version")
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    name = r.text("name")
    descriptor = r.text("descriptor")
    stored_hash = r.take(32, "architecture hash").hex()
    if hashlib.sha256(descriptor.encode()).hexdigest() != stored_hash:
        raise CheckpointError(f"{path}: architecture hash does not match its descriptor")
    if architecture is not None:
        expected = architecture.descriptor if isinstance(architecture, Model) else architecture
        expected_hash = hashlib.sha256(expected.encode()).hexdigest()
        if expected_hash != stored_hash:
            raise ArchitectureMismatch(
                f"{path}: architecture hash {stored_hash[:12]} != expected {expected_hash[:12]}"
            )
    channels = r.u32("channels")
    mean = np.frombuffer(r.take(4 * channels, "mean"), "<f4")
    std = np.frombuffer(r.take(4 * channels, "std"), "<f4")
    model = Model.from_descriptor(name, descriptor, mean=mean, std=std)
    state = {}
    for key, shape in model.param_shapes().items():
        n = int(np.prod(shape))
        state[key] = np.frombuffer(r.take(4 * n, key), "<f4").reshape(shape).astype(np.float32)
    if r.pos != len(raw):
        raise CheckpointError(f"{path}: {len(raw) - r.pos} trailing bytes after parameters")
    model.params = state
    return model
