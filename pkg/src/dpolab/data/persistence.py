"""DPOW weight files.

Layout, all integers little-endian uint32::

    b"DPOW" | version | payload | crc32(payload)

    payload = len | arch_id utf-8
            | len | metadata JSON utf-8
            | layer count
            | per layer: len | name utf-8 | ndim | dims... | float64 LE data
"""

import json
import struct
import zlib

import numpy as np

from dpolab.core.network import ARCHITECTURES, TrainedModel, layer_shapes
from dpolab.errors import ChecksumError, ConfigError, FormatError, UnsupportedVersionError

MAGIC = b"DPOW"
VERSION = 1


def _u32(value):
    return struct.pack("<I", value)


def _blob(text):
    data = text.encode("utf-8")
    return _u32(len(data)) + data


def encode_model(model):
    parts = [_blob(model.arch_id), _blob(json.dumps(model.metadata, sort_keys=True)), _u32(len(model.weights))]
    for name in sorted(model.weights):
        arr = np.ascontiguousarray(model.weights[name], dtype="<f8")
        parts.append(_blob(name))
        parts.append(_u32(arr.ndim) + b"".join(_u32(d) for d in arr.shape))
        parts.append(arr.tobytes())
    payload = b"".join(parts)
    return MAGIC + _u32(VERSION) + payload + _u32(zlib.crc32(payload))


def save_model(model, path):
    with open(path, "wb") as f:
        f.write(encode_model(model))


class _Reader:
    def __init__(self, data, where):
        self.data, self.pos, self.where = data, 0, where

    def take(self, n):
        if self.pos + n > len(self.data):
            raise FormatError(f"{self.where}: truncated payload")
        chunk = self.data[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def u32(self):
        return struct.unpack("<I", self.take(4))[0]

    def text(self):
        try:
            return self.take(self.u32()).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise FormatError(f"{self.where}: invalid utf-8 string") from exc


def decode_model(data, where="<bytes>"):
    if len(data) < 12 or data[:4] != MAGIC:
        raise FormatError(f"{where}: not a DPOW weight file")
    version = struct.unpack("<I", data[4:8])[0]
    if version != VERSION:
        raise UnsupportedVersionError(f"{where}: unsupported DPOW version {version} (this reader handles {VERSION})")
    payload, crc = data[8:-4], struct.unpack("<I", data[-4:])[0]
    if zlib.crc32(payload) != crc:
        raise ChecksumError(f"{where}: CRC-32 mismatch, file is corrupt")
    r = _Reader(payload, where)
    arch_id = r.text()
    if arch_id not in ARCHITECTURES:
        raise FormatError(f"{where}: unknown architecture {arch_id!r}")
    try:
        metadata = json.loads(r.text())
    except json.JSONDecodeError as exc:
        raise FormatError(f"{where}: bad metadata block") from exc
    weights = {}
    for _ in range(r.u32()):
        name = r.text()
        dims = tuple(r.u32() for _ in range(r.u32()))
        count = int(np.prod(dims, dtype=np.int64))
        weights[name] = np.frombuffer(r.take(8 * count), dtype="<f8").astype(np.float64).reshape(dims)
    if r.pos != len(payload):
        raise FormatError(f"{where}: trailing bytes after last layer")
    model = TrainedModel(arch_id, weights, metadata)
    try:
        expected = layer_shapes(arch_id, model.input_shape, model.classes)
    except (KeyError, ConfigError) as exc:
        raise FormatError(f"{where}: metadata does not describe a valid {arch_id}") from exc
    if {k: tuple(v.shape) for k, v in weights.items()} != expected:
        raise FormatError(f"{where}: layer shapes do not match {arch_id}")
    return model


def load_model(path):
    with open(path, "rb") as f:
        return decode_model(f.read(), str(path))
