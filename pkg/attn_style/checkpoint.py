"""Checkpoint module reads and writes UNetWeights in a small little-endian container.

Layout::

    8 bytes   magic b"ATTNSTYL"
    u32       format version (2)
    u32       length of the header, then the header: UTF-8 JSON
              {"architecture": <UNetConfig options>, "metadata": {...}}
    u32       number of tensor records
    records   u16 name length, UTF-8 name, u8 ndim, ndim × u32 dimensions, raw float32 data

All integers are little-endian. Tensor data is written byte for byte, so save followed by load returns
bit-identical weights.
"""
import io
import json
import struct

import numpy as np

from attn_style.exc import CheckpointError, ConfigurationError, RangeError, ShapeError
from attn_style.model import UNetConfig, UNetWeights
from attn_style.noise import build_noise_schedule
from attn_style.tensor import Tensor


MAGIC = b"ATTNSTYL"
VERSION = 2


def dump_weights(weights, metadata=None):
    """Serialize weights to bytes."""
    buffer = io.BytesIO()
    buffer.write(MAGIC)
    buffer.write(struct.pack("<I", VERSION))
    header = json.dumps(
        {"architecture": weights.config.as_dict(), "metadata": metadata or {}}, sort_keys=True
    ).encode("utf-8")
    buffer.write(struct.pack("<I", len(header)))
    buffer.write(header)
    buffer.write(struct.pack("<I", len(weights.parameters)))
    for name, value in weights.parameters.items():
        encoded = name.encode("utf-8")
        buffer.write(struct.pack("<H", len(encoded)))
        buffer.write(encoded)
        buffer.write(struct.pack("<B", value.ndim))
        buffer.write(struct.pack("<%dI" % value.ndim, *value.shape))
        buffer.write(value.numpy().astype("<f4").tobytes())
    return buffer.getvalue()


class _Reader(object):
    def __init__(self, payload):
        self.payload = payload
        self.offset = 0

    def take(self, size):
        if self.offset + size > len(self.payload):
            raise CheckpointError("Checkpoint is truncated at byte %d" % self.offset)
        chunk = self.payload[self.offset : self.offset + size]
        self.offset += size
        return chunk

    def unpack(self, fmt):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def load_weights(payload):
    """Deserialize bytes written by `dump_weights`.

    :returns: (UNetWeights, metadata dict)
    :raises CheckpointError: on a bad magic string, unknown version or truncated data
    """
    reader = _Reader(payload)
    if reader.take(len(MAGIC)) != MAGIC:
        raise CheckpointError("Not an attn-style checkpoint")
    (version,) = reader.unpack("<I")
    if version != VERSION:
        raise CheckpointError("Unsupported checkpoint version %d" % version)
    (header_size,) = reader.unpack("<I")
    try:
        header = json.loads(reader.take(header_size).decode("utf-8"))
        config = UNetConfig(header["architecture"])
    except (ValueError, KeyError, ConfigurationError) as exc:
        raise CheckpointError("Corrupt checkpoint header: %s" % exc)
    (count,) = reader.unpack("<I")
    parameters = {}
    for _ in range(count):
        (name_size,) = reader.unpack("<H")
        name = reader.take(name_size).decode("utf-8")
        (ndim,) = reader.unpack("<B")
        shape = reader.unpack("<%dI" % ndim)
        size = int(np.prod(shape)) if shape else 1
        data = np.frombuffer(reader.take(4 * size), dtype="<f4").astype(np.float32).reshape(shape)
        parameters[name] = Tensor(data)
    if reader.offset != len(payload):
        raise CheckpointError("%d trailing bytes after the last record" % (len(payload) - reader.offset))
    try:
        weights = UNetWeights(config, parameters)
    except (ConfigurationError, ShapeError) as exc:
        raise CheckpointError("Checkpoint does not match its architecture: %s" % exc)
    return weights, header.get("metadata", {})


def save_checkpoint(weights, path, metadata=None):
    with open(path, "wb") as handle:
        handle.write(dump_weights(weights, metadata))


def load_checkpoint(path):
    """Read a checkpoint file.

    :returns: (UNetWeights, metadata dict)
    """
    with open(path, "rb") as handle:
        return load_weights(handle.read())


def load_model(path):
    """Read a checkpoint together with the noise schedule it was trained with.

    Checkpoints without a recorded schedule get the default linear one over the model's T_train.

    :returns: (UNetWeights, NoiseSchedule, metadata dict)
    """
    weights, metadata = load_checkpoint(path)
    options = dict(metadata.get("noise") or {})
    options.setdefault("T_train", weights.config.T_train)
    if options["T_train"] != weights.config.T_train:
        raise CheckpointError(
            "Noise schedule has %d steps but the model accepts %d"
            % (options["T_train"], weights.config.T_train)
        )
    try:
        noise = build_noise_schedule(**options)
    except (TypeError, RangeError) as exc:
        raise CheckpointError("Corrupt noise schedule in checkpoint: %s" % exc)
    return weights, noise, metadata
