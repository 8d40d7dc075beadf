"""
MILCKPT1 checkpoint persistence for MilModel.

Layout (little-endian): magic "MILCKPT1", u16 version, u32 input_dim,
u32 n_classes, u32 attention_dim, u32 n_hidden, u32 widths[n_hidden],
u8 activation code, f32 dropout, u32-length-prefixed metadata JSON,
f32 weights in canonical parameter order, u32 CRC32.
"""

import json
import logging
from pathlib import Path
from typing import Union

import numpy as np

from binfmt import RecordReader, RecordWriter
from errors import FormatError
from mil_model import ACTIVATIONS, MilModel, parameter_shapes
from storage import write_atomic

logger = logging.getLogger(__name__)

MAGIC = b"MILCKPT1"
VERSION = 1


def encode_checkpoint(model: MilModel) -> bytes:
    writer = RecordWriter().raw(MAGIC).pack("H", VERSION)
    writer.pack("IIII", model.input_dim, model.n_classes, model.attention_dim, len(model.hidden))
    for width in model.hidden:
        writer.pack("I", width)
    writer.pack("B", ACTIVATIONS.index(model.activation)).pack("f", model.dropout)
    writer.text(json.dumps(model.metadata, sort_keys=True))
    for name in model.param_names():
        writer.array(model.params[name], "f4")
    return writer.getvalue()


def decode_checkpoint(data: bytes, name: str = "checkpoint") -> MilModel:
    """Parse MILCKPT1 bytes; weights are widened from f32 to f64."""
    reader = RecordReader(data, name)
    reader.magic(MAGIC)
    version_offset = reader.offset
    (version,) = reader.unpack("H", "version")
    if version != VERSION:
        raise FormatError(f"{name}: unsupported version {version}", version_offset)
    input_dim, n_classes, attention_dim, n_hidden = reader.unpack("IIII", "dimensions")
    hidden = tuple(reader.unpack("I", "hidden width")[0] for _ in range(n_hidden))
    activation_offset = reader.offset
    (activation_code,) = reader.unpack("B", "activation")
    if activation_code >= len(ACTIVATIONS):
        raise FormatError(f"{name}: unknown activation code {activation_code}", activation_offset)
    (dropout,) = reader.unpack("f", "dropout")
    metadata_offset = reader.offset
    try:
        metadata = json.loads(reader.text("metadata"))
    except json.JSONDecodeError:
        raise FormatError(f"{name}: metadata is not valid JSON", metadata_offset)

    params = {}
    for param, shape in parameter_shapes(input_dim, n_classes, hidden, attention_dim).items():
        params[param] = reader.array("f4", shape, f"parameter {param}").astype(np.float64)
    reader.finish()
    return MilModel(input_dim=input_dim, n_classes=n_classes, hidden=hidden, attention_dim=attention_dim,
                    params=params, dropout=float(dropout), activation=ACTIVATIONS[activation_code],
                    metadata=metadata)


def save_checkpoint(model: MilModel, path: Union[str, Path]):
    data = encode_checkpoint(model)
    write_atomic(path, data)
    logger.info(f"Checkpoint saved: {path} ({len(data)} bytes)")


def load_checkpoint(path: Union[str, Path]) -> MilModel:
    data = Path(path).read_bytes()
    model = decode_checkpoint(data, name=str(path))
    logger.info(f"Checkpoint loaded: {path} (d={model.input_dim}, hidden={model.hidden})")
    return model
