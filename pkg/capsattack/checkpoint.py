"""
Self-describing binary checkpoints.

Layout, all integers little-endian:

    b"CAPS" | u32 version | u32 n | n bytes of JSON model description |
    u32 tensor count | per tensor:
        u16 name length | name (utf-8) | u8 dtype tag | u8 rank | rank * u32 dims | payload

Payloads are little-endian float32 (dtype tag 0). Double-precision models are
rounded to single precision on save and load back in single precision.
"""
import json
import struct
from collections import OrderedDict
from typing import Tuple

import numpy as np

from capsattack.errors import FormatError, IncompatibilityError
from capsattack.models import Model, model_from_description

__all__ = (
    "save",
    "load",
    "load_into",
    "read_checkpoint",
    "save_checkpoint",
    "load_checkpoint",
    "MAGIC",
    "VERSION",
)

MAGIC = b"CAPS"
VERSION = 1

FLOAT32_TAG = 0
PAYLOAD_DTYPE = np.dtype("<f4")


def save(model: Model) -> bytes:
    description = json.dumps(model.describe(), sort_keys=True).encode("utf-8")
    state = model.state_dict()

    chunks = [MAGIC, struct.pack("<II", VERSION, len(description)), description, struct.pack("<I", len(state))]
    for name, array in state.items():
        encoded = name.encode("utf-8")
        chunks.append(struct.pack("<H", len(encoded)) + encoded)
        chunks.append(struct.pack("<BB", FLOAT32_TAG, array.ndim) + struct.pack(f"<{array.ndim}I", *array.shape))
        chunks.append(np.ascontiguousarray(array, dtype=PAYLOAD_DTYPE).tobytes())
    return b"".join(chunks)


class _Reader:
    def __init__(self, data: bytes) -> None:
        self.data = data
        self.offset = 0

    def take(self, size: int) -> bytes:
        if self.offset + size > len(self.data):
            raise FormatError("checkpoint is truncated")
        chunk = self.data[self.offset : self.offset + size]
        self.offset += size
        return chunk

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def read_checkpoint(data: bytes) -> Tuple[dict, "OrderedDict[str, np.ndarray]"]:
    """Parse a checkpoint into its model description and named tensors."""
    reader = _Reader(data)
    if reader.take(4) != MAGIC:
        raise FormatError("not a capsattack checkpoint (bad magic)")
    version, length = reader.unpack("<II")
    if version != VERSION:
        raise FormatError(f"unsupported checkpoint version {version}")
    try:
        description = json.loads(reader.take(length).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise FormatError(f"corrupted model description: {e}") from None

    (count,) = reader.unpack("<I")
    tensors: "OrderedDict[str, np.ndarray]" = OrderedDict()
    for _ in range(count):
        (name_length,) = reader.unpack("<H")
        name = reader.take(name_length).decode("utf-8", errors="replace")
        tag, rank = reader.unpack("<BB")
        if tag != FLOAT32_TAG:
            raise FormatError(f"tensor {name} has unknown dtype tag {tag}")
        dims = reader.unpack(f"<{rank}I")
        size = int(np.prod(dims, dtype=np.int64)) * PAYLOAD_DTYPE.itemsize
        tensors[name] = np.frombuffer(reader.take(size), dtype=PAYLOAD_DTYPE).reshape(dims).astype(np.float32)
    if reader.offset != len(data):
        raise FormatError("trailing bytes after the last tensor")
    return description, tensors


def load_into(model: Model, data: bytes) -> Model:
    """
    Load the tensors of `data` into an existing model.

    Raises:
        IncompatibilityError: when the model kind differs, tensors are missing or shapes disagree.
    """
    description, tensors = read_checkpoint(data)
    if description.get("kind") != model.kind.value:
        raise IncompatibilityError(f"checkpoint holds a {description.get('kind')} model, not {model.kind.value}")
    model.load_state_dict(tensors)
    return model


def load(data: bytes) -> Model:
    """Rebuild the model a checkpoint describes and load its tensors."""
    description, tensors = read_checkpoint(data)
    model = model_from_description(description)
    model.load_state_dict(tensors)
    return model


def save_checkpoint(model: Model, path: str) -> None:
    with open(path, "wb") as f:
        f.write(save(model))


def load_checkpoint(path: str) -> Model:
    with open(path, "rb") as f:
        return load(f.read())
