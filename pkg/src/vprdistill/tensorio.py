"""Binary tensor container used by feature archives and checkpoints.

File layout (all integers little-endian):

    magic   4 bytes  b"SCVF"
    u32     format version (1)
    u32     layer_count
    u32     C, u32 H, u32 W        shared block shape
    then layer_count blocks, each:
        u32     layer_index
        C*H*W   float32 values, channel-major (C-contiguous (C, H, W))
"""

from __future__ import annotations

import struct

import numpy as np

from .errors import FormatError

MAGIC = b"SCVF"
VERSION = 1

_HEADER = struct.Struct("<4sIIIII")
_LAYER_INDEX = struct.Struct("<I")


def write_tensor_file(path, blocks):
    """Write (layer_index, array) blocks to ``path``.

    All arrays must share one (C, H, W) shape and are stored as float32.
    """
    if not blocks:
        raise ValueError("tensor file needs at least one block")
    shape = tuple(blocks[0][1].shape)
    if len(shape) != 3:
        raise ValueError(f"blocks must be (C, H, W) arrays, got shape {shape}")
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, VERSION, len(blocks), *shape))
        for layer_index, array in blocks:
            if tuple(array.shape) != shape:
                raise ValueError(f"block shape {array.shape} != header shape {shape}")
            fh.write(_LAYER_INDEX.pack(layer_index))
            fh.write(np.ascontiguousarray(array, dtype="<f4").tobytes())


def read_tensor_file(path):
    """Read all blocks; returns ({layer_index: (C, H, W) float32 array}, shape)."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < _HEADER.size:
        raise FormatError(f"{path}: truncated header")
    magic, version, layer_count, c, h, w = _HEADER.unpack_from(raw, 0)
    if magic != MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}")
    if version != VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    block_values = c * h * w
    block_bytes = _LAYER_INDEX.size + 4 * block_values
    expected = _HEADER.size + layer_count * block_bytes
    if len(raw) != expected:
        raise FormatError(f"{path}: expected {expected} bytes, found {len(raw)}")
    blocks = {}
    offset = _HEADER.size
    for _ in range(layer_count):
        (layer_index,) = _LAYER_INDEX.unpack_from(raw, offset)
        offset += _LAYER_INDEX.size
        values = np.frombuffer(raw, dtype="<f4", count=block_values, offset=offset)
        offset += 4 * block_values
        if layer_index in blocks:
            raise FormatError(f"{path}: duplicate layer index {layer_index}")
        blocks[layer_index] = values.reshape(c, h, w).copy()
    return blocks, (c, h, w)
