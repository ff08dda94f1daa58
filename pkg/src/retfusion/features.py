"""Binary feature files holding per-layer backbone activations.

Layout (all integers little-endian uint32, floats little-endian
float32, row-major):

    magic   7 bytes  b"RETFEA1"
    modality 1 byte  0 = text, 1 = vision
    layer_count      number of layers L'
    source_dim       feature width shared by all layers
    repeated layer_count times:
        token_count N
        N * source_dim float32 values

Declared sizes must match the byte length exactly; trailing bytes are
rejected.  Values are widened to float64 on read.
"""

from __future__ import annotations

import struct

import numpy as np

from .encoder import LayerStack
from .errors import BadMagicError, NonFiniteError, SizeMismatchError

MAGIC = b"RETFEA1"
_MODALITY_CODE = {"text": 0, "vision": 1}
_MODALITY_NAME = {0: "text", 1: "vision"}


def write_feature_file(path: str, stack: LayerStack) -> None:
    stack.validate()
    parts = [MAGIC, struct.pack("<B", _MODALITY_CODE[stack.modality]),
             struct.pack("<II", len(stack.layers), stack.width)]
    for layer in stack.layers:
        parts.append(struct.pack("<I", layer.shape[0]))
        parts.append(np.ascontiguousarray(layer, dtype="<f4").tobytes())
    with open(path, "wb") as fh:
        fh.write(b"".join(parts))


def read_feature_file(path: str) -> LayerStack:
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[: len(MAGIC)] != MAGIC:
        raise BadMagicError(f"{path}: expected magic {MAGIC!r}")
    offset = len(MAGIC)

    def take(n: int, what: str) -> bytes:
        nonlocal offset
        if offset + n > len(raw):
            raise SizeMismatchError(f"{path}: truncated while reading {what}")
        chunk = raw[offset:offset + n]
        offset += n
        return chunk

    (modality_code,) = struct.unpack("<B", take(1, "modality"))
    if modality_code not in _MODALITY_NAME:
        raise SizeMismatchError(f"{path}: unknown modality code {modality_code}")
    layer_count, source_dim = struct.unpack("<II", take(8, "header"))
    if layer_count == 0 or source_dim == 0:
        raise SizeMismatchError(f"{path}: empty layer count or zero width")

    layers = []
    for i in range(layer_count):
        (tokens,) = struct.unpack("<I", take(4, f"layer {i} token count"))
        data = take(4 * tokens * source_dim, f"layer {i} values")
        matrix = np.frombuffer(data, dtype="<f4").reshape(tokens, source_dim)
        bad = ~np.isfinite(matrix)
        if bad.any():
            row = int(np.argwhere(bad)[0][0])
            raise NonFiniteError(f"{path}: non-finite value in layer {i}, row {row}")
        layers.append(matrix.astype(np.float64))
    if offset != len(raw):
        raise SizeMismatchError(f"{path}: {len(raw) - offset} trailing bytes")
    return LayerStack(modality=_MODALITY_NAME[modality_code], layers=layers)
