"""Flat binary parameter checkpoints.

Layout (all integers unsigned little-endian, all reals little-endian float64)::

    magic                8 bytes  b"FDCKPT01"
    n_layers             u32
    classifier_boundary  u32
    input_ndim           u32
    input_shape          u32 * input_ndim
    per layer:
        kind             u8   index into LAYER_KINDS
        bias             u8   0 | 1
        in_features      u32
        out_features     u32
        in_channels      u32
        out_channels     u32
        kernel           u32
        n_arrays         u32
        per array (sorted by name):
            name_len     u16
            name         utf-8 bytes
            ndim         u32
            dims         u32 * ndim
            values       f64 * prod(dims), row-major

Parameters stored as float32 are widened to float64 on write; ``load``
returns float64 unless a dtype is requested.
"""

from __future__ import annotations

import io
import struct
from pathlib import Path

import numpy as np

from .model import LAYER_KINDS, LayerSpec, ModelParams

MAGIC = b"FDCKPT01"


class CheckpointError(ValueError):
    pass


def dumps(model: ModelParams) -> bytes:
    buf = io.BytesIO()
    buf.write(MAGIC)
    shape = model.input_shape
    buf.write(struct.pack(f"<III{len(shape)}I", len(model.layers), model.classifier_boundary, len(shape), *shape))
    for spec, params in zip(model.layers, model.params):
        buf.write(
            struct.pack(
                "<BBIIIIII",
                LAYER_KINDS.index(spec.kind),
                int(spec.bias),
                spec.in_features,
                spec.out_features,
                spec.in_channels,
                spec.out_channels,
                spec.kernel,
                len(params),
            )
        )
        for name in sorted(params):
            arr = np.ascontiguousarray(params[name], dtype="<f8")
            raw = name.encode()
            buf.write(struct.pack(f"<H{len(raw)}sI{arr.ndim}I", len(raw), raw, arr.ndim, *arr.shape))
            buf.write(arr.tobytes())
    return buf.getvalue()


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, fmt: str):
        size = struct.calcsize(fmt)
        if self.pos + size > len(self.data):
            raise CheckpointError(f"truncated checkpoint at byte {self.pos}")
        out = struct.unpack_from(fmt, self.data, self.pos)
        self.pos += size
        return out

    def raw(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise CheckpointError(f"truncated checkpoint at byte {self.pos}")
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out


def loads(data: bytes, dtype=np.float64) -> ModelParams:
    r = _Reader(data)
    if r.raw(len(MAGIC)) != MAGIC:
        raise CheckpointError("bad magic at byte 0")
    n_layers, boundary, ndim = r.take("<III")
    input_shape = r.take(f"<{ndim}I")
    layers, params = [], []
    for _ in range(n_layers):
        kind, bias, fi, fo, ci, co, k, n_arrays = r.take("<BBIIIIII")
        if kind >= len(LAYER_KINDS):
            raise CheckpointError(f"unknown layer kind code {kind} at byte {r.pos - 26}")
        layers.append(LayerSpec(LAYER_KINDS[kind], fi, fo, ci, co, k, bool(bias)))
        p = {}
        for _ in range(n_arrays):
            (name_len,) = r.take("<H")
            name = r.raw(name_len).decode()
            (adim,) = r.take("<I")
            dims = r.take(f"<{adim}I")
            count = int(np.prod(dims)) if adim else 1
            values = np.frombuffer(r.raw(8 * count), dtype="<f8")
            p[name] = values.reshape(dims).astype(dtype)
        params.append(p)
    if r.pos != len(data):
        raise CheckpointError(f"trailing bytes after byte {r.pos}")
    return ModelParams(layers, params, boundary, input_shape)


def save(model: ModelParams, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(dumps(model))
    return path


def load(path, dtype=np.float64) -> ModelParams:
    return loads(Path(path).read_bytes(), dtype)
