"""Binary model files.

Layout (all integers little-endian u32, all arrays little-endian f64)::

    magic "DABK" | version
    len | config JSON (utf-8, sorted keys)
    input_dim
    count | per parameter: len | name (utf-8) | ndim | shape... | data
    len | codebook blob (see codebook.serialize)
    has_norm | [width | mean | std]

Parameters are written in sorted-name order, so identical models give
identical bytes.  A JSON copy of the config is written next to the file
for people to read; it is never loaded back.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from . import codebook as cbm
from . import diffcore as dc
from .datasets import Normalization
from .model import DabConfig, DabModel, init_model

MAGIC = b"DABK"
VERSION = 1
_U32 = struct.Struct("<I")


class ModelFormatError(ValueError):
    pass


def _u32(n: int) -> bytes:
    return _U32.pack(n)


def _f64(arr) -> bytes:
    return np.ascontiguousarray(arr, dtype="<f8").tobytes()


def to_bytes(model: DabModel) -> bytes:
    cfg = json.dumps(model.config.to_dict(), sort_keys=True).encode()
    out = [MAGIC, _u32(VERSION), _u32(len(cfg)), cfg, _u32(model.input_dim),
           _u32(len(model.params))]
    for name in sorted(model.params):
        data = model.params[name].data
        enc = name.encode()
        out += [_u32(len(enc)), enc, _u32(data.ndim), *(_u32(s) for s in data.shape), _f64(data)]
    blob = cbm.serialize(model.codebook)
    out += [_u32(len(blob)), blob]
    norm = model.normalization
    if norm is None:
        out.append(_u32(0))
    else:
        out += [_u32(1), _u32(norm.mean.size), _f64(norm.mean), _f64(norm.std)]
    return b"".join(out)


class _Reader:
    def __init__(self, blob: bytes):
        self.blob, self.off = blob, 0

    def take(self, n: int) -> bytes:
        if self.off + n > len(self.blob):
            raise ModelFormatError(f"model file truncated at byte {self.off}")
        chunk = self.blob[self.off:self.off + n]
        self.off += n
        return chunk

    def u32(self) -> int:
        return _U32.unpack(self.take(4))[0]

    def f64(self, count: int) -> np.ndarray:
        return np.frombuffer(self.take(8 * count), dtype="<f8").astype(np.float64)


def from_bytes(blob: bytes) -> DabModel:
    r = _Reader(blob)
    if r.take(4) != MAGIC:
        raise ModelFormatError("not a model file (bad magic)")
    version = r.u32()
    if version != VERSION:
        raise ModelFormatError(f"unsupported model file version {version}")
    try:
        cfg_dict = json.loads(r.take(r.u32()).decode())
        config = DabConfig(**cfg_dict)
    except (ValueError, TypeError) as exc:
        raise ModelFormatError(f"bad config section: {exc}") from exc
    errs = config.errors()
    if errs:
        raise ModelFormatError("invalid config in model file: " + "; ".join(errs))
    input_dim = r.u32()
    params = {}
    for _ in range(r.u32()):
        name = r.take(r.u32()).decode()
        shape = tuple(r.u32() for _ in range(r.u32()))
        data = r.f64(int(np.prod(shape, dtype=np.int64))).reshape(shape)
        if not np.all(np.isfinite(data)):
            raise ModelFormatError(f"parameter {name} has non-finite values")
        params[name] = data
    try:
        codebook = cbm.deserialize(r.take(r.u32()))
    except cbm.CodebookFormatError as exc:
        raise ModelFormatError(str(exc)) from exc
    norm = None
    if r.u32():
        width = r.u32()
        mean, std = r.f64(width), r.f64(width)
        if np.any(std <= 0):
            raise ModelFormatError("normalization stddev must be positive")
        norm = Normalization(mean, std)
    if r.off != len(blob):
        raise ModelFormatError(f"{len(blob) - r.off} trailing bytes after model data")

    expected = init_model(input_dim, config, np.random.default_rng(0)).params
    if set(params) != set(expected):
        raise ModelFormatError("parameter names do not match the config")
    for name, value in params.items():
        if value.shape != expected[name].shape:
            raise ModelFormatError(f"parameter {name} has shape {value.shape}, "
                                   f"expected {expected[name].shape}")
    if (codebook.k, codebook.dim) != (config.k, config.latent_dim):
        raise ModelFormatError("codebook shape does not match the config")
    if norm is not None and norm.mean.size != input_dim:
        raise ModelFormatError("normalization width does not match the input width")
    tensors = {k: dc.parameter(v, name=k) for k, v in params.items()}
    return DabModel(config, input_dim, tensors, codebook, norm)


def save(model: DabModel, path) -> Path:
    """Write the model file and its ``.json`` config sidecar."""
    path = Path(path)
    path.write_bytes(to_bytes(model))
    sidecar = path.with_name(path.name + ".json")
    meta = {"config": model.config.to_dict(), "input_dim": model.input_dim,
            "format": {"magic": MAGIC.decode(), "version": VERSION}}
    sidecar.write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    return path


def load(path) -> DabModel:
    path = Path(path)
    try:
        blob = path.read_bytes()
    except OSError as exc:
        raise ModelFormatError(f"cannot read model file {path}: {exc.strerror}") from exc
    return from_bytes(blob)
