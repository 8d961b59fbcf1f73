"""Binary checkpoint container for named tensors.

Layout (all integers little-endian)::

    b"MSKS"                      magic
    u16  version                 currently 1
    u32  metadata length, then UTF-8 JSON metadata
    u32  tensor count
    per tensor:
        u16 name length, UTF-8 name
        u8  dtype tag (1 = float32, 2 = float64)
        u8  ndim, then u32 per dimension
        raw little-endian payload, row-major
    u32  CRC32 of every preceding byte
"""

from __future__ import annotations

import json
import os
import struct
import tempfile
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np

from .model import MaskSpecModel, ModelConfig, param_shapes
from .optim import AdamW, OptimizerState
from .tensor import Parameter

MAGIC = b"MSKS"
VERSION = 1
_DTYPES = {1: np.dtype("<f4"), 2: np.dtype("<f8")}
_TAGS = {np.dtype(np.float32): 1, np.dtype(np.float64): 2}
OPTIM_PREFIX = "optim."


class CheckpointError(Exception):
    code = 1

    def __init__(self, message: str, path: str | os.PathLike | None = None):
        self.path = str(path) if path is not None else None
        super().__init__(f"{self.path}: {message}" if path is not None else message)


class BadMagicError(CheckpointError):
    code = 10


class VersionError(CheckpointError):
    code = 11


class CorruptCheckpointError(CheckpointError):
    """CRC mismatch or a truncated/unparseable body."""

    code = 12


class ShapeMismatchError(CheckpointError):
    code = 13


class MissingTensorError(CheckpointError):
    code = 14


@dataclass
class Checkpoint:
    tensors: dict[str, np.ndarray]
    metadata: dict = field(default_factory=dict)

    @property
    def config(self) -> ModelConfig | None:
        c = self.metadata.get("config")
        return ModelConfig.from_dict(c) if c else None

    def model_tensors(self) -> dict[str, np.ndarray]:
        return {n: t for n, t in self.tensors.items() if not n.startswith(OPTIM_PREFIX)}


def encode(tensors: Mapping[str, np.ndarray], metadata: Mapping | None = None) -> bytes:
    meta = json.dumps(dict(metadata or {}), sort_keys=True).encode()
    parts = [MAGIC, struct.pack("<HI", VERSION, len(meta)), meta, struct.pack("<I", len(tensors))]
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        if arr.dtype not in _TAGS:
            raise TypeError(f"tensor {name!r} has unsupported dtype {arr.dtype}")
        raw = name.encode()
        parts.append(struct.pack("<H", len(raw)) + raw)
        parts.append(struct.pack(f"<BB{arr.ndim}I", _TAGS[arr.dtype], arr.ndim, *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype=_DTYPES[_TAGS[arr.dtype]]).tobytes())
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body))


def decode(blob: bytes, path=None) -> Checkpoint:
    if len(blob) < len(MAGIC) or blob[:4] != MAGIC:
        if len(blob) < len(MAGIC) and MAGIC.startswith(blob):
            raise CorruptCheckpointError("file truncated inside the header", path)
        raise BadMagicError("not a checkpoint (bad magic bytes)", path)
    if len(blob) < 6:
        raise CorruptCheckpointError("file truncated inside the header", path)
    (version,) = struct.unpack_from("<H", blob, 4)
    if version != VERSION:
        raise VersionError(f"unsupported format version {version} (expected {VERSION})", path)
    if len(blob) < 10 + 4:
        raise CorruptCheckpointError("file truncated", path)
    body, (crc,) = blob[:-4], struct.unpack("<I", blob[-4:])
    if zlib.crc32(body) != crc:
        raise CorruptCheckpointError("CRC mismatch: file is corrupted or truncated", path)
    try:
        (meta_len,) = struct.unpack_from("<I", body, 6)
        pos = 10
        metadata = json.loads(body[pos : pos + meta_len].decode())
        pos += meta_len
        (count,) = struct.unpack_from("<I", body, pos)
        pos += 4
        tensors = {}
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", body, pos)
            pos += 2
            name = body[pos : pos + nlen].decode()
            pos += nlen
            tag, ndim = struct.unpack_from("<BB", body, pos)
            pos += 2
            shape = struct.unpack_from(f"<{ndim}I", body, pos)
            pos += 4 * ndim
            dtype = _DTYPES[tag]
            nbytes = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
            if pos + nbytes > len(body):
                raise ValueError("payload runs past end of file")
            arr = np.frombuffer(body, dtype=dtype, count=nbytes // dtype.itemsize, offset=pos).reshape(shape)
            tensors[name] = arr.astype(dtype.newbyteorder("="))
            pos += nbytes
        if pos != len(body):
            raise ValueError("trailing bytes after last tensor")
    except (struct.error, ValueError, KeyError, UnicodeDecodeError) as exc:
        raise CorruptCheckpointError(f"malformed body: {exc}", path) from exc
    return Checkpoint(tensors, metadata)


def _atomic_write(path: Path, data: bytes) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save_checkpoint(
    model: MaskSpecModel,
    path: str | os.PathLike,
    optimizer: AdamW | None = None,
    **metadata,
) -> Path:
    """Write every named parameter (and optionally optimizer moments) atomically."""
    path = Path(path)
    tensors: dict[str, np.ndarray] = {n: p.data for n, p in model.params.items()}
    meta = {"config": model.config.to_dict(), **metadata}
    if optimizer is not None:
        for n in model.params:
            tensors[f"{OPTIM_PREFIX}m.{n}"] = optimizer.state.m[n]
            tensors[f"{OPTIM_PREFIX}v.{n}"] = optimizer.state.v[n]
        meta["optimizer_step"] = optimizer.state.step
    try:
        _atomic_write(path, encode(tensors, meta))
    except OSError as exc:
        raise OSError(f"cannot write checkpoint {path}: {exc.strerror or exc}") from exc
    return path


def read_checkpoint(path: str | os.PathLike) -> Checkpoint:
    try:
        blob = Path(path).read_bytes()
    except OSError as exc:
        raise OSError(f"cannot read checkpoint {path}: {exc.strerror or exc}") from exc
    return decode(blob, path)


def load_checkpoint(
    path: str | os.PathLike,
    expected: ModelConfig | None = None,
    require_decoder: bool = False,
) -> tuple[MaskSpecModel, OptimizerState | None]:
    """Rebuild the model stored at ``path``.

    With ``expected`` given, every stored tensor must have the shape that
    config implies; the first offender raises :class:`ShapeMismatchError`.
    Decoder tensors may be absent (the model is then encoder-only) unless
    ``require_decoder`` is set.
    """
    ckpt = read_checkpoint(path)
    stored = ckpt.model_tensors()
    config = expected or ckpt.config
    if config is None:
        raise CorruptCheckpointError("no model config in metadata and none supplied", path)
    has_decoder = any(n.startswith("decoder.") for n in stored)
    if not has_decoder:
        if require_decoder:
            raise MissingTensorError("checkpoint has no decoder tensors", path)
        config = ModelConfig(encoder=config.encoder, decoder=None, patch=config.patch, num_classes=config.num_classes)
    has_head = "head.weight" in stored
    if not has_head and config.num_classes:
        config = ModelConfig(encoder=config.encoder, decoder=config.decoder, patch=config.patch, num_classes=None)
    shapes = param_shapes(config)
    for name, arr in stored.items():
        if name in shapes and tuple(arr.shape) != shapes[name]:
            raise ShapeMismatchError(f"tensor {name!r} has shape {tuple(arr.shape)}, config expects {shapes[name]}", path)
        if name not in shapes:
            raise ShapeMismatchError(f"tensor {name!r} is not part of the expected model", path)
    missing = [n for n in shapes if n not in stored]
    if missing:
        raise MissingTensorError(f"missing tensor {missing[0]!r} ({len(missing)} absent)", path)
    params = {n: Parameter(stored[n], name=n) for n in shapes}
    model = MaskSpecModel(config, params)
    state = None
    if any(n.startswith(OPTIM_PREFIX) for n in ckpt.tensors):
        state = OptimizerState(
            m={n: ckpt.tensors[f"{OPTIM_PREFIX}m.{n}"].copy() for n in shapes if f"{OPTIM_PREFIX}m.{n}" in ckpt.tensors},
            v={n: ckpt.tensors[f"{OPTIM_PREFIX}v.{n}"].copy() for n in shapes if f"{OPTIM_PREFIX}v.{n}" in ckpt.tensors},
            step=int(ckpt.metadata.get("optimizer_step", 0)),
        )
    return model, state
