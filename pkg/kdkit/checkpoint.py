"""
KDCKPT01 checkpoint files.

Layout (little-endian): magic "KDCKPT01", u32 entry count, then per entry:
u16 name length, UTF-8 name, u8 dtype (0=f32, 1=f64), u8 rank,
u32 extents[rank], raw row-major values.

``save_model`` also writes a ``<path>.json`` sidecar with the ModelConfig so
a checkpoint can be restored without the experiment config.
"""
import json
import os
import struct
from typing import Dict, Mapping, Union

import numpy as np

from kdkit.errors import CheckpointError
from kdkit.model import ModelConfig, TransformerModel

MAGIC = b"KDCKPT01"
_DTYPE_CODES = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}
_CODE_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}

PathLike = Union[str, "os.PathLike[str]"]


def write_checkpoint(path: PathLike, tensors: Mapping[str, np.ndarray]) -> None:
    """Write named arrays in insertion order."""
    chunks = [MAGIC, struct.pack("<I", len(tensors))]
    for name, values in tensors.items():
        values = np.asarray(values)
        code = _DTYPE_CODES.get(values.dtype)
        if code is None:
            raise CheckpointError(f"{name}: unsupported dtype {values.dtype} (float32/float64 only)")
        encoded = name.encode("utf-8")
        if len(encoded) > 0xFFFF:
            raise CheckpointError(f"parameter name too long: {name[:40]}...")
        chunks.append(struct.pack("<H", len(encoded)))
        chunks.append(encoded)
        chunks.append(struct.pack("<BB", code, values.ndim))
        chunks.append(struct.pack(f"<{values.ndim}I", *values.shape))
        chunks.append(np.ascontiguousarray(values, dtype=_CODE_DTYPES[code]).tobytes())
    directory = os.path.dirname(os.fspath(path))
    if directory:
        os.makedirs(directory, exist_ok=True)
    with open(path, "wb") as handle:
        handle.write(b"".join(chunks))


def read_checkpoint(path: PathLike) -> Dict[str, np.ndarray]:
    """Read every entry back as native-order numpy arrays."""
    try:
        with open(path, "rb") as handle:
            blob = handle.read()
    except FileNotFoundError:
        raise CheckpointError(f"checkpoint not found: {path}") from None
    if blob[:8] != MAGIC:
        raise CheckpointError(f"{path}: bad magic {blob[:8]!r}, expected {MAGIC!r}")
    offset = 8
    tensors: Dict[str, np.ndarray] = {}
    try:
        (count,) = struct.unpack_from("<I", blob, offset)
        offset += 4
        for _ in range(count):
            (name_len,) = struct.unpack_from("<H", blob, offset)
            offset += 2
            name = blob[offset:offset + name_len].decode("utf-8")
            offset += name_len
            code, rank = struct.unpack_from("<BB", blob, offset)
            offset += 2
            shape = struct.unpack_from(f"<{rank}I", blob, offset)
            offset += 4 * rank
            dtype = _CODE_DTYPES[code]
            nbytes = int(np.prod(shape)) * dtype.itemsize
            if offset + nbytes > len(blob):
                raise CheckpointError(f"{path}: truncated data for '{name}'")
            values = np.frombuffer(blob, dtype=dtype, count=int(np.prod(shape)), offset=offset)
            tensors[name] = values.reshape(shape).astype(dtype.newbyteorder("="))
            offset += nbytes
    except (struct.error, KeyError, UnicodeDecodeError) as exc:
        raise CheckpointError(f"{path}: malformed checkpoint ({exc})") from None
    if offset != len(blob):
        raise CheckpointError(f"{path}: {len(blob) - offset} trailing bytes")
    return tensors


def config_path(path: PathLike) -> str:
    return os.fspath(path) + ".json"


def save_model(model: TransformerModel, path: PathLike) -> str:
    """Checkpoint plus ModelConfig sidecar; returns the checkpoint path."""
    write_checkpoint(path, model.state_dict())
    with open(config_path(path), "w", encoding="utf-8") as handle:
        json.dump({"config": model.config.to_dict(), "dtype": model.dtype.name}, handle, indent=2)
    return os.fspath(path)


def load_model(path: PathLike) -> TransformerModel:
    try:
        with open(config_path(path), "r", encoding="utf-8") as handle:
            meta = json.load(handle)
    except FileNotFoundError:
        raise CheckpointError(f"model config sidecar not found: {config_path(path)}") from None
    model = TransformerModel(ModelConfig.from_dict(meta["config"]), dtype=meta.get("dtype", "float32"), stddev=0.0)
    model.load_state_dict(read_checkpoint(path))
    return model
