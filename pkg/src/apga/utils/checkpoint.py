"""
Binary tensor checkpoint codec.

Layout (little-endian):
    magic        4 bytes  b"APGA"
    version      u32
    records until EOF:
        name_len u32, name (utf-8)
        rank     u32, dims u64 * rank
        tag      u8   (0 fp32, 1 fp64, 2 int64, 3 uint8)
        data     raw bytes, C order
"""

import logging
import os
import struct
from pathlib import Path
from typing import Dict, Mapping, Union

import numpy as np
import torch

MAGIC = b"APGA"
FORMAT_VERSION = 1

_TAG_TO_DTYPE = {0: np.dtype("<f4"), 1: np.dtype("<f8"), 2: np.dtype("<i8"), 3: np.dtype("u1")}
_KIND_TO_TAG = {np.dtype("float32"): 0, np.dtype("float64"): 1, np.dtype("int64"): 2, np.dtype("uint8"): 3}

ArrayLike = Union[torch.Tensor, np.ndarray]


def _as_array(value: ArrayLike) -> np.ndarray:
    if isinstance(value, torch.Tensor):
        value = value.detach().cpu().numpy()
    arr = np.asarray(value)
    if arr.dtype not in _KIND_TO_TAG:
        raise TypeError(f"cannot checkpoint dtype {arr.dtype}")
    return arr


def save_tensors(path: Union[str, Path], tensors: Mapping[str, ArrayLike]) -> Path:
    """Write `tensors` to `path` atomically (temp file + rename)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp_path = path.with_suffix(path.suffix + ".tmp")
    with open(tmp_path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", FORMAT_VERSION))
        for name, value in tensors.items():
            arr = _as_array(value)
            tag = _KIND_TO_TAG[arr.dtype]
            name_bytes = name.encode("utf8")
            f.write(struct.pack("<I", len(name_bytes)))
            f.write(name_bytes)
            f.write(struct.pack("<I", arr.ndim))
            f.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
            f.write(struct.pack("<B", tag))
            f.write(np.ascontiguousarray(arr, dtype=_TAG_TO_DTYPE[tag]).tobytes())
        f.flush()
        os.fsync(f.fileno())
    tmp_path.replace(path)
    return path


def load_tensors(path: Union[str, Path]) -> Dict[str, np.ndarray]:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"Checkpoint not found: {path}")
    data = path.read_bytes()
    if data[:4] != MAGIC:
        raise ValueError(f"{path} is not an APGA checkpoint")
    (version,) = struct.unpack_from("<I", data, 4)
    if version != FORMAT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")

    out = {}
    pos = 8
    try:
        while pos < len(data):
            (name_len,) = struct.unpack_from("<I", data, pos)
            pos += 4
            name = data[pos : pos + name_len].decode("utf8")
            pos += name_len
            (rank,) = struct.unpack_from("<I", data, pos)
            pos += 4
            dims = struct.unpack_from(f"<{rank}Q", data, pos)
            pos += 8 * rank
            (tag,) = struct.unpack_from("<B", data, pos)
            pos += 1
            dtype = _TAG_TO_DTYPE[tag]
            nbytes = int(np.prod(dims, dtype=np.int64)) * dtype.itemsize
            if pos + nbytes > len(data):
                raise ValueError("truncated record")
            out[name] = np.frombuffer(data, dtype=dtype, count=nbytes // dtype.itemsize, offset=pos).reshape(dims).copy()
            pos += nbytes
    except (struct.error, KeyError, ValueError) as e:
        raise ValueError(f"{path}: corrupt checkpoint ({e})") from e
    logging.getLogger(__name__).debug("loaded %d tensors from %s", len(out), path)
    return out


def module_tensors(module: torch.nn.Module, prefix: str) -> Dict[str, torch.Tensor]:
    return {f"{prefix}.{k}": v for k, v in module.state_dict().items()}


def load_module_tensors(module: torch.nn.Module, tensors: Mapping[str, np.ndarray], prefix: str) -> None:
    """Load the `prefix.*` records into `module`; missing or extra keys are an error."""
    sd = {
        k[len(prefix) + 1 :]: torch.from_numpy(np.array(v))
        for k, v in tensors.items()
        if k.startswith(prefix + ".")
    }
    missing_keys, unexpected_keys = module.load_state_dict(sd, strict=False)
    if missing_keys:
        logging.error(missing_keys)
        raise RuntimeError(f"checkpoint is missing {prefix} tensors: {missing_keys}")
    if unexpected_keys:
        logging.error(unexpected_keys)
        raise RuntimeError(f"checkpoint has unexpected {prefix} tensors: {unexpected_keys}")
