"""TSRC checkpoint container.

Layout (little-endian): magic "TSRC", u32 version, u32 tensor count, then per tensor
u16 name length, UTF-8 name, u8 rank, u32 dims[rank], float32 data.
"""

import struct
from pathlib import Path
from typing import Dict, Mapping, Union

import numpy as np
from rich.console import Console

from trisr.config import TSRC_MAGIC, TSRC_VERSION
from trisr.exceptions import CheckpointError, TruncatedFile
from trisr.file_utils import atomic_write_bytes, format_file_size, read_bytes
from trisr.networks import ParameterSet

console = Console(stderr=True)

_HEADER = struct.Struct("<4sII")


def encode_tsrc(tensors: Mapping[str, np.ndarray]) -> bytes:
    """Serialize named arrays in sorted-name order as float32."""
    chunks = [_HEADER.pack(TSRC_MAGIC, TSRC_VERSION, len(tensors))]
    for name in sorted(tensors):
        arr = np.ascontiguousarray(tensors[name], dtype="<f4")
        encoded = name.encode("utf-8")
        if len(encoded) > 0xFFFF:
            raise CheckpointError(f"Tensor name too long: {name[:40]}...")
        if arr.ndim > 0xFF:
            raise CheckpointError(f"{name}: rank {arr.ndim} cannot be stored")
        chunks.append(struct.pack("<H", len(encoded)))
        chunks.append(encoded)
        chunks.append(struct.pack(f"<B{arr.ndim}I", arr.ndim, *arr.shape))
        chunks.append(arr.tobytes())
    return b"".join(chunks)


def decode_tsrc(raw: bytes, source: Union[str, Path] = "<bytes>") -> Dict[str, np.ndarray]:
    if len(raw) < _HEADER.size:
        raise TruncatedFile(f"{source}: too short for a TSRC header")
    magic, version, count = _HEADER.unpack_from(raw, 0)
    if magic != TSRC_MAGIC:
        raise CheckpointError(f"{source}: bad magic {magic!r}, expected {TSRC_MAGIC!r}")
    if version != TSRC_VERSION:
        raise CheckpointError(f"{source}: unsupported TSRC version {version}")

    offset = _HEADER.size
    tensors: Dict[str, np.ndarray] = {}
    try:
        for _ in range(count):
            (name_len,) = struct.unpack_from("<H", raw, offset)
            offset += 2
            name = raw[offset:offset + name_len].decode("utf-8")
            if len(name.encode("utf-8")) != name_len:
                raise struct.error("name runs past end of file")
            offset += name_len
            (rank,) = struct.unpack_from("<B", raw, offset)
            offset += 1
            shape = struct.unpack_from(f"<{rank}I", raw, offset)
            offset += 4 * rank
            n = int(np.prod(shape)) if rank else 1
            nbytes = 4 * n
            if offset + nbytes > len(raw):
                raise struct.error("tensor data runs past end of file")
            data = np.frombuffer(raw, dtype="<f4", count=n, offset=offset).reshape(shape)
            offset += nbytes
            if name in tensors:
                raise CheckpointError(f"{source}: duplicate tensor {name!r}")
            tensors[name] = data.astype(np.float32)
    except (struct.error, UnicodeDecodeError) as e:
        raise TruncatedFile(f"{source}: truncated or corrupt TSRC ({e})") from e

    if offset != len(raw):
        raise CheckpointError(f"{source}: {len(raw) - offset} trailing bytes after {count} tensors")
    return tensors


def save_tensors(path: Union[str, Path], tensors: Mapping[str, np.ndarray]) -> Path:
    payload = encode_tsrc(tensors)
    atomic_write_bytes(path, payload)
    console.print(f"[green]Saved {len(tensors)} tensors to {path} ({format_file_size(len(payload))})[/green]")
    return Path(path)


def load_tensors(path: Union[str, Path]) -> Dict[str, np.ndarray]:
    return decode_tsrc(read_bytes(path), path)


def save_parameters(path: Union[str, Path], params: ParameterSet) -> Path:
    return save_tensors(path, params.state_dict())


def load_parameters(path: Union[str, Path], params: ParameterSet) -> ParameterSet:
    """Load a TSRC file into an existing ParameterSet. Names may carry an
    "<owner>/" prefix, as in trainer checkpoints."""
    tensors = load_tensors(path)
    prefix = f"{params.owner.value}/"
    if any(name.startswith(prefix) for name in tensors):
        tensors = {name[len(prefix):]: arr for name, arr in tensors.items() if name.startswith(prefix)}
    params.load_state_dict(tensors)
    return params
