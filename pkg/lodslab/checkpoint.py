import logging
import math
import struct
from pathlib import Path
from typing import Dict, Mapping, Union

import numpy as np

from lodslab.utils import CheckpointError

logger = logging.getLogger(__name__)

# b"LODS" | u32 version | u32 count, then per entry: u32 name length | name |
# u32 rank | u64 extents | u8 dtype tag | raw little-endian values
MAGIC = b"LODS"
VERSION = 1
_DTYPE_TAGS = {np.dtype("<f4"): 1, np.dtype("<f8"): 2}
_TAG_DTYPES = {tag: dtype for dtype, tag in _DTYPE_TAGS.items()}


def encode(tensors: Mapping[str, np.ndarray]) -> bytes:
    out = [MAGIC, struct.pack("<II", VERSION, len(tensors))]
    for name, value in tensors.items():
        arr = np.asarray(value)
        dtype = arr.dtype.newbyteorder("<")
        if dtype not in _DTYPE_TAGS:
            raise CheckpointError(f"Tensor '{name}' has unsupported dtype {arr.dtype}; use float32 or float64")
        raw_name = name.encode("utf-8")
        out.append(struct.pack("<I", len(raw_name)))
        out.append(raw_name)
        out.append(struct.pack("<I", arr.ndim))
        out.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        out.append(struct.pack("<B", _DTYPE_TAGS[dtype]))
        out.append(np.ascontiguousarray(arr, dtype=dtype).tobytes())
    return b"".join(out)


class _Reader:
    def __init__(self, blob: bytes):
        self.blob = blob
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.blob):
            raise CheckpointError(f"Truncated checkpoint while reading {what} at byte {self.pos}")
        chunk = self.blob[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def decode(blob: bytes) -> Dict[str, np.ndarray]:
    reader = _Reader(blob)
    if reader.take(4, "magic") != MAGIC:
        raise CheckpointError("Not a lodslab checkpoint (bad magic bytes)")
    version, count = reader.unpack("<II", "header")
    if version != VERSION:
        raise CheckpointError(f"unsupported version {version} (this build reads version {VERSION})")

    tensors: Dict[str, np.ndarray] = {}
    for i in range(count):
        (name_len,) = reader.unpack("<I", f"entry {i} name length")
        try:
            name = reader.take(name_len, f"entry {i} name").decode("utf-8")
        except UnicodeDecodeError:
            raise CheckpointError(f"Entry {i} name is not valid UTF-8") from None
        (rank,) = reader.unpack("<I", f"'{name}' rank")
        shape = reader.unpack(f"<{rank}Q", f"'{name}' extents")
        (tag,) = reader.unpack("<B", f"'{name}' dtype tag")
        if tag not in _TAG_DTYPES:
            raise CheckpointError(f"'{name}' has unknown dtype tag {tag}")
        dtype = _TAG_DTYPES[tag]
        nbytes = math.prod(shape) * dtype.itemsize
        raw = reader.take(nbytes, f"'{name}' values")
        tensors[name] = np.frombuffer(raw, dtype=dtype).reshape(shape).astype(dtype.newbyteorder("="))
    if reader.pos != len(blob):
        raise CheckpointError(f"{len(blob) - reader.pos} trailing bytes after the last entry")
    return tensors


def save_checkpoint(path: Union[str, Path], tensors: Mapping[str, np.ndarray]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    blob = encode(tensors)
    path.write_bytes(blob)
    logger.info(f"Saved {len(tensors)} tensors ({len(blob)} bytes) to {path}")
    return path


def load_checkpoint(path: Union[str, Path]) -> Dict[str, np.ndarray]:
    path = Path(path)
    try:
        blob = path.read_bytes()
    except OSError as e:
        raise CheckpointError(f"Cannot read checkpoint {path}: {e}") from e
    return decode(blob)
