"""Binary container for named float64 tensors.

Layout (all integers little-endian)::

    b"CLOC"  u16 format version
    repeated until end of file:
        u16 name length, name bytes (UTF-8)
        u8 rank, u32 per dimension
        float64 payload, row-major

Checkpoints and corpus images share this layout.
"""

import logging
import struct
from pathlib import Path
from typing import Dict, Mapping, Tuple, Union

import numpy as np
import numpy.typing as npt

from ..core.errors import CorruptionError, FormatError

logger = logging.getLogger(__name__)

MAGIC = b"CLOC"
FORMAT_VERSION = 1

_HEADER = struct.Struct("<4sH")
_NAME_LEN = struct.Struct("<H")
_RANK = struct.Struct("<B")
_DIM = struct.Struct("<I")


def encode_tensors(tensors: Mapping[str, npt.ArrayLike]) -> bytes:
    """Serialise tensors in mapping order."""
    parts = [_HEADER.pack(MAGIC, FORMAT_VERSION)]
    for name, value in tensors.items():
        array = np.asarray(value, dtype="<f8")
        encoded_name = name.encode("utf-8")
        if len(encoded_name) > 0xFFFF:
            raise ValueError(f"Tensor name too long: {name[:40]}...")
        if array.ndim > 0xFF:
            raise ValueError(f"Tensor {name} has rank {array.ndim}")
        parts.append(_NAME_LEN.pack(len(encoded_name)))
        parts.append(encoded_name)
        parts.append(_RANK.pack(array.ndim))
        parts.extend(_DIM.pack(dim) for dim in array.shape)
        parts.append(np.ascontiguousarray(array).tobytes())
    return b"".join(parts)


def decode_tensors(
    blob: bytes, source: Union[str, Path] = "<memory>"
) -> Dict[str, npt.NDArray[np.float64]]:
    """Parse a container produced by :func:`encode_tensors`."""
    if len(blob) < _HEADER.size:
        raise CorruptionError(source, "shorter than the file header")
    magic, version = _HEADER.unpack_from(blob, 0)
    if magic != MAGIC:
        raise FormatError(f"{source}: bad magic bytes {magic!r}")
    if version != FORMAT_VERSION:
        raise FormatError(
            f"{source}: unsupported format version {version}"
            f" (expected {FORMAT_VERSION})"
        )

    tensors: Dict[str, npt.NDArray[np.float64]] = {}
    offset = _HEADER.size
    while offset < len(blob):
        offset, name = _read_name(blob, offset, source)
        if offset + _RANK.size > len(blob):
            raise CorruptionError(source, f"truncated header of {name}")
        (rank,) = _RANK.unpack_from(blob, offset)
        offset += _RANK.size
        if offset + rank * _DIM.size > len(blob):
            raise CorruptionError(source, f"truncated shape of {name}")
        shape = tuple(
            _DIM.unpack_from(blob, offset + i * _DIM.size)[0]
            for i in range(rank)
        )
        offset += rank * _DIM.size
        nbytes = int(np.prod(shape, dtype=np.int64)) * 8
        if offset + nbytes > len(blob):
            raise CorruptionError(source, f"truncated payload of {name}")
        payload = np.frombuffer(
            blob, dtype="<f8", count=nbytes // 8, offset=offset
        )
        offset += nbytes
        if name in tensors:
            raise CorruptionError(source, f"duplicate tensor {name}")
        tensors[name] = payload.astype(np.float64).reshape(shape)
    return tensors


def _read_name(
    blob: bytes, offset: int, source: Union[str, Path]
) -> Tuple[int, str]:
    if offset + _NAME_LEN.size > len(blob):
        raise CorruptionError(source, "truncated tensor name length")
    (length,) = _NAME_LEN.unpack_from(blob, offset)
    offset += _NAME_LEN.size
    if offset + length > len(blob):
        raise CorruptionError(source, "truncated tensor name")
    try:
        name = blob[offset:offset + length].decode("utf-8")
    except UnicodeDecodeError as exc:
        raise CorruptionError(source, "tensor name is not UTF-8") from exc
    return offset + length, name


def write_tensors(
    path: Path, tensors: Mapping[str, npt.ArrayLike]
) -> None:
    """Write tensors to ``path``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        f.write(encode_tensors(tensors))
    logger.debug(f"Wrote {len(tensors)} tensor(s) to {path}")


def read_tensors(path: Path) -> Dict[str, npt.NDArray[np.float64]]:
    """Read every tensor stored at ``path``."""
    path = Path(path)
    with open(path, "rb") as f:
        blob = f.read()
    return decode_tensors(blob, source=path)
