"""Plain-text Netpbm writers: P2 heatmaps, P1 masks, P3 overlays."""

import logging
from pathlib import Path
from typing import Iterable, List, Optional

import numpy as np
import numpy.typing as npt

logger = logging.getLogger(__name__)

MAX_GRAY = 255
# Plain Netpbm lines should not exceed 70 characters.
_GRAY_PER_LINE = 16
_BITS_PER_LINE = 32
_RGB_PER_LINE = 5


def _wrap(tokens: Iterable[str], per_line: int) -> List[str]:
    items = list(tokens)
    return [
        " ".join(items[i:i + per_line])
        for i in range(0, len(items), per_line)
    ]


def normalize_gray(values: npt.ArrayLike) -> npt.NDArray[np.int64]:
    """Min-max scale to 0..255; a constant map becomes all zeros."""
    array = np.asarray(values, dtype=np.float64)
    low, high = float(array.min()), float(array.max())
    if high == low:
        return np.zeros(array.shape, dtype=np.int64)
    scaled = (array - low) / (high - low) * MAX_GRAY
    return np.rint(scaled).astype(np.int64)


def encode_pgm(values: npt.ArrayLike) -> str:
    """P2 text of a 2-D float map."""
    gray = normalize_gray(values)
    if gray.ndim != 2:
        raise ValueError(f"PGM needs a 2-D map, got shape {gray.shape}")
    height, width = gray.shape
    lines = ["P2", f"{width} {height}", str(MAX_GRAY)]
    for row in gray:
        lines.extend(_wrap((str(v) for v in row), _GRAY_PER_LINE))
    return "\n".join(lines) + "\n"


def encode_pbm(mask: npt.ArrayLike) -> str:
    """P1 text of a boolean mask; set pixels are written as 1 (black)."""
    bits = np.asarray(mask, dtype=bool)
    if bits.ndim != 2:
        raise ValueError(f"PBM needs a 2-D mask, got shape {bits.shape}")
    height, width = bits.shape
    lines = ["P1", f"{width} {height}"]
    for row in bits:
        lines.extend(_wrap(("1" if b else "0" for b in row), _BITS_PER_LINE))
    return "\n".join(lines) + "\n"


def encode_ppm(
    image: npt.ArrayLike,
    mask: Optional[npt.ArrayLike] = None,
    tint: float = 0.6,
) -> str:
    """P3 text of an H×W×3 image in [0, 1], masked pixels tinted red."""
    rgb = np.clip(np.asarray(image, dtype=np.float64), 0.0, 1.0)
    if rgb.ndim != 3 or rgb.shape[2] != 3:
        raise ValueError(f"PPM needs an H×W×3 image, got shape {rgb.shape}")
    if mask is not None:
        bits = np.asarray(mask, dtype=bool)
        if bits.shape != rgb.shape[:2]:
            raise ValueError(
                f"Mask shape {bits.shape} does not match image"
                f" {rgb.shape[:2]}"
            )
        red = np.array([1.0, 0.0, 0.0])
        rgb = np.where(bits[..., None], (1 - tint) * rgb + tint * red, rgb)
    levels = np.rint(rgb * MAX_GRAY).astype(np.int64)
    height, width, _ = levels.shape
    lines = ["P3", f"{width} {height}", str(MAX_GRAY)]
    for row in levels:
        pixels = (f"{r} {g} {b}" for r, g, b in row)
        lines.extend(_wrap(pixels, _RGB_PER_LINE))
    return "\n".join(lines) + "\n"


def _write(path: Path, text: str) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="ascii", newline="\n") as f:
        f.write(text)
    logger.debug(f"Wrote {path}")
    return path


def write_pgm(path: Path, values: npt.ArrayLike) -> Path:
    """Write a heatmap as P2."""
    return _write(path, encode_pgm(values))


def write_pbm(path: Path, mask: npt.ArrayLike) -> Path:
    """Write a mask as P1."""
    return _write(path, encode_pbm(mask))


def write_ppm(
    path: Path,
    image: npt.ArrayLike,
    mask: Optional[npt.ArrayLike] = None,
) -> Path:
    """Write an image (with optional mask overlay) as P3."""
    return _write(path, encode_ppm(image, mask))


def read_plain(path: Path) -> npt.NDArray[np.int64]:
    """Parse a P1 or P2 file back into an integer array."""
    with open(path, "r", encoding="ascii") as f:
        tokens = f.read().split()
    magic = tokens[0]
    if magic not in ("P1", "P2"):
        raise ValueError(f"Unsupported Netpbm magic {magic} in {path}")
    width, height = int(tokens[1]), int(tokens[2])
    body = tokens[3:] if magic == "P1" else tokens[4:]
    return np.asarray(body, dtype=np.int64).reshape(height, width)
