"""Localization space, MaxImage score and saliency read-outs."""

import logging
import math
from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np
import numpy.typing as npt

from . import tensor as T
from .encoders import FeatureGrid, TokenMatrix
from .errors import (
    ConfigurationError,
    SizeError,
    SpanError,
    TokenIndexError,
)
from .tensor import Tensor

logger = logging.getLogger(__name__)

Map = npt.NDArray[np.float64]
Provenance = Tuple[Optional[str], Optional[str]]


@dataclass
class LocalizationSpace:
    """m[r, c, d] = <a_{r,c}, s_d> for every region and caption row."""

    values: Tensor
    valid_mask: npt.NDArray[np.float64]
    provenance: Provenance = (None, None)

    @property
    def n_valid(self) -> int:
        """Number of valid caption rows."""
        return int(self.valid_mask.sum())

    @property
    def grid_shape(self) -> Tuple[int, int]:
        """(R_rows, C_cols)."""
        rows, cols, _ = self.values.shape
        return rows, cols


@dataclass
class SaliencyMap:
    """One attention map on the feature grid, optionally at pixel scale."""

    grid: Map
    label: str
    upsampled: Optional[Map] = None

    def argmax(self) -> Tuple[int, int]:
        """First (row-major) maximum of the finest available map."""
        values = self.grid if self.upsampled is None else self.upsampled
        row, col = np.unravel_index(int(np.argmax(values)), values.shape)
        return int(row), int(col)


@dataclass
class SegmentationMask:
    """Pixels whose upsampled saliency reaches the threshold."""

    mask: npt.NDArray[np.bool_]
    threshold: float
    quantile: float

    @property
    def cardinality(self) -> int:
        """Number of set pixels."""
        return int(self.mask.sum())


def build_localization_space(
    grid: FeatureGrid,
    toks: TokenMatrix,
    provenance: Provenance = (None, None),
) -> LocalizationSpace:
    """Dot every region vector with every caption row."""
    if grid.embed_dim != toks.embed_dim:
        raise ConfigurationError(
            f"Image branch emits L={grid.embed_dim} but caption branch"
            f" emits L={toks.embed_dim}"
        )
    regions = T.reshape(grid.values, (grid.regions, grid.embed_dim))
    products = regions @ T.transpose(toks.values)
    values = T.reshape(products, (grid.rows, grid.cols, toks.max_len))
    return LocalizationSpace(
        values=values,
        valid_mask=np.asarray(toks.valid_mask.data, dtype=np.float64),
        provenance=provenance,
    )


def max_image_score(space: LocalizationSpace) -> Tensor:
    """Mean over valid caption rows of each row's spatial maximum."""
    maxima = T.max_over_spatial(space.values)
    return T.mean_masked(maxima, space.valid_mask)


def token_saliency(space: LocalizationSpace, d: int) -> SaliencyMap:
    """Detached map of caption row ``d``."""
    if not 0 <= d < space.n_valid:
        raise TokenIndexError(
            f"Token index {d} outside the {space.n_valid} valid tokens"
        )
    return SaliencyMap(
        grid=space.values.data[:, :, d].copy(), label=f"token {d}"
    )


def span_saliency_word_mode(
    space: LocalizationSpace, span: Tuple[int, int]
) -> SaliencyMap:
    """Cellwise mean of the maps of rows ``start`` to ``end - 1``."""
    start, end = int(span[0]), int(span[1])
    if end <= start:
        raise SpanError(f"Span [{start}, {end}) is empty")
    if start < 0 or end > space.n_valid:
        raise TokenIndexError(
            f"Span [{start}, {end}) outside the {space.n_valid} valid tokens"
        )
    slices = space.values.data[:, :, start:end]
    return SaliencyMap(grid=slices.mean(axis=2), label=f"span {start}:{end}")


def activation_saliency(grid: FeatureGrid) -> SaliencyMap:
    """Caption-agnostic map: channel mean of the image features."""
    return SaliencyMap(grid=grid.values.data.mean(axis=2), label="activation")


def _lerp_axis(values: Map, size: int, axis: int) -> Map:
    cells = values.shape[axis]
    coords = (np.arange(size) + 0.5) * cells / size - 0.5
    coords = np.clip(coords, 0.0, cells - 1)
    low = np.floor(coords).astype(np.int64)
    high = np.minimum(low + 1, cells - 1)
    weight = coords - low
    lower = np.take(values, low, axis=axis)
    upper = np.take(values, high, axis=axis)
    shape = [1, 1]
    shape[axis] = size
    return lower + weight.reshape(shape) * (upper - lower)


def upsample_map(map: SaliencyMap, height: int, width: int) -> SaliencyMap:
    """Bilinear resize; cell centres sit at their pixel-footprint centres.

    Cell (r, c) covers pixels [r·H/R, (r+1)·H/R) × [c·W/C, (c+1)·W/C).
    Pixels between the outermost cell centre and the border take the
    border cell's value.
    """
    rows, cols = map.grid.shape
    if height < rows or width < cols:
        raise SizeError(
            f"Cannot upsample a {rows}×{cols} map to {height}×{width}"
        )
    resized = _lerp_axis(_lerp_axis(map.grid, width, 1), height, 0)
    return SaliencyMap(grid=map.grid, label=map.label, upsampled=resized)


def threshold_mask(map: SaliencyMap, quantile: float) -> SegmentationMask:
    """Keep the top ceil((1 - quantile)·H·W) pixels of the map.

    Equal values are ranked in row-major order. A constant map gives an
    all-ones mask.
    """
    if not 0.0 < quantile < 1.0:
        raise ConfigurationError(
            f"Mask quantile must lie in (0, 1), got {quantile}"
        )
    values = map.upsampled if map.upsampled is not None else map.grid
    flat = values.reshape(-1)
    if float(flat.max()) == float(flat.min()):
        return SegmentationMask(
            mask=np.ones(values.shape, dtype=bool),
            threshold=float(flat[0]),
            quantile=quantile,
        )
    keep = max(1, math.ceil(round((1.0 - quantile) * flat.size, 9)))
    order = np.argsort(-flat, kind="stable")[:keep]
    selected = np.zeros(flat.size, dtype=bool)
    selected[order] = True
    return SegmentationMask(
        mask=selected.reshape(values.shape),
        threshold=float(flat[order[-1]]),
        quantile=quantile,
    )
