"""Batch construction, score matrices and the two ranking losses.

A batch of B distinct images with one caption each yields a B×B score
matrix whose diagonal holds the positive pairs. Every off-diagonal entry is
an impostor, so no extra negative pairs are materialised.
"""

import logging
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np
import numpy.typing as npt

from . import tensor as T
from .coloc import build_localization_space, max_image_score
from .corpus import Corpus, CorpusRecord, GroundedCaption
from .encoders import (
    ColocModel,
    FeatureGrid,
    ParseMode,
    TokenMatrix,
    encode_image,
    encode_tokens,
)
from .errors import (
    BatchSizeError,
    ConfigurationError,
    CorpusSizeError,
    ShapeError,
)
from .tensor import Tensor

logger = logging.getLogger(__name__)

MINING_STRATEGIES = ("hardest", "random")


@dataclass
class Batch:
    """B images with one positive caption each; image ids are distinct."""

    images: List[npt.NDArray[np.float64]]
    image_ids: List[str]
    captions: List[GroundedCaption]

    def __post_init__(self) -> None:
        if len(set(self.image_ids)) != len(self.image_ids):
            raise ConfigurationError("Batch images must be distinct")
        for image_id, caption in zip(self.image_ids, self.captions):
            if caption.image_id != image_id:
                raise ConfigurationError(
                    f"Caption {caption.caption_id} does not describe"
                    f" image {image_id}"
                )

    def __len__(self) -> int:
        return len(self.image_ids)


@dataclass
class ScoreMatrix:
    """values[i, j] = S(I_i, T_j)."""

    values: Tensor
    image_ids: List[str]
    caption_ids: List[str]

    @property
    def size(self) -> int:
        """B."""
        return int(self.values.shape[0])


@dataclass
class TripletConfig:
    """Margin and impostor selection of the triplet loss."""

    margin: float = 0.2
    mining: str = "hardest"

    def __post_init__(self) -> None:
        if self.margin < 0:
            raise ConfigurationError(
                f"Triplet margin must be >= 0, got {self.margin}"
            )
        if self.mining not in MINING_STRATEGIES:
            raise ConfigurationError(
                f"Unknown mining strategy: {self.mining}."
                f" Supported: {MINING_STRATEGIES}"
            )


def _assemble(
    records: Sequence[CorpusRecord], rng: np.random.Generator
) -> Batch:
    captions = [
        record.captions[int(rng.integers(len(record.captions)))]
        for record in records
    ]
    return Batch(
        images=[record.scene.image for record in records],
        image_ids=[record.image_id for record in records],
        captions=captions,
    )


def build_batch(
    corpus: Corpus, batch_size: int, rng: np.random.Generator
) -> Batch:
    """Draw B distinct images and one uniformly chosen caption for each."""
    if batch_size < 1:
        raise BatchSizeError(f"Batch size must be positive: {batch_size}")
    if len(corpus) < batch_size:
        raise CorpusSizeError(
            f"Corpus holds {len(corpus)} images, batch needs {batch_size}"
        )
    chosen = rng.permutation(len(corpus))[:batch_size]
    return _assemble([corpus.records[int(i)] for i in chosen], rng)


def epoch_batches(
    corpus: Corpus, batch_size: int, rng: np.random.Generator
) -> List[Batch]:
    """⌊n/B⌋ disjoint batches over one shuffle of the corpus."""
    if batch_size < 1:
        raise BatchSizeError(f"Batch size must be positive: {batch_size}")
    if len(corpus) < batch_size:
        raise CorpusSizeError(
            f"Corpus holds {len(corpus)} images, batch needs {batch_size}"
        )
    order = rng.permutation(len(corpus))
    batches = []
    for start in range(0, len(corpus) - batch_size + 1, batch_size):
        chunk = order[start:start + batch_size]
        records = [corpus.records[int(i)] for i in chunk]
        batches.append(_assemble(records, rng))
    return batches


def score_row(grid: FeatureGrid, captions: Sequence[TokenMatrix]) -> Tensor:
    """Scores of one image against several captions, as a vector.

    All captions share one matmul against the region vectors; each score
    is then a masked mean over that caption's block of spatial maxima.
    """
    stacked = T.concat([toks.values for toks in captions])
    regions = T.reshape(grid.values, (grid.regions, grid.embed_dim))
    volume = T.reshape(
        regions @ T.transpose(stacked),
        (grid.rows, grid.cols, stacked.shape[0]),
    )
    maxima = T.max_over_spatial(volume)
    scores = []
    offset = 0
    for toks in captions:
        mask = np.zeros(stacked.shape[0])
        mask[offset:offset + toks.max_len] = toks.valid_mask.data
        scores.append(T.mean_masked(maxima, mask))
        offset += toks.max_len
    return T.stack(scores)


def pairwise_scores(
    grids: Sequence[FeatureGrid], captions: Sequence[TokenMatrix]
) -> Tensor:
    """len(grids) × len(captions) matrix of MaxImage scores."""
    for grid in grids:
        for toks in captions:
            if grid.embed_dim != toks.embed_dim:
                raise ConfigurationError(
                    f"Image branch emits L={grid.embed_dim} but caption"
                    f" branch emits L={toks.embed_dim}"
                )
    return T.stack([score_row(grid, captions) for grid in grids])


def pair_score(grid: FeatureGrid, toks: TokenMatrix) -> Tensor:
    """Score of a single image-caption pair."""
    return max_image_score(build_localization_space(grid, toks))


def score_matrix(
    batch: Batch,
    model: ColocModel,
    mode: ParseMode = ParseMode.WORD,
) -> ScoreMatrix:
    """Encode a batch and score every image against every caption."""
    grids = [encode_image(image, model.image) for image in batch.images]
    captions = [
        encode_tokens(c.token_ids, c.span_bounds(), mode, model.text)
        for c in batch.captions
    ]
    return ScoreMatrix(
        values=pairwise_scores(grids, captions),
        image_ids=list(batch.image_ids),
        caption_ids=[c.caption_id for c in batch.captions],
    )


def _square(scores: Union[ScoreMatrix, Tensor]) -> Tensor:
    values = scores.values if isinstance(scores, ScoreMatrix) else scores
    if values.ndim != 2 or values.shape[0] != values.shape[1]:
        raise ShapeError("loss", values.shape, detail="expected B×B scores")
    if values.shape[0] < 2:
        raise BatchSizeError(
            f"Ranking losses need at least 2 pairs, got {values.shape[0]}"
        )
    return values


def npair_loss(scores: Union[ScoreMatrix, Tensor]) -> Tensor:
    """Softmax ranking loss over every in-batch impostor, both directions.

    For anchor j the caption term is log Σ_i exp(s[j, i]) − s[j, j] and
    the image term is log Σ_i exp(s[i, j]) − s[j, j]; the loss averages
    their sum over anchors.
    """
    values = _square(scores)
    size = values.shape[0]
    terms = []
    for j in range(size):
        positive = T.gather(values, np.asarray(j * size + j))
        row = T.gather(values, j * size + np.arange(size))
        column = T.gather(values, np.arange(size) * size + j)
        terms.append(T.log_sum_exp(row) - positive)
        terms.append(T.log_sum_exp(column) - positive)
    return T.reduce_sum(T.stack(terms)) * (1.0 / size)


def mine_impostors(
    scores: npt.NDArray[np.float64],
    strategy: str = "hardest",
    rng: Optional[np.random.Generator] = None,
) -> Tuple[npt.NDArray[np.int64], npt.NDArray[np.int64]]:
    """Impostor caption and impostor image index for every anchor.

    Selection reads plain values, so no gradient flows through it.
    ``hardest`` takes the first highest-scoring impostor.
    """
    size = scores.shape[0]
    if strategy == "random":
        if rng is None:
            raise ConfigurationError("Random mining needs an rng")
        offsets = rng.integers(1, size, size=(2, size))
        anchors = np.arange(size)
        return (anchors + offsets[0]) % size, (anchors + offsets[1]) % size
    if strategy != "hardest":
        raise ConfigurationError(f"Unknown mining strategy: {strategy}")
    masked = scores.astype(np.float64, copy=True)
    np.fill_diagonal(masked, -np.inf)
    captions = np.argmax(masked, axis=1)
    images = np.argmax(masked, axis=0)
    return captions.astype(np.int64), images.astype(np.int64)


def triplet_loss(
    scores: Union[ScoreMatrix, Tensor],
    cfg: Optional[TripletConfig] = None,
    rng: Optional[np.random.Generator] = None,
) -> Tensor:
    """Hinge loss against one mined impostor per anchor and direction."""
    cfg = cfg or TripletConfig()
    values = _square(scores)
    size = values.shape[0]
    caption_imp, image_imp = mine_impostors(values.data, cfg.mining, rng)
    anchors = np.arange(size)
    positive = T.gather(values, anchors * size + anchors)
    wrong_caption = T.gather(values, anchors * size + caption_imp)
    wrong_image = T.gather(values, image_imp * size + anchors)
    hinge_caption = T.relu(wrong_caption - positive + cfg.margin)
    hinge_image = T.relu(wrong_image - positive + cfg.margin)
    return T.reduce_sum(hinge_caption + hinge_image) * (1.0 / size)
