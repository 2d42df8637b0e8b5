"""Pointing game, localization baselines and Recall@K retrieval."""

import logging
from concurrent.futures import ThreadPoolExecutor, as_completed
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import (
    Callable,
    Dict,
    List,
    Optional,
    Sequence,
    Set,
    Tuple,
    TypeVar,
    Union,
)

import numpy as np
import numpy.typing as npt

from .coloc import (
    SaliencyMap,
    activation_saliency,
    build_localization_space,
    span_saliency_word_mode,
    token_saliency,
    upsample_map,
)
from .corpus import BoundingBox, Corpus, CorpusRecord, GroundedCaption
from .encoders import (
    ColocModel,
    EncoderDims,
    FeatureGrid,
    ParseMode,
    encode_image,
    encode_tokens,
    init_model,
)
from .errors import AnnotationError, ColocError, ConfigurationError
from .losses import score_row

logger = logging.getLogger(__name__)

Item = TypeVar("Item")
Out = TypeVar("Out")


class Direction(str, Enum):
    """Which side is the query in a retrieval run."""

    IMAGE_TO_CAPTION = "image_to_caption"
    CAPTION_TO_IMAGE = "caption_to_image"


@dataclass
class QueryOutcome:
    """Where a map points and which box, if any, it hits."""

    hit: bool
    x: int
    y: int
    box_index: Optional[int]


@dataclass
class PointingRecord:
    """One line of a per-query report."""

    caption_id: str
    span_index: int
    span: Tuple[int, int]
    argmax_x: int
    argmax_y: int
    hit: bool
    box_index: Optional[int] = None

    def to_line(self) -> str:
        """caption_id, span, argmax_x, argmax_y, hit|miss."""
        start, end = self.span
        verdict = "hit" if self.hit else "miss"
        return (
            f"{self.caption_id}\t{start}:{end}\t{self.argmax_x}"
            f"\t{self.argmax_y}\t{verdict}"
        )


@dataclass
class PointingResult:
    """Hit count over queries; ``hits`` may be fractional for Monte Carlo."""

    label: str
    hits: float
    total: int
    records: List[PointingRecord] = field(default_factory=list)

    @property
    def accuracy(self) -> float:
        """hits / (hits + misses)."""
        if self.total <= 0:
            raise AnnotationError(f"{self.label}: no pointing queries")
        return self.hits / self.total

    @property
    def stderr(self) -> float:
        """Binomial standard error of the accuracy."""
        p = self.accuracy
        return float(np.sqrt(p * (1.0 - p) / self.total))


@dataclass
class RetrievalResult:
    """Ranks of the first correct candidate and the derived recalls."""

    direction: Direction
    ranks: List[int]
    recalls: Dict[int, float]
    folds: int = 1


def _map_ordered(
    fn: Callable[[Item], Out],
    items: Sequence[Item],
    max_workers: int,
    label: str,
) -> List[Out]:
    """Run ``fn`` over ``items`` in a pool and keep input order.

    Every item is attempted; failures are logged and raised together. An
    item whose call returns None counts as a failure.
    """
    results: List[Optional[Out]] = [None] * len(items)
    errors: Dict[int, Exception] = {}
    with ThreadPoolExecutor(max_workers=max(1, max_workers)) as executor:
        futures = {
            executor.submit(fn, item): index
            for index, item in enumerate(items)
        }
        for future in as_completed(futures):
            index = futures[future]
            try:
                result = future.result()
                if result is None:
                    raise ColocError(f"{label} returned no result")
                results[index] = result
            except Exception as exc:
                logger.error(f"{label} failed for item {index}: {exc}")
                errors[index] = exc

    if errors:
        first = errors[min(errors)]
        if len(errors) == 1:
            raise first
        raise ColocError(
            f"{label} failed for {len(errors)} item(s); first: {first}"
        ) from first
    return [r for r in results if r is not None]


def _map_values(map: Union[SaliencyMap, npt.ArrayLike]) -> npt.NDArray:
    if isinstance(map, SaliencyMap):
        return map.grid if map.upsampled is None else map.upsampled
    return np.asarray(map, dtype=np.float64)


def pointing_query(
    map: Union[SaliencyMap, npt.ArrayLike], boxes: Sequence[BoundingBox]
) -> QueryOutcome:
    """Hit iff the first row-major argmax pixel lies inside any box."""
    if not boxes:
        raise AnnotationError("Pointing query has no ground-truth box")
    values = _map_values(map)
    y, x = np.unravel_index(int(np.argmax(values)), values.shape)
    for index, box in enumerate(boxes):
        if box.contains(int(x), int(y)):
            return QueryOutcome(True, int(x), int(y), index)
    return QueryOutcome(False, int(x), int(y), None)


def check_annotations(corpus: Corpus) -> int:
    """Validate every query span and return the number of queries."""
    total = 0
    for caption in corpus.captions():
        for span in caption.spans:
            if not 0 <= span.start < span.end <= len(caption.token_ids):
                raise AnnotationError(
                    f"Caption {caption.caption_id}: span {span.bounds}"
                    f" beyond its {len(caption.token_ids)} tokens"
                )
            if not span.boxes:
                raise AnnotationError(
                    f"Caption {caption.caption_id}: span {span.bounds}"
                    " has no box"
                )
            total += 1
    return total


def span_maps(
    model: ColocModel,
    grid: FeatureGrid,
    caption: GroundedCaption,
    mode: ParseMode,
    height: int,
    width: int,
) -> List[SaliencyMap]:
    """Pixel-scale saliency map of every span of ``caption``.

    Word mode averages the per-token maps of a span; phrase mode re-encodes
    the caption with that span's embeddings averaged into one step.
    """
    provenance = (caption.image_id, caption.caption_id)
    if mode is ParseMode.WORD:
        toks = encode_tokens(caption.token_ids, [], mode, model.text)
        space = build_localization_space(grid, toks, provenance)
    maps = []
    for span in caption.spans:
        if mode is ParseMode.WORD:
            saliency = span_saliency_word_mode(space, span.bounds)
        else:
            toks = encode_tokens(
                caption.token_ids, [span.bounds], mode, model.text
            )
            row = next(
                i for i, g in enumerate(toks.groups) if g[0] == span.start
            )
            space = build_localization_space(grid, toks, provenance)
            saliency = token_saliency(space, row)
        maps.append(upsample_map(saliency, height, width))
    return maps


def _record_outcomes(
    model: ColocModel, record: CorpusRecord, mode: ParseMode
) -> List[PointingRecord]:
    scene = record.scene
    grid = encode_image(scene.image, model.image)
    outcomes = []
    for caption in record.captions:
        maps = span_maps(
            model, grid, caption, mode, scene.height, scene.width
        )
        for span_index, (span, saliency) in enumerate(
            zip(caption.spans, maps)
        ):
            outcome = pointing_query(saliency, span.boxes)
            outcomes.append(
                PointingRecord(
                    caption_id=caption.caption_id,
                    span_index=span_index,
                    span=span.bounds,
                    argmax_x=outcome.x,
                    argmax_y=outcome.y,
                    hit=outcome.hit,
                    box_index=outcome.box_index,
                )
            )
    return outcomes


def _collect(
    label: str, per_record: List[List[PointingRecord]]
) -> PointingResult:
    records = [r for group in per_record for r in group]
    hits = sum(1 for r in records if r.hit)
    result = PointingResult(
        label=label, hits=float(hits), total=len(records), records=records
    )
    logger.info(
        f"{label}: {hits}/{len(records)} hits"
        f" (accuracy {result.accuracy:.4f})"
    )
    return result


def pointing_accuracy(
    model: ColocModel,
    corpus: Corpus,
    mode: ParseMode = ParseMode.WORD,
    max_workers: int = 1,
) -> PointingResult:
    """Pointing game over every annotated phrase of ``corpus``."""
    check_annotations(corpus)
    mode = ParseMode(mode)
    per_record = _map_ordered(
        lambda record: _record_outcomes(model, record, mode),
        corpus.records,
        max_workers,
        "pointing",
    )
    return _collect(f"pointing[{mode.value}]", per_record)


def center_baseline(corpus: Corpus) -> PointingResult:
    """Point every query at pixel (⌊H/2⌋, ⌊W/2⌋)."""
    check_annotations(corpus)
    per_record = []
    for record in corpus.records:
        x, y = record.scene.width // 2, record.scene.height // 2
        outcomes = []
        for caption in record.captions:
            for span_index, span in enumerate(caption.spans):
                hit = any(box.contains(x, y) for box in span.boxes)
                outcomes.append(
                    PointingRecord(
                        caption.caption_id, span_index, span.bounds, x, y, hit
                    )
                )
        per_record.append(outcomes)
    return _collect("center", per_record)


def random_baseline(
    corpus: Corpus, trials: int, rng: np.random.Generator
) -> PointingResult:
    """Hit rate of uniformly random pixels, averaged over ``trials``."""
    if trials < 1:
        raise ConfigurationError(f"trials must be positive, got {trials}")
    total = check_annotations(corpus)
    hits = 0.0
    for record in corpus.records:
        height, width = record.scene.height, record.scene.width
        for caption in record.captions:
            for span in caption.spans:
                xs = rng.integers(0, width, size=trials)
                ys = rng.integers(0, height, size=trials)
                inside = np.zeros(trials, dtype=bool)
                for box in span.boxes:
                    inside |= (
                        (xs >= box.x_min)
                        & (xs < box.x_max)
                        & (ys >= box.y_min)
                        & (ys < box.y_max)
                    )
                hits += float(inside.mean())
    result = PointingResult(label="random", hits=hits, total=total)
    logger.info(f"random: accuracy {result.accuracy:.4f} over {trials} trials")
    return result


def _activation_outcomes(
    model: ColocModel, record: CorpusRecord
) -> List[PointingRecord]:
    scene = record.scene
    saliency = activation_saliency(encode_image(scene.image, model.image))
    upsampled = upsample_map(saliency, scene.height, scene.width)
    outcomes = []
    for caption in record.captions:
        for span_index, span in enumerate(caption.spans):
            outcome = pointing_query(upsampled, span.boxes)
            outcomes.append(
                PointingRecord(
                    caption.caption_id,
                    span_index,
                    span.bounds,
                    outcome.x,
                    outcome.y,
                    outcome.hit,
                    outcome.box_index,
                )
            )
    return outcomes


def activation_baseline(
    model: ColocModel, corpus: Corpus, max_workers: int = 1
) -> PointingResult:
    """Point every phrase at the peak of the image branch's channel mean."""
    check_annotations(corpus)
    per_record = _map_ordered(
        lambda record: _activation_outcomes(model, record),
        corpus.records,
        max_workers,
        "activation baseline",
    )
    return _collect("activation", per_record)


def untrained_baseline(
    corpus: Corpus,
    dims: EncoderDims,
    seed: int,
    scheme: str = "lecun_uniform",
    max_workers: int = 1,
) -> PointingResult:
    """Word-mode pointing with freshly initialised parameters."""
    model = init_model(seed, scheme, dims)
    result = pointing_accuracy(model, corpus, ParseMode.WORD, max_workers)
    result.label = "untrained"
    return result


def first_relevant_rank(scores: npt.ArrayLike, relevant: Set[int]) -> int:
    """1-based rank of the best-ranked relevant candidate.

    Candidates sort by descending score, ties by ascending index.
    """
    row = np.asarray(scores, dtype=np.float64)
    order = np.lexsort((np.arange(row.size), -row))
    for position, candidate in enumerate(order, start=1):
        if int(candidate) in relevant:
            return position
    raise AnnotationError("Query has no relevant candidate")


def recall_from_scores(
    scores: npt.ArrayLike,
    relevant: Sequence[Set[int]],
    k_list: Sequence[int],
    direction: Direction,
) -> RetrievalResult:
    """Recall@K from a queries × candidates score table."""
    table = np.asarray(scores, dtype=np.float64)
    if table.ndim != 2 or table.shape[0] != len(relevant):
        raise ConfigurationError(
            f"Score table {table.shape} does not match {len(relevant)}"
            " queries"
        )
    ks = sorted(set(int(k) for k in k_list))
    if not ks or ks[0] < 1:
        raise ConfigurationError(f"K values must be positive: {k_list}")
    if ks[-1] > table.shape[1]:
        raise ConfigurationError(
            f"K={ks[-1]} exceeds the {table.shape[1]} candidates in the fold"
        )
    ranks = [
        first_relevant_rank(table[q], relevant[q])
        for q in range(table.shape[0])
    ]
    rank_array = np.asarray(ranks)
    recalls = {k: float(np.mean(rank_array <= k)) for k in ks}
    return RetrievalResult(direction=direction, ranks=ranks, recalls=recalls)


def score_table(
    model: ColocModel, corpus: Corpus, max_workers: int = 1
) -> npt.NDArray[np.float64]:
    """images × captions matrix of MaxImage scores (word mode)."""
    captions = [
        encode_tokens(c.token_ids, [], ParseMode.WORD, model.text)
        for c in corpus.captions()
    ]

    def row(record: CorpusRecord) -> npt.NDArray[np.float64]:
        grid = encode_image(record.scene.image, model.image)
        return score_row(grid, captions).data

    rows = _map_ordered(row, corpus.records, max_workers, "scoring")
    return np.stack(rows)


def recall_at_k(
    model: ColocModel,
    corpus: Corpus,
    k_list: Sequence[int],
    direction: Direction,
    max_workers: int = 1,
) -> RetrievalResult:
    """Recall@K of one fold in the given direction.

    Image→caption accepts any caption of the query image; caption→image
    accepts only the caption's source image.
    """
    direction = Direction(direction)
    table = score_table(model, corpus, max_workers)
    owner = [
        index
        for index, record in enumerate(corpus.records)
        for _ in record.captions
    ]
    if direction is Direction.IMAGE_TO_CAPTION:
        relevant = [
            {c for c, image in enumerate(owner) if image == i}
            for i in range(len(corpus))
        ]
        return recall_from_scores(table, relevant, k_list, direction)
    return recall_from_scores(
        table.T, [{image} for image in owner], k_list, direction
    )


def recall_over_folds(
    model: ColocModel,
    corpus: Corpus,
    fold_size: int = 100,
    n_folds: int = 5,
    k_list: Sequence[int] = (1, 5, 10),
    direction: Direction = Direction.CAPTION_TO_IMAGE,
    max_workers: int = 1,
) -> RetrievalResult:
    """Mean Recall@K over up to ``n_folds`` disjoint folds of images."""
    if fold_size < 1 or n_folds < 1:
        raise ConfigurationError("fold_size and n_folds must be positive")
    available = len(corpus) // fold_size
    if available == 0:
        raise ConfigurationError(
            f"fold_size {fold_size} exceeds the {len(corpus)} test images"
        )
    ids = corpus.image_ids
    results = []
    for fold in range(min(n_folds, available)):
        chunk = ids[fold * fold_size:(fold + 1) * fold_size]
        results.append(
            recall_at_k(
                model, corpus.subset(chunk), k_list, direction, max_workers
            )
        )
    ks = sorted(results[0].recalls)
    recalls = {k: float(np.mean([r.recalls[k] for r in results])) for k in ks}
    ranks = [rank for r in results for rank in r.ranks]
    logger.info(
        f"{Direction(direction).value} over {len(results)} fold(s): "
        + ", ".join(f"R@{k}={recalls[k]:.4f}" for k in ks)
    )
    return RetrievalResult(
        direction=Direction(direction),
        ranks=ranks,
        recalls=recalls,
        folds=len(results),
    )


def write_pointing_report(path: Path, result: PointingResult) -> None:
    """One line per query: caption_id, span, argmax_x, argmax_y, verdict."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        for record in result.records:
            f.write(record.to_line() + "\n")
    logger.info(f"Wrote {len(result.records)} query record(s) to {path}")
