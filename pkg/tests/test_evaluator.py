"""Tests for the pointing game, its baselines and Recall@K."""

from dataclasses import replace
from pathlib import Path
from typing import List, Sequence

import numpy as np
import pytest

from coloc_retrieval.core.coloc import SaliencyMap
from coloc_retrieval.core.corpus import (
    BoundingBox,
    Corpus,
    CorpusRecord,
    GroundedCaption,
    PhraseSpan,
    Scene,
    Vocabulary,
    generate_corpus,
)
from coloc_retrieval.core.encoders import ColocModel, ParseMode, init_model
from coloc_retrieval.core.errors import (
    AnnotationError,
    ColocError,
    ConfigurationError,
)
from coloc_retrieval.core.evaluator import (
    Direction,
    _map_ordered,
    activation_baseline,
    center_baseline,
    first_relevant_rank,
    pointing_accuracy,
    pointing_query,
    random_baseline,
    recall_at_k,
    recall_from_scores,
    recall_over_folds,
    untrained_baseline,
    write_pointing_report,
)

from .conftest import SMALL_DIMS, SMALL_STATS


def _boxed_corpus(boxes: Sequence[BoundingBox], size: int = 32) -> Corpus:
    """One blank image with a one-span caption per box."""
    vocab = Vocabulary()
    ids = vocab.encode(["a", "red", "square"])
    captions = [
        GroundedCaption(
            caption_id=f"img00000_c{k}",
            image_id="img00000",
            token_ids=ids,
            spans=[PhraseSpan(1, 3, [box])],
        )
        for k, box in enumerate(boxes)
    ]
    scene = Scene(image=np.zeros((size, size, 3)), objects=[])
    return Corpus([CorpusRecord("img00000", scene, captions)], vocab)


def _single_token_spans(corpus: Corpus) -> Corpus:
    """Shrink every span to its final (shape) word."""
    records: List[CorpusRecord] = []
    for record in corpus.records:
        captions = [
            replace(
                caption,
                spans=[
                    PhraseSpan(s.end - 1, s.end, s.boxes)
                    for s in caption.spans
                ],
            )
            for caption in record.captions
        ]
        records.append(replace(record, captions=captions))
    return replace(corpus, records=records)


def test_pointing_query_hit_and_miss() -> None:
    """Test hits inside any box, misses outside all of them."""
    grid = np.zeros((8, 8))
    grid[2, 5] = 1.0
    boxes = [BoundingBox(0, 0, 2, 2), BoundingBox(4, 1, 6, 3)]

    outcome = pointing_query(grid, boxes)
    assert (outcome.hit, outcome.x, outcome.y) == (True, 5, 2)
    assert outcome.box_index == 1

    missed = pointing_query(grid, [BoundingBox(5, 3, 8, 8)])
    assert not missed.hit
    assert missed.box_index is None


def test_pointing_query_uses_upsampled_map() -> None:
    """Test pixel-scale maps take precedence over the grid."""
    upsampled = np.zeros((4, 4))
    upsampled[3, 3] = 1.0
    saliency = SaliencyMap(np.ones((2, 2)), "m", upsampled=upsampled)

    outcome = pointing_query(saliency, [BoundingBox(3, 3, 4, 4)])
    assert outcome.hit


def test_pointing_query_needs_a_box() -> None:
    """Test queries without ground truth are rejected."""
    with pytest.raises(AnnotationError):
        pointing_query(np.zeros((2, 2)), [])


def test_pointing_accuracy_reports_every_span(
    small_corpus: Corpus, small_model: ColocModel
) -> None:
    """Test one record per annotated span and a valid accuracy."""
    result = pointing_accuracy(small_model, small_corpus, max_workers=3)
    spans = sum(len(c.spans) for c in small_corpus.captions())

    assert result.total == spans == len(result.records)
    assert 0.0 <= result.accuracy <= 1.0
    assert result.label == "pointing[word]"
    serial = pointing_accuracy(small_model, small_corpus, max_workers=1)
    assert [r.to_line() for r in serial.records] == [
        r.to_line() for r in result.records
    ]


def test_word_and_phrase_modes_agree_on_single_words(
    small_corpus: Corpus, small_model: ColocModel
) -> None:
    """Test length-1 spans point identically in both parse modes."""
    corpus = _single_token_spans(small_corpus)
    word = pointing_accuracy(small_model, corpus, ParseMode.WORD)
    phrase = pointing_accuracy(small_model, corpus, ParseMode.PHRASE)

    assert [r.to_line() for r in word.records] == [
        r.to_line() for r in phrase.records
    ]
    assert word.hits == phrase.hits


def test_random_baseline_matches_box_area() -> None:
    """Test random pixels hit a quarter-area box a quarter of the time."""
    corpus = _boxed_corpus([BoundingBox(0, 0, 16, 16)] * 10)
    result = random_baseline(corpus, 10_000, np.random.default_rng(0))
    sigma = np.sqrt(0.25 * 0.75 / 10_000)

    assert result.total == 10
    assert abs(result.accuracy - 0.25) <= 3 * sigma


def test_random_baseline_needs_trials() -> None:
    """Test trials must be positive."""
    corpus = _boxed_corpus([BoundingBox(0, 0, 4, 4)])
    with pytest.raises(ConfigurationError):
        random_baseline(corpus, 0, np.random.default_rng(0))


def test_center_baseline() -> None:
    """Test the centre pixel hits exactly the boxes covering it."""
    covering = [BoundingBox(10, 10, 20, 20)] * 40
    elsewhere = [BoundingBox(0, 0, 8, 8)] * 10
    result = center_baseline(_boxed_corpus(covering + elsewhere))

    assert result.accuracy == pytest.approx(0.80, abs=0.02)
    assert {(r.argmax_x, r.argmax_y) for r in result.records} == {(16, 16)}


def test_empty_span_boxes_are_rejected() -> None:
    """Test a span without boxes fails annotation checks."""
    corpus = _boxed_corpus([BoundingBox(0, 0, 4, 4)])
    corpus.records[0].captions[0].spans[0].boxes.clear()
    with pytest.raises(AnnotationError):
        center_baseline(corpus)


def test_model_baselines_run(
    small_corpus: Corpus, small_model: ColocModel
) -> None:
    """Test the activation and untrained baselines score every span."""
    spans = sum(len(c.spans) for c in small_corpus.captions())
    activation = activation_baseline(small_model, small_corpus, 2)
    untrained = untrained_baseline(small_corpus, SMALL_DIMS, seed=0)

    assert activation.label == "activation"
    assert activation.total == spans
    assert untrained.label == "untrained"
    assert untrained.total == spans
    reference = pointing_accuracy(small_model, small_corpus)
    assert untrained.hits == reference.hits


def test_first_relevant_rank_breaks_ties_by_index() -> None:
    """Test ties rank the lower index first."""
    scores = [1.0, 3.0, 3.0, 0.0]
    assert first_relevant_rank(scores, {2}) == 2
    assert first_relevant_rank(scores, {1, 2}) == 1
    assert first_relevant_rank(scores, {3}) == 4
    with pytest.raises(AnnotationError):
        first_relevant_rank(scores, set())


def test_recall_is_monotone_in_k() -> None:
    """Test R@K never decreases as K grows."""
    rng = np.random.default_rng(5)
    table = rng.normal(size=(30, 12))
    relevant = [{int(i)} for i in rng.integers(0, 12, size=30)]
    result = recall_from_scores(
        table, relevant, [1, 3, 5, 12], Direction.CAPTION_TO_IMAGE
    )

    values = [result.recalls[k] for k in (1, 3, 5, 12)]
    assert values == sorted(values)
    assert values[-1] == 1.0
    with pytest.raises(ConfigurationError):
        recall_from_scores(table, relevant, [13], Direction.CAPTION_TO_IMAGE)


def test_recall_at_k_directions(
    small_corpus: Corpus, small_model: ColocModel
) -> None:
    """Test query counts per direction."""
    to_image = recall_at_k(
        small_model, small_corpus, [1, 5], Direction.CAPTION_TO_IMAGE
    )
    to_caption = recall_at_k(
        small_model, small_corpus, [1, 5], "image_to_caption", 2
    )

    assert len(to_image.ranks) == small_corpus.caption_count()
    assert len(to_caption.ranks) == len(small_corpus)
    assert to_caption.direction is Direction.IMAGE_TO_CAPTION
    assert to_image.recalls[1] <= to_image.recalls[5]


def test_recall_over_folds(
    small_corpus: Corpus, small_model: ColocModel
) -> None:
    """Test disjoint folds are averaged and oversize folds refused."""
    result = recall_over_folds(
        small_model, small_corpus, fold_size=10, n_folds=5, k_list=[1]
    )
    assert result.folds == 2
    assert len(result.ranks) == small_corpus.caption_count()

    with pytest.raises(ConfigurationError):
        recall_over_folds(small_model, small_corpus, fold_size=21)


def test_pointing_report_lines(
    small_corpus: Corpus, small_model: ColocModel, temp_dir: Path
) -> None:
    """Test one tab-separated line per query."""
    result = pointing_accuracy(small_model, small_corpus)
    path = temp_dir / "reports" / "pointing.tsv"
    write_pointing_report(path, result)

    lines = path.read_text(encoding="utf-8").splitlines()
    assert len(lines) == result.total
    fields = lines[0].split("\t")
    assert fields[0] == result.records[0].caption_id
    assert fields[4] in ("hit", "miss")


def test_pointing_on_noise_matches_box_coverage() -> None:
    """Test argmax of uniform noise hits a box in proportion to its area."""
    rng = np.random.default_rng(21)
    boxes = [BoundingBox(4, 8, 20, 20), BoundingBox(24, 0, 32, 4)]
    coverage = (16 * 12 + 8 * 4) / (32 * 32)
    trials = 10_000

    hits = sum(
        pointing_query(rng.random((32, 32)), boxes).hit
        for _ in range(trials)
    )
    sigma = np.sqrt(coverage * (1.0 - coverage) / trials)

    assert abs(hits / trials - coverage) <= 3 * sigma


def test_untrained_recall_is_at_chance() -> None:
    """Test an untrained model ranks a 100-image fold at chance."""
    corpus = generate_corpus(100, seed=11, stats=SMALL_STATS)
    seeds = range(5)
    recalls = [
        recall_at_k(
            init_model(seed, dims=SMALL_DIMS),
            corpus,
            [1],
            Direction.CAPTION_TO_IMAGE,
        ).recalls[1]
        for seed in seeds
    ]
    chance = 1.0 / len(corpus)
    # Captions of one image share its score row, so count images.
    sigma = np.sqrt(chance * (1.0 - chance) / (len(corpus) * len(seeds)))

    assert abs(float(np.mean(recalls)) - chance) <= 3 * sigma


def test_parallel_map_refuses_missing_results() -> None:
    """Test a worker returning None fails instead of shortening results."""
    items = [0, 1, 2, 3]
    assert _map_ordered(lambda i: i * 2, items, 2, "double") == [0, 2, 4, 6]

    with pytest.raises(ColocError, match="returned no result"):
        _map_ordered(
            lambda i: None if i == 2 else i, items, 2, "sometimes empty"
        )
