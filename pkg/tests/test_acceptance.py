"""End-to-end training runs on a full-size corpus; deselected by default."""

from typing import Dict, Tuple

import numpy as np
import pytest

from coloc_retrieval.core.corpus import Corpus, generate_corpus, split
from coloc_retrieval.core.encoders import ColocModel
from coloc_retrieval.core.evaluator import (
    Direction,
    PointingResult,
    pointing_accuracy,
    random_baseline,
    recall_over_folds,
    untrained_baseline,
)
from coloc_retrieval.core.trainer import (
    TrainConfig,
    TrainResult,
    default_dims,
    train,
)

pytestmark = pytest.mark.slow


@pytest.fixture(scope="module")
def parts() -> Tuple[Corpus, Corpus]:
    """500 images split 80/10/10; returns (train, test)."""
    corpus = generate_corpus(500, seed=0, max_workers=4)
    train_part, _, test_part = split(corpus, (0.8, 0.1, 0.1), seed=0)
    return train_part, test_part


@pytest.fixture(scope="module")
def runs(parts: Tuple[Corpus, Corpus]) -> Dict[str, TrainResult]:
    """N-pair and triplet runs for seeds 1 to 3."""
    train_part, _ = parts
    results = {}
    for seed in (1, 2, 3):
        for loss_kind in ("npair", "triplet"):
            cfg = TrainConfig(loss_kind=loss_kind, epochs=30, seed=seed)
            results[f"{loss_kind}-{seed}"] = train(cfg, train_part)
    return results


@pytest.fixture(scope="module")
def trained(runs: Dict[str, TrainResult]) -> Dict[str, ColocModel]:
    """Final models keyed by loss and seed."""
    return {key: result.state.model for key, result in runs.items()}


def _within(result: PointingResult, reference: PointingResult) -> bool:
    sigma = np.sqrt(
        reference.accuracy * (1.0 - reference.accuracy) / reference.total
    )
    return abs(result.accuracy - reference.accuracy) <= 3 * sigma


def test_trained_pointing_beats_random(
    parts: Tuple[Corpus, Corpus], trained: Dict[str, ColocModel]
) -> None:
    """Test trained pointing reaches three times the random rate."""
    _, test_part = parts
    rand = random_baseline(test_part, 1000, np.random.default_rng(0))
    trained_result = pointing_accuracy(
        trained["npair-1"], test_part, max_workers=4
    )

    assert trained_result.accuracy >= 3 * rand.accuracy


def test_untrained_pointing_matches_random(
    parts: Tuple[Corpus, Corpus]
) -> None:
    """Test freshly initialised encoders point no better than chance."""
    train_part, test_part = parts
    rand = random_baseline(test_part, 1000, np.random.default_rng(0))
    untrained = untrained_baseline(
        test_part, default_dims(train_part), seed=1, max_workers=4
    )

    assert _within(untrained, rand)


def test_npair_beats_triplet_on_most_seeds(
    parts: Tuple[Corpus, Corpus], trained: Dict[str, ColocModel]
) -> None:
    """Test N-pair pointing is at least triplet's on two of three seeds."""
    _, test_part = parts
    wins = 0
    for seed in (1, 2, 3):
        npair = pointing_accuracy(trained[f"npair-{seed}"], test_part)
        triplet = pointing_accuracy(trained[f"triplet-{seed}"], test_part)
        wins += int(npair.accuracy >= triplet.accuracy)

    assert wins >= 2


def test_caption_to_image_recall(trained: Dict[str, ColocModel]) -> None:
    """Test R@1 on a held-out 100-image fold and monotone recall."""
    fold = generate_corpus(100, seed=99, max_workers=4)
    result = recall_over_folds(
        trained["npair-1"],
        fold,
        fold_size=100,
        n_folds=1,
        k_list=(1, 5, 10),
        direction=Direction.CAPTION_TO_IMAGE,
        max_workers=4,
    )

    assert result.recalls[1] >= 0.10
    assert result.recalls[1] <= result.recalls[5] <= result.recalls[10]


def test_training_loss_falls(runs: Dict[str, TrainResult]) -> None:
    """Test the final epoch loss is at most half the first."""
    metrics = runs["npair-1"].metrics
    assert metrics[0].mean_loss >= 2 * metrics[-1].mean_loss
