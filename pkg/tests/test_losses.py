"""Tests for batch construction and the ranking losses."""

from collections import Counter
from typing import Callable

import numpy as np
import pytest
from hypothesis import assume, given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from coloc_retrieval.core import tensor as T
from coloc_retrieval.core.corpus import Corpus
from coloc_retrieval.core.encoders import (
    ColocModel,
    ParseMode,
    encode_image,
    encode_tokens,
)
from coloc_retrieval.core.errors import (
    BatchSizeError,
    ConfigurationError,
    CorpusSizeError,
    ShapeError,
)
from coloc_retrieval.core.losses import (
    Batch,
    TripletConfig,
    build_batch,
    epoch_batches,
    mine_impostors,
    npair_loss,
    pair_score,
    score_matrix,
    triplet_loss,
)
from coloc_retrieval.core.tensor import Tape, Tensor
from coloc_retrieval.utils.selfcheck import brute_force_triplet, naive_npair

scores_4x4 = arrays(
    np.float64, (4, 4), elements=st.floats(-5.0, 5.0, allow_nan=False)
)
scores_2x2 = arrays(
    np.float64, (2, 2), elements=st.floats(-5.0, 5.0, allow_nan=False)
)


def _softplus(x: float) -> float:
    return float(np.log1p(np.exp(x)))


def test_build_batch_draws_distinct_images(small_corpus: Corpus) -> None:
    """Test B distinct images each paired with its own caption."""
    batch = build_batch(small_corpus, 5, np.random.default_rng(0))

    assert len(batch) == 5
    assert len(set(batch.image_ids)) == 5
    for image_id, caption in zip(batch.image_ids, batch.captions):
        assert caption.image_id == image_id


def test_batch_size_errors(small_corpus: Corpus) -> None:
    """Test empty batches and batches larger than the corpus."""
    rng = np.random.default_rng(0)
    with pytest.raises(BatchSizeError):
        build_batch(small_corpus, 0, rng)
    with pytest.raises(CorpusSizeError):
        build_batch(small_corpus, 21, rng)
    with pytest.raises(CorpusSizeError):
        epoch_batches(small_corpus, 21, rng)


def test_batch_rejects_repeated_images(small_corpus: Corpus) -> None:
    """Test a batch may not hold the same image twice."""
    record = small_corpus.records[0]
    with pytest.raises(ConfigurationError):
        Batch(
            images=[record.scene.image] * 2,
            image_ids=[record.image_id] * 2,
            captions=record.captions[:2],
        )


def test_epoch_batches_are_disjoint(small_corpus: Corpus) -> None:
    """Test ⌊n/B⌋ batches that never share an image."""
    batches = epoch_batches(small_corpus, 6, np.random.default_rng(1))

    assert len(batches) == 3
    seen = [i for batch in batches for i in batch.image_ids]
    assert len(seen) == len(set(seen)) == 18


def test_score_matrix_matches_pair_scores(
    small_corpus: Corpus, small_model: ColocModel
) -> None:
    """Test the batched matrix equals scoring each pair alone."""
    batch = build_batch(small_corpus, 3, np.random.default_rng(2))
    matrix = score_matrix(batch, small_model)

    assert matrix.size == 3
    assert matrix.caption_ids == [c.caption_id for c in batch.captions]
    for i, image in enumerate(batch.images):
        grid = encode_image(image, small_model.image)
        for j, caption in enumerate(batch.captions):
            toks = encode_tokens(
                caption.token_ids, [], ParseMode.WORD, small_model.text
            )
            expected = pair_score(grid, toks).item()
            assert matrix.values.data[i, j] == pytest.approx(
                expected, abs=1e-12
            )


def test_npair_two_pairs_closed_form() -> None:
    """Test B = 2 reduces to averaged softplus margins."""
    s = np.array([[0.3, -0.4], [1.1, 0.2]])
    expected = (
        _softplus(s[0, 1] - s[0, 0])
        + _softplus(s[1, 0] - s[0, 0])
        + _softplus(s[1, 0] - s[1, 1])
        + _softplus(s[0, 1] - s[1, 1])
    ) / 2.0

    assert npair_loss(Tensor(s)).item() == pytest.approx(expected, abs=1e-12)


@pytest.mark.parametrize("size", [2, 3, 8])
def test_npair_equal_scores(size: int) -> None:
    """Test all-equal scores give 2 log B."""
    loss = npair_loss(Tensor(np.full((size, size), 1.7))).item()
    assert loss == pytest.approx(2.0 * np.log(size), abs=1e-12)


@given(scores_4x4, st.floats(-20.0, 20.0))
def test_losses_ignore_a_common_shift(
    values: np.ndarray, shift: float
) -> None:
    """Test adding a constant to every score leaves both losses as is."""
    npair = npair_loss(Tensor(values)).item()
    triplet = triplet_loss(Tensor(values)).item()

    assert npair_loss(Tensor(values + shift)).item() == pytest.approx(
        npair, abs=1e-9
    )
    assert triplet_loss(Tensor(values + shift)).item() == pytest.approx(
        triplet, abs=1e-9
    )


@given(scores_4x4)
def test_losses_match_loop_forms(values: np.ndarray) -> None:
    """Test vectorised losses against direct loops."""
    assert npair_loss(Tensor(values)).item() == pytest.approx(
        naive_npair(values), abs=1e-10
    )
    assert triplet_loss(Tensor(values)).item() == pytest.approx(
        brute_force_triplet(values, 0.2), abs=1e-10
    )


def test_hardest_mining_takes_first_maximum() -> None:
    """Test ties resolve to the lowest index and skip the diagonal."""
    scores = np.array([[9.0, 1.0, 1.0], [0.0, 9.0, 2.0], [5.0, 5.0, 9.0]])
    captions, images = mine_impostors(scores)

    assert list(captions) == [1, 2, 0]
    assert list(images) == [2, 2, 1]


def test_random_mining_never_picks_the_positive() -> None:
    """Test random impostors are always off-diagonal."""
    rng = np.random.default_rng(3)
    for _ in range(50):
        captions, images = mine_impostors(np.zeros((4, 4)), "random", rng)
        assert np.all(captions != np.arange(4))
        assert np.all(images != np.arange(4))
    with pytest.raises(ConfigurationError):
        mine_impostors(np.zeros((4, 4)), "random")


def test_triplet_margin_hinge() -> None:
    """Test well-separated pairs incur no triplet loss."""
    separated = np.eye(3) * 2.0
    cfg = TripletConfig(margin=0.5)
    assert triplet_loss(Tensor(separated), cfg).item() == 0.0

    close = np.eye(3) * 0.1
    expected = 2 * (0.5 - 0.1)
    assert triplet_loss(Tensor(close), cfg).item() == pytest.approx(expected)


def test_triplet_config_validation() -> None:
    """Test negative margins and unknown strategies."""
    with pytest.raises(ConfigurationError):
        TripletConfig(margin=-0.1)
    with pytest.raises(ConfigurationError):
        TripletConfig(mining="semi-hard")


def test_losses_need_square_batches() -> None:
    """Test B < 2 and non-square inputs."""
    with pytest.raises(BatchSizeError):
        npair_loss(Tensor(np.ones((1, 1))))
    with pytest.raises(BatchSizeError):
        triplet_loss(Tensor(np.ones((1, 1))))
    with pytest.raises(ShapeError):
        npair_loss(Tensor(np.ones((2, 3))))


def test_npair_gradient() -> None:
    """Test the N-pair loss against finite differences."""
    values = Tensor(np.random.default_rng(4).normal(size=(3, 3)))
    assert T.grad_check(lambda: npair_loss(values), [values]) < 1e-4


def _score_gradient(
    loss_fn: Callable[[Tensor], Tensor], values: np.ndarray
) -> np.ndarray:
    scores = Tensor(values.copy(), requires_grad=True)
    with Tape() as tape:
        loss = loss_fn(scores)
        grads = tape.backward(loss)
    return grads.of(scores).data


@given(scores_4x4)
def test_npair_gradient_signs(values: np.ndarray) -> None:
    """Test impostor scores are pushed down and positives pulled up."""
    grad = _score_gradient(npair_loss, values)
    off_diagonal = ~np.eye(4, dtype=bool)

    assert np.all(grad[off_diagonal] > 0)
    assert np.all(np.diag(grad) < 0)
    assert grad.sum() == pytest.approx(0.0, abs=1e-12)


@given(scores_4x4)
def test_hardest_triplet_gradient_hits_one_impostor(
    values: np.ndarray,
) -> None:
    """Test each anchor moves at most one impostor per direction."""
    cfg = TripletConfig(margin=0.2)
    captions, images = mine_impostors(values)
    anchors = np.arange(4)
    diagonal = values[anchors, anchors]
    caption_gap = values[anchors, captions] - diagonal + cfg.margin
    image_gap = values[images, anchors] - diagonal + cfg.margin
    assume(np.all(np.abs(caption_gap) > 1e-9))
    assume(np.all(np.abs(image_gap) > 1e-9))

    expected = np.zeros((4, 4))
    for j in anchors:
        if caption_gap[j] > 0:
            expected[j, captions[j]] += 1.0
            expected[j, j] -= 1.0
        if image_gap[j] > 0:
            expected[images[j], j] += 1.0
            expected[j, j] -= 1.0
    grad = _score_gradient(lambda s: triplet_loss(s, cfg), values)

    assert np.allclose(grad, expected / 4.0, atol=1e-12)
    off_diagonal = grad * ~np.eye(4, dtype=bool)
    assert np.count_nonzero(off_diagonal) <= 8


@given(scores_2x2)
def test_two_pair_hinge_never_exceeds_npair(values: np.ndarray) -> None:
    """Test relu ≤ softplus makes the zero-margin triplet loss a bound."""
    hinge = triplet_loss(Tensor(values), TripletConfig(margin=0.0)).item()
    assert hinge <= npair_loss(Tensor(values)).item() + 1e-12


def test_build_batch_picks_captions_uniformly(small_corpus: Corpus) -> None:
    """Test every caption of an image is drawn equally often."""
    rng = np.random.default_rng(5)
    draws = 10_000
    counts: Counter = Counter()
    for _ in range(draws):
        batch = build_batch(small_corpus, len(small_corpus), rng)
        counts.update(caption.caption_id for caption in batch.captions)

    for record in small_corpus.records:
        p = 1.0 / len(record.captions)
        sigma = np.sqrt(p * (1.0 - p) / draws)
        for caption in record.captions:
            frequency = counts[caption.caption_id] / draws
            assert abs(frequency - p) <= 4.0 * sigma
