"""Shared fixtures and hypothesis profiles."""

import os
import tempfile
from pathlib import Path
from typing import Generator

import pytest
from hypothesis import HealthCheck, settings

from coloc_retrieval.core.corpus import (
    VOCAB_WORDS,
    Corpus,
    CorpusStats,
    generate_corpus,
    save_corpus,
)
from coloc_retrieval.core.encoders import (
    ColocModel,
    ConvSpec,
    EncoderDims,
    init_model,
)

settings.register_profile(
    "fast",
    max_examples=25,
    deadline=None,
    suppress_health_check=[HealthCheck.function_scoped_fixture],
)
settings.register_profile("thorough", max_examples=300, deadline=None)
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "fast"))

SMALL_STATS = CorpusStats(image_size=16, captions_per_image=2)

SMALL_DIMS = EncoderDims(
    image_size=(16, 16),
    conv_layers=(ConvSpec(6, 4, 2), ConvSpec(8, 3, 2)),
    embed_dim=8,
    word_dim=6,
    vocab_size=len(VOCAB_WORDS),
    n_max=12,
)


@pytest.fixture
def small_corpus() -> Corpus:
    """Twenty 16×16 images with two captions each."""
    return generate_corpus(20, seed=7, stats=SMALL_STATS)


@pytest.fixture
def small_model() -> ColocModel:
    """Untrained model sized for :data:`SMALL_DIMS`."""
    return init_model(0, dims=SMALL_DIMS)


@pytest.fixture
def temp_dir() -> Generator[Path, None, None]:
    """Create a temporary working directory."""
    with tempfile.TemporaryDirectory() as temp_dir:
        yield Path(temp_dir)


@pytest.fixture
def corpus_dir(small_corpus: Corpus, temp_dir: Path) -> Path:
    """:func:`small_corpus` saved to disk."""
    directory = temp_dir / "corpus"
    save_corpus(small_corpus, directory)
    return directory
