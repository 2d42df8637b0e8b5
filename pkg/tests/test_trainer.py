"""Tests for SGD with momentum, training runs and checkpoints."""

from pathlib import Path
from unittest.mock import patch

import numpy as np
import pytest

from coloc_retrieval.core.corpus import Corpus
from coloc_retrieval.core.encoders import init_model
from coloc_retrieval.core.errors import (
    ConfigurationError,
    CorruptionError,
    StateCorruptionError,
    TrainingDivergedError,
)
from coloc_retrieval.core.losses import build_batch
from coloc_retrieval.core.tensor import Tensor
from coloc_retrieval.core.trainer import (
    MAX_SEED,
    EpochMetrics,
    TrainConfig,
    TrainState,
    load_checkpoint,
    save_checkpoint,
    sgd_momentum_step,
    train,
    train_step,
)

from .conftest import SMALL_DIMS


def _config(**overrides: object) -> TrainConfig:
    settings = dict(batch_size=4, learning_rate=0.05, epochs=2, seed=3)
    settings.update(overrides)
    return TrainConfig(**settings)  # type: ignore[arg-type]


def _same_params(left: TrainState, right: TrainState) -> bool:
    first = left.model.to_arrays()
    second = right.model.to_arrays()
    return first.keys() == second.keys() and all(
        np.array_equal(first[name], second[name]) for name in first
    )


def test_momentum_step_math() -> None:
    """Test v ← μv + g and p ← p − lr·v over two steps."""
    state = TrainState.initial(init_model(0, dims=SMALL_DIMS), seed=0)
    before = state.model.text.embedding.data.copy()
    grads = {
        name: np.ones_like(param.data)
        for name, param in state.model.named_parameters().items()
    }

    sgd_momentum_step(state, grads, lr=0.1, momentum=0.9)
    sgd_momentum_step(state, grads, lr=0.1, momentum=0.9)

    assert np.allclose(state.velocities["text.embedding"], 1.9)
    assert np.allclose(state.model.text.embedding.data, before - 0.29)


def test_momentum_step_rejects_mismatched_grads() -> None:
    """Test missing gradients and corrupted velocities."""
    state = TrainState.initial(init_model(0, dims=SMALL_DIMS), seed=0)
    grads = {
        name: np.zeros_like(param.data)
        for name, param in state.model.named_parameters().items()
    }
    partial = dict(grads)
    del partial["text.b_r"]
    with pytest.raises(StateCorruptionError):
        sgd_momentum_step(state, partial, lr=0.1, momentum=0.9)

    state.velocities["text.b_r"] = np.zeros((2, 2))
    with pytest.raises(StateCorruptionError):
        sgd_momentum_step(state, grads, lr=0.1, momentum=0.9)


def test_config_validation() -> None:
    """Test out-of-range settings raise ConfigurationError."""
    for bad in (
        _config(loss_kind="hinge"),
        _config(batch_size=1),
        _config(momentum=1.0),
        _config(epochs=-1),
        _config(mining="semi-hard"),
        _config(init_scheme="orthogonal"),
        _config(seed=-1),
        _config(seed=MAX_SEED + 1),
    ):
        with pytest.raises(ConfigurationError):
            bad.validate()


def test_zero_epochs_returns_initial_model(small_corpus: Corpus) -> None:
    """Test epochs = 0 leaves the seeded initialisation untouched."""
    result = train(_config(epochs=0), small_corpus, SMALL_DIMS)
    initial = TrainState.initial(init_model(3, dims=SMALL_DIMS), seed=3)

    assert result.metrics == []
    assert result.state.epoch == 0
    assert _same_params(result.state, initial)


def test_training_is_deterministic(small_corpus: Corpus) -> None:
    """Test the same seed yields identical parameters and losses."""
    first = train(_config(), small_corpus, SMALL_DIMS)
    second = train(_config(), small_corpus, SMALL_DIMS)
    other = train(_config(seed=4), small_corpus, SMALL_DIMS)

    assert _same_params(first.state, second.state)
    assert [m.mean_loss for m in first.metrics] == [
        m.mean_loss for m in second.metrics
    ]
    assert not _same_params(first.state, other.state)


def test_triplet_training_runs(small_corpus: Corpus) -> None:
    """Test both mining strategies train to finite losses."""
    for mining in ("hardest", "random"):
        cfg = _config(loss_kind="triplet", mining=mining, epochs=1)
        result = train(cfg, small_corpus, SMALL_DIMS)
        assert np.isfinite(result.metrics[0].mean_loss)


def test_resume_matches_uninterrupted_run(
    small_corpus: Corpus, temp_dir: Path
) -> None:
    """Test stopping after epoch 1 and resuming changes nothing."""
    full = train(_config(epochs=3), small_corpus, SMALL_DIMS)

    first = train(_config(epochs=1), small_corpus, SMALL_DIMS)
    save_checkpoint(first.state, temp_dir / "epoch_1.ckpt")
    state = load_checkpoint(temp_dir / "epoch_1.ckpt")
    resumed = train(_config(epochs=3), small_corpus, state=state)

    assert resumed.state.epoch == 3
    assert [m.epoch for m in resumed.metrics] == [2, 3]
    assert _same_params(full.state, resumed.state)
    for name, velocity in full.state.velocities.items():
        assert np.array_equal(velocity, resumed.state.velocities[name])


def test_resume_requires_the_same_seed(small_corpus: Corpus) -> None:
    """Test a checkpoint refuses a different seed."""
    first = train(_config(epochs=1), small_corpus, SMALL_DIMS)
    with pytest.raises(ConfigurationError):
        train(_config(seed=9), small_corpus, state=first.state)


def test_checkpoint_round_trip_is_byte_identical(
    small_corpus: Corpus, temp_dir: Path
) -> None:
    """Test save → load → save reproduces the file exactly."""
    result = train(_config(epochs=1), small_corpus, SMALL_DIMS)
    save_checkpoint(result.state, temp_dir / "a.ckpt")
    loaded = load_checkpoint(temp_dir / "a.ckpt")
    save_checkpoint(loaded, temp_dir / "b.ckpt")

    assert loaded.epoch == 1
    assert loaded.seed == 3
    assert _same_params(result.state, loaded)
    assert (temp_dir / "a.ckpt").read_bytes() == (
        temp_dir / "b.ckpt"
    ).read_bytes()


def test_truncated_checkpoint(small_corpus: Corpus, temp_dir: Path) -> None:
    """Test a cut checkpoint raises CorruptionError."""
    result = train(_config(epochs=0), small_corpus, SMALL_DIMS)
    path = temp_dir / "cut.ckpt"
    save_checkpoint(result.state, path)
    path.write_bytes(path.read_bytes()[:-5])

    with pytest.raises(CorruptionError):
        load_checkpoint(path)


def test_metrics_and_periodic_checkpoints(
    small_corpus: Corpus, temp_dir: Path
) -> None:
    """Test one metrics line per epoch and epoch_k checkpoints."""
    metrics_path = temp_dir / "metrics.tsv"
    result = train(
        _config(epochs=2, checkpoint_every=1),
        small_corpus,
        SMALL_DIMS,
        val_corpus=small_corpus,
        metrics_path=metrics_path,
        checkpoint_dir=temp_dir,
    )

    lines = metrics_path.read_text(encoding="utf-8").splitlines()
    assert lines == [m.to_line() for m in result.metrics]
    assert [line.split("\t")[0] for line in lines] == ["1", "2"]
    assert all(len(line.split("\t")) == 4 for line in lines)
    assert (temp_dir / "epoch_1.ckpt").exists()
    assert load_checkpoint(temp_dir / "epoch_2.ckpt").epoch == 2


def test_metrics_line_without_validation() -> None:
    """Test absent validation columns are left out."""
    assert EpochMetrics(4, 0.25).to_line() == "4\t0.250000"


def test_divergence_is_reported(small_corpus: Corpus) -> None:
    """Test a non-finite loss stops training with its location."""
    with patch(
        "coloc_retrieval.core.trainer.compute_loss",
        return_value=Tensor(float("nan")),
    ):
        with pytest.raises(TrainingDivergedError) as excinfo:
            train(_config(), small_corpus, SMALL_DIMS)

    assert excinfo.value.epoch == 1
    assert excinfo.value.batch == 1


def test_large_seed_survives_a_checkpoint(temp_dir: Path) -> None:
    """Test seeds up to 2**53 load back exactly."""
    model = init_model(0, dims=SMALL_DIMS)
    for seed in (MAX_SEED - 1, MAX_SEED):
        save_checkpoint(
            TrainState.initial(model, seed=seed), temp_dir / "big.ckpt"
        )
        assert load_checkpoint(temp_dir / "big.ckpt").seed == seed

    with pytest.raises(ConfigurationError):
        save_checkpoint(
            TrainState.initial(model, seed=MAX_SEED + 1),
            temp_dir / "lossy.ckpt",
        )


def test_frozen_batch_loss_mostly_falls(small_corpus: Corpus) -> None:
    """Test repeated small steps on one batch rarely raise the loss."""
    cfg = _config(batch_size=8, learning_rate=0.002, momentum=0.9)
    state = TrainState.initial(init_model(0, dims=SMALL_DIMS), seed=0)
    rng = np.random.default_rng(0)
    batch = build_batch(small_corpus, 8, rng)

    losses = [train_step(state, batch, cfg, rng) for _ in range(51)]
    steps = np.diff(losses)

    assert int(np.sum(steps <= 1e-12)) >= 45
    assert losses[-1] < losses[0]
