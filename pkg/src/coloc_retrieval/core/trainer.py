"""SGD-with-momentum training of both branches, with checkpoints."""

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np
import numpy.typing as npt

from ..utils.tensor_file import read_tensors, write_tensors
from .corpus import Corpus
from .encoders import INIT_SCHEMES, ColocModel, EncoderDims, init_model
from .errors import (
    ConfigurationError,
    StateCorruptionError,
    TrainingDivergedError,
    VocabularyError,
)
from .evaluator import Direction, pointing_accuracy, recall_over_folds
from .losses import (
    MINING_STRATEGIES,
    Batch,
    ScoreMatrix,
    TripletConfig,
    epoch_batches,
    npair_loss,
    score_matrix,
    triplet_loss,
)
from .tensor import Tape, Tensor

logger = logging.getLogger(__name__)

LOSS_KINDS = ("npair", "triplet")
VELOCITY_PREFIX = "velocity/"
STATE_PREFIX = "state/"
# Counters are stored as float64, which holds every integer up to 2**53.
MAX_SEED = 2**53

Arrays = Dict[str, npt.NDArray[np.float64]]


@dataclass
class TrainConfig:
    """Optimisation settings."""

    loss_kind: str = "npair"
    batch_size: int = 8
    learning_rate: float = 0.1
    momentum: float = 0.9
    epochs: int = 30
    seed: int = 0
    margin: float = 0.2
    mining: str = "hardest"
    checkpoint_every: int = 0
    init_scheme: str = "lecun_uniform"

    def validate(self) -> None:
        """Raise ConfigurationError for out-of-range settings."""
        if self.loss_kind not in LOSS_KINDS:
            raise ConfigurationError(
                f"Unknown loss: {self.loss_kind}. Supported: {LOSS_KINDS}"
            )
        if self.batch_size < 2:
            raise ConfigurationError("batch_size must be at least 2")
        if self.learning_rate <= 0:
            raise ConfigurationError("learning_rate must be positive")
        if not 0.0 <= self.momentum < 1.0:
            raise ConfigurationError("momentum must lie in [0, 1)")
        if self.epochs < 0:
            raise ConfigurationError("epochs must be non-negative")
        if not 0 <= self.seed <= MAX_SEED:
            raise ConfigurationError(
                f"seed must lie in [0, 2**53], got {self.seed}"
            )
        if self.margin < 0:
            raise ConfigurationError("margin must be non-negative")
        if self.mining not in MINING_STRATEGIES:
            raise ConfigurationError(
                f"Unknown mining: {self.mining}. Supported:"
                f" {MINING_STRATEGIES}"
            )
        if self.checkpoint_every < 0:
            raise ConfigurationError("checkpoint_every must be >= 0")
        if self.init_scheme not in INIT_SCHEMES:
            raise ConfigurationError(
                f"Unknown init scheme: {self.init_scheme}"
            )


@dataclass
class TrainState:
    """Parameters, their velocity buffers and the finished-epoch count."""

    model: ColocModel
    velocities: Arrays
    epoch: int = 0
    seed: int = 0

    @classmethod
    def initial(cls, model: ColocModel, seed: int) -> "TrainState":
        """Fresh state with zero velocities."""
        velocities = {
            name: np.zeros_like(param.data)
            for name, param in model.named_parameters().items()
        }
        return cls(model=model, velocities=velocities, epoch=0, seed=seed)

    def check(self) -> None:
        """Raise StateCorruptionError unless velocities mirror params."""
        params = self.model.named_parameters()
        if set(params) != set(self.velocities):
            missing = sorted(set(params) ^ set(self.velocities))
            raise StateCorruptionError(
                f"Velocity buffers do not match parameters: {missing}"
            )
        for name, param in params.items():
            if self.velocities[name].shape != param.shape:
                raise StateCorruptionError(
                    f"Velocity of {name} has shape"
                    f" {self.velocities[name].shape}, parameter has"
                    f" {param.shape}"
                )


@dataclass
class EpochMetrics:
    """One line of the metrics log."""

    epoch: int
    mean_loss: float
    val_pointing: Optional[float] = None
    val_recall_at_1: Optional[float] = None

    def to_line(self) -> str:
        """Tab-separated form; absent validation values are omitted."""
        fields = [str(self.epoch), f"{self.mean_loss:.6f}"]
        if self.val_pointing is not None:
            fields.append(f"{self.val_pointing:.6f}")
        if self.val_recall_at_1 is not None:
            fields.append(f"{self.val_recall_at_1:.6f}")
        return "\t".join(fields)


@dataclass
class TrainResult:
    """Final state plus the per-epoch log."""

    state: TrainState
    metrics: List[EpochMetrics] = field(default_factory=list)


def sgd_momentum_step(
    state: TrainState,
    grads: Arrays,
    lr: float,
    momentum: float,
) -> TrainState:
    """v ← μ·v + g; p ← p − lr·v, in place."""
    params = state.model.named_parameters()
    if set(grads) != set(params):
        missing = sorted(set(params) - set(grads))
        extra = sorted(set(grads) - set(params))
        raise StateCorruptionError(
            f"Gradients do not cover the parameters (missing {missing},"
            f" unexpected {extra})"
        )
    state.check()
    for name, param in params.items():
        grad = np.asarray(grads[name], dtype=np.float64)
        if grad.shape != param.shape:
            raise StateCorruptionError(
                f"Gradient of {name} has shape {grad.shape}, parameter has"
                f" {param.shape}"
            )
        velocity = momentum * state.velocities[name] + grad
        state.velocities[name] = velocity
        param.data -= lr * velocity
    return state


def compute_loss(
    scores: ScoreMatrix,
    cfg: TrainConfig,
    rng: Optional[np.random.Generator] = None,
) -> Tensor:
    """Loss selected by ``cfg.loss_kind``."""
    if cfg.loss_kind == "npair":
        return npair_loss(scores)
    return triplet_loss(
        scores, TripletConfig(margin=cfg.margin, mining=cfg.mining), rng
    )


def train_step(
    state: TrainState,
    batch: Batch,
    cfg: TrainConfig,
    rng: np.random.Generator,
    epoch: int = 0,
    batch_index: int = 0,
) -> float:
    """Forward, backward and one parameter update on ``batch``."""
    params = state.model.named_parameters()
    with Tape() as tape:
        loss = compute_loss(score_matrix(batch, state.model), cfg, rng)
        value = loss.item()
        if not np.isfinite(value):
            raise TrainingDivergedError(epoch, batch_index, value)
        grads = tape.backward(loss)
    sgd_momentum_step(
        state,
        {name: grads.of(param).data for name, param in params.items()},
        cfg.learning_rate,
        cfg.momentum,
    )
    logger.debug(f"epoch {epoch} batch {batch_index}: loss {value:.6f}")
    return value


def default_dims(corpus: Corpus) -> EncoderDims:
    """Encoder sizes matching a corpus's images and vocabulary."""
    size = corpus.stats.image_size
    return EncoderDims(
        image_size=(size, size),
        vocab_size=len(corpus.vocab),
        n_max=corpus.stats.n_max,
    )


def validate_epoch(
    model: ColocModel, val_corpus: Corpus, fold_size: int = 100
) -> EpochMetrics:
    """Pointing accuracy (word mode) and caption→image R@1."""
    pointing = pointing_accuracy(model, val_corpus)
    recall = recall_over_folds(
        model,
        val_corpus,
        fold_size=min(fold_size, len(val_corpus)),
        n_folds=1,
        k_list=[1],
        direction=Direction.CAPTION_TO_IMAGE,
    )
    return EpochMetrics(
        epoch=0,
        mean_loss=float("nan"),
        val_pointing=pointing.accuracy,
        val_recall_at_1=recall.recalls[1],
    )


def train(
    cfg: TrainConfig,
    corpus: Corpus,
    dims: Optional[EncoderDims] = None,
    state: Optional[TrainState] = None,
    val_corpus: Optional[Corpus] = None,
    metrics_path: Optional[Path] = None,
    checkpoint_dir: Optional[Path] = None,
) -> TrainResult:
    """Train until ``cfg.epochs`` epochs are complete.

    Epoch k shuffles with an rng seeded by (seed, k), so resuming from a
    checkpoint written after epoch k reproduces an uninterrupted run.
    """
    cfg.validate()
    if state is None:
        dims = dims or default_dims(corpus)
        state = TrainState.initial(
            init_model(cfg.seed, cfg.init_scheme, dims), cfg.seed
        )
    elif state.seed != cfg.seed:
        raise ConfigurationError(
            f"Checkpoint was trained with seed {state.seed}, config asks"
            f" for {cfg.seed}"
        )
    state.check()
    if state.model.dims.vocab_size < len(corpus.vocab):
        raise VocabularyError(
            f"Model vocabulary of {state.model.dims.vocab_size} is smaller"
            f" than the corpus vocabulary of {len(corpus.vocab)}"
        )

    result = TrainResult(state=state)
    for epoch in range(state.epoch + 1, cfg.epochs + 1):
        rng = np.random.default_rng([cfg.seed, epoch])
        losses = [
            train_step(state, batch, cfg, rng, epoch, index)
            for index, batch in enumerate(
                epoch_batches(corpus, cfg.batch_size, rng), start=1
            )
        ]
        state.epoch = epoch
        metrics = EpochMetrics(epoch=epoch, mean_loss=float(np.mean(losses)))
        if val_corpus is not None:
            checked = validate_epoch(state.model, val_corpus)
            metrics.val_pointing = checked.val_pointing
            metrics.val_recall_at_1 = checked.val_recall_at_1
        result.metrics.append(metrics)
        logger.info(f"Epoch {epoch}/{cfg.epochs}: {metrics.to_line()}")

        if metrics_path is not None:
            with open(metrics_path, "a", encoding="utf-8") as f:
                f.write(metrics.to_line() + "\n")
        if (
            checkpoint_dir is not None
            and cfg.checkpoint_every
            and epoch % cfg.checkpoint_every == 0
        ):
            path = Path(checkpoint_dir) / f"epoch_{epoch}.ckpt"
            save_checkpoint(state, path)
    return result


def checkpoint_arrays(state: TrainState) -> Arrays:
    """Everything a checkpoint stores, in a fixed order."""
    if not 0 <= state.seed <= MAX_SEED:
        raise ConfigurationError(
            f"seed {state.seed} cannot be stored exactly in a checkpoint"
        )
    arrays = state.model.to_arrays()
    for name in state.model.named_parameters():
        arrays[VELOCITY_PREFIX + name] = state.velocities[name]
    arrays[STATE_PREFIX + "epoch"] = np.asarray(float(state.epoch))
    arrays[STATE_PREFIX + "seed"] = np.asarray(float(state.seed))
    return arrays


def save_checkpoint(state: TrainState, path: Path) -> None:
    """Write parameters, velocities and counters to ``path``."""
    state.check()
    write_tensors(Path(path), checkpoint_arrays(state))
    logger.info(f"Saved checkpoint for epoch {state.epoch} to {path}")


def load_checkpoint(path: Path) -> TrainState:
    """Read a state written by :func:`save_checkpoint`."""
    arrays = read_tensors(Path(path))
    model = ColocModel.from_arrays(arrays)
    velocities = {
        name[len(VELOCITY_PREFIX):]: value
        for name, value in arrays.items()
        if name.startswith(VELOCITY_PREFIX)
    }
    try:
        epoch = int(arrays[STATE_PREFIX + "epoch"])
        seed = int(arrays[STATE_PREFIX + "seed"])
    except KeyError as exc:
        raise StateCorruptionError(f"{path}: missing {exc}") from exc
    state = TrainState(
        model=model, velocities=velocities, epoch=epoch, seed=seed
    )
    state.check()
    logger.debug(f"Loaded checkpoint {path} at epoch {epoch}")
    return state
