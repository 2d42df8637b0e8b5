"""Gradient and oracle checks run by ``coloc-retrieval selfcheck``.

Every registered backward rule is compared against central differences at
several random points chosen away from relu kinks and max ties. The full
pipeline loss is checked on a tiny model, and the score and both losses are
compared with loop-based reimplementations.
"""

import logging
import time
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Sequence, Tuple

import numpy as np
import numpy.typing as npt

from ..core import tensor as T
from ..core.coloc import LocalizationSpace, max_image_score
from ..core.corpus import GroundedCaption
from ..core.encoders import ConvSpec, EncoderDims, init_model
from ..core.losses import (
    Batch,
    TripletConfig,
    npair_loss,
    score_matrix,
    triplet_loss,
)
from ..core.tensor import Tensor

logger = logging.getLogger(__name__)

GRAD_TOLERANCE = 1e-4
ORACLE_TOLERANCE = 1e-10

Case = Tuple[Callable[[], Tensor], List[Tensor]]
CaseFactory = Callable[[np.random.Generator], Case]


@dataclass
class CheckResult:
    """Outcome of one named check."""

    name: str
    max_error: float
    tolerance: float
    seconds: float = 0.0
    detail: str = ""

    @property
    def passed(self) -> bool:
        """Whether the error stayed under tolerance."""
        return bool(np.isfinite(self.max_error)) and (
            self.max_error < self.tolerance
        )

    def to_line(self) -> str:
        """Tab-separated report line."""
        status = "ok" if self.passed else "FAIL"
        line = f"{self.name}\t{self.max_error:.3e}\t{status}"
        return f"{line}\t{self.detail}" if self.detail else line


@dataclass
class SelfCheckReport:
    """All check results in execution order."""

    results: List[CheckResult] = field(default_factory=list)

    @property
    def failed(self) -> List[CheckResult]:
        """Checks above tolerance."""
        return [r for r in self.results if not r.passed]

    @property
    def passed(self) -> bool:
        """Whether every check passed."""
        return not self.failed

    @property
    def max_grad_error(self) -> float:
        """Largest error among gradient checks."""
        errors = [
            r.max_error for r in self.results if r.name.startswith("grad:")
        ]
        return max(errors) if errors else 0.0


def _away_from_zero(
    rng: np.random.Generator, shape: Tuple[int, ...]
) -> npt.NDArray[np.float64]:
    signs = np.where(rng.random(shape) < 0.5, -1.0, 1.0)
    return signs * rng.uniform(0.1, 1.0, size=shape)


def _distinct(
    rng: np.random.Generator, shape: Tuple[int, ...]
) -> npt.NDArray[np.float64]:
    count = int(np.prod(shape))
    values = rng.permutation(count) * 0.05 + rng.uniform(-0.01, 0.01, count)
    return values.reshape(shape)


def _weighted(out: Tensor, weights: npt.NDArray[np.float64]) -> Tensor:
    return T.reduce_sum(out * Tensor(weights))


def _unary(
    op: Callable[[Tensor], Tensor], low: float = -1.0, high: float = 1.0
) -> CaseFactory:
    def factory(rng: np.random.Generator) -> Case:
        x = Tensor(rng.uniform(low, high, size=(3, 4)))
        w = rng.normal(size=(3, 4))
        return (lambda: _weighted(op(x), w)), [x]

    return factory


def _binary(op: Callable[[T.Operand, T.Operand], Tensor]) -> CaseFactory:
    def factory(rng: np.random.Generator) -> Case:
        a = Tensor(rng.normal(size=(2, 3)))
        b = Tensor(rng.normal(size=(2, 3)))
        s = Tensor(rng.normal())
        w = rng.normal(size=(2, 3))
        return (lambda: _weighted(op(op(a, b), s), w)), [a, b, s]

    return factory


def _relu_case(rng: np.random.Generator) -> Case:
    x = Tensor(_away_from_zero(rng, (3, 4)))
    w = rng.normal(size=(3, 4))
    return (lambda: _weighted(T.relu(x), w)), [x]


def _matmul_case(rng: np.random.Generator) -> Case:
    a = Tensor(rng.normal(size=(3, 4)))
    b = Tensor(rng.normal(size=(4, 2)))
    w = rng.normal(size=(3, 2))
    return (lambda: _weighted(a @ b, w)), [a, b]


def _transpose_case(rng: np.random.Generator) -> Case:
    x = Tensor(rng.normal(size=(2, 5)))
    w = rng.normal(size=(5, 2))
    return (lambda: _weighted(T.transpose(x), w)), [x]


def _reshape_case(rng: np.random.Generator) -> Case:
    x = Tensor(rng.normal(size=(2, 6)))
    w = rng.normal(size=(3, 2, 2))
    return (lambda: _weighted(T.reshape(x, (3, 2, 2)), w)), [x]


def _reduce_sum_case(rng: np.random.Generator) -> Case:
    x = Tensor(rng.normal(size=(3, 4)))
    w0 = rng.normal(size=(4,))
    w1 = rng.normal(size=(3, 1))

    def f() -> Tensor:
        cols = _weighted(T.reduce_sum(x, axis=0), w0)
        rows = _weighted(T.reduce_sum(x, axis=1, keepdims=True), w1)
        return cols + rows * T.reduce_sum(x)

    return f, [x]


def _gather_case(rng: np.random.Generator) -> Case:
    x = Tensor(rng.normal(size=(3, 3)))
    index = rng.integers(0, 9, size=(2, 4))
    w = rng.normal(size=(2, 4))
    return (lambda: _weighted(T.gather(x, index), w)), [x]


def _concat_case(rng: np.random.Generator) -> Case:
    a = Tensor(rng.normal(size=(2, 3)))
    b = Tensor(rng.normal(size=(1, 3)))
    w = rng.normal(size=(3, 3))
    return (lambda: _weighted(T.concat([a, b]), w)), [a, b]


def _stack_case(rng: np.random.Generator) -> Case:
    a = Tensor(rng.normal(size=(3,)))
    b = Tensor(rng.normal(size=(3,)))
    w = rng.normal(size=(2, 3))
    return (lambda: _weighted(T.stack([a, b]), w)), [a, b]


def _tile_rows_case(rng: np.random.Generator) -> Case:
    x = Tensor(rng.normal(size=(1, 4)))
    w = rng.normal(size=(3, 4))
    return (lambda: _weighted(T.tile_rows(x, 3), w)), [x]


def _max_case(rng: np.random.Generator) -> Case:
    x = Tensor(_distinct(rng, (3, 3, 4)))
    w = rng.normal(size=(4,))
    return (lambda: _weighted(T.max_over_spatial(x), w)), [x]


def _mean_masked_case(rng: np.random.Generator) -> Case:
    x = Tensor(rng.normal(size=(7,)))
    mask = (rng.random(7) < 0.5).astype(np.float64)
    mask[int(rng.integers(7))] = 1.0
    return (lambda: T.mean_masked(x * x, mask)), [x]


def _log_sum_exp_case(rng: np.random.Generator) -> Case:
    x = Tensor(rng.uniform(-5.0, 5.0, size=(6,)))
    return (lambda: T.log_sum_exp(x)), [x]


OP_CASES: Dict[str, CaseFactory] = {
    "add": _binary(T.add),
    "sub": _binary(T.sub),
    "mul": _binary(T.mul),
    "neg": _unary(T.neg),
    "relu": _relu_case,
    "tanh": _unary(T.tanh, -2.0, 2.0),
    "sigmoid": _unary(T.sigmoid, -3.0, 3.0),
    "exp": _unary(T.exp),
    "log": _unary(T.log, 0.5, 2.0),
    "matmul": _matmul_case,
    "transpose": _transpose_case,
    "reshape": _reshape_case,
    "reduce_sum": _reduce_sum_case,
    "gather": _gather_case,
    "concat": _concat_case,
    "stack": _stack_case,
    "tile_rows": _tile_rows_case,
    "max_over_spatial": _max_case,
    "mean_masked": _mean_masked_case,
    "log_sum_exp": _log_sum_exp_case,
}

TINY_DIMS = EncoderDims(
    image_size=(8, 8),
    in_channels=3,
    conv_layers=(ConvSpec(4, 2, 2), ConvSpec(6, 2, 2)),
    embed_dim=5,
    word_dim=4,
    vocab_size=10,
    n_max=4,
)


def tiny_batch(rng: np.random.Generator, size: int = 2) -> Batch:
    """Random images and captions sized for :data:`TINY_DIMS`."""
    height, width = TINY_DIMS.image_size
    captions = []
    for index in range(size):
        length = int(rng.integers(2, TINY_DIMS.n_max + 1))
        captions.append(
            GroundedCaption(
                caption_id=f"c{index}",
                image_id=f"i{index}",
                token_ids=[
                    int(t)
                    for t in rng.integers(1, TINY_DIMS.vocab_size, length)
                ],
                spans=[],
            )
        )
    return Batch(
        images=[
            rng.uniform(0.0, 1.0, size=(height, width, 3))
            for _ in range(size)
        ],
        image_ids=[f"i{index}" for index in range(size)],
        captions=captions,
    )


def check_op(
    name: str, points: int, rng: np.random.Generator, eps: float = 1e-5
) -> CheckResult:
    """Worst grad_check error of one op over ``points`` random inputs."""
    started = time.perf_counter()
    factory = OP_CASES.get(name)
    if factory is None:
        return CheckResult(
            f"grad:{name}", float("inf"), GRAD_TOLERANCE, detail="no check"
        )
    worst = 0.0
    for _ in range(points):
        f, params = factory(rng)
        try:
            worst = max(worst, T.grad_check(f, params, eps))
        except Exception as exc:
            return CheckResult(
                f"grad:{name}", float("inf"), GRAD_TOLERANCE, detail=str(exc)
            )
    return CheckResult(
        f"grad:{name}",
        worst,
        GRAD_TOLERANCE,
        seconds=time.perf_counter() - started,
    )


def check_pipeline(
    rng: np.random.Generator, eps: float = 1e-5
) -> CheckResult:
    """grad_check of the N-pair loss through both encoders."""
    started = time.perf_counter()
    model = init_model(int(rng.integers(2**31)), dims=TINY_DIMS)
    batch = tiny_batch(rng)
    params = list(model.named_parameters().values())
    try:
        error = T.grad_check(
            lambda: npair_loss(score_matrix(batch, model)), params, eps
        )
    except Exception as exc:
        return CheckResult(
            "grad:pipeline", float("inf"), GRAD_TOLERANCE, detail=str(exc)
        )
    return CheckResult(
        "grad:pipeline",
        error,
        GRAD_TOLERANCE,
        seconds=time.perf_counter() - started,
    )


def brute_force_score(
    values: npt.NDArray[np.float64], mask: Sequence[float]
) -> float:
    """Loop form of the MaxImage score."""
    rows, cols, depth = values.shape
    total, count = 0.0, 0
    for d in range(depth):
        if not mask[d]:
            continue
        best = values[0, 0, d]
        for r in range(rows):
            for c in range(cols):
                best = max(best, values[r, c, d])
        total += best
        count += 1
    return total / count


def brute_force_triplet(
    scores: npt.NDArray[np.float64], margin: float
) -> float:
    """Loop form of the hardest-impostor triplet loss."""
    size = scores.shape[0]
    total = 0.0
    for j in range(size):
        best_caption, best_image = None, None
        for i in range(size):
            if i == j:
                continue
            if best_caption is None or scores[j, i] > scores[j, best_caption]:
                best_caption = i
            if best_image is None or scores[i, j] > scores[best_image, j]:
                best_image = i
        assert best_caption is not None and best_image is not None
        total += max(0.0, scores[j, best_caption] - scores[j, j] + margin)
        total += max(0.0, scores[best_image, j] - scores[j, j] + margin)
    return total / size


def naive_npair(scores: npt.NDArray[np.float64]) -> float:
    """Unstabilised softmax form of the N-pair loss."""
    size = scores.shape[0]
    total = 0.0
    for j in range(size):
        positive = np.exp(scores[j, j])
        row = sum(np.exp(scores[j, i]) for i in range(size))
        column = sum(np.exp(scores[i, j]) for i in range(size))
        total -= np.log(positive / row) + np.log(positive / column)
    return float(total / size)


def check_oracles(
    rng: np.random.Generator, instances: int = 100
) -> List[CheckResult]:
    """Score and both losses against their loop oracles."""
    started = time.perf_counter()
    score_error = 0.0
    for _ in range(instances):
        depth = int(rng.integers(1, 6))
        rows, cols = (int(n) for n in rng.integers(1, 8, size=2))
        values = rng.normal(size=(rows, cols, depth))
        mask = np.zeros(depth)
        mask[: int(rng.integers(1, depth + 1))] = 1.0
        space = LocalizationSpace(values=Tensor(values), valid_mask=mask)
        fast = max_image_score(space).item()
        exact = brute_force_score(values, mask)
        score_error = max(score_error, abs(fast - exact))
    score_seconds = time.perf_counter() - started

    started = time.perf_counter()
    triplet_error, npair_error = 0.0, 0.0
    for _ in range(instances):
        size = int(rng.integers(2, 7))
        scores = rng.uniform(-3.0, 3.0, size=(size, size))
        margin = float(rng.uniform(0.0, 1.0))
        fast_triplet = triplet_loss(
            Tensor(scores), TripletConfig(margin=margin)
        ).item()
        triplet_error = max(
            triplet_error,
            abs(fast_triplet - brute_force_triplet(scores, margin)),
        )
        fast_npair = npair_loss(Tensor(scores)).item()
        npair_error = max(npair_error, abs(fast_npair - naive_npair(scores)))
    loss_seconds = time.perf_counter() - started

    return [
        CheckResult(
            "oracle:max_image_score",
            score_error,
            ORACLE_TOLERANCE,
            score_seconds,
        ),
        CheckResult(
            "oracle:triplet_loss",
            triplet_error,
            ORACLE_TOLERANCE,
            loss_seconds / 2,
        ),
        CheckResult(
            "oracle:npair_loss",
            npair_error,
            ORACLE_TOLERANCE,
            loss_seconds / 2,
        ),
    ]


def run_selfcheck(
    points: int = 10, instances: int = 100, seed: int = 0
) -> SelfCheckReport:
    """Every gradient check followed by the oracle suites."""
    rng = np.random.default_rng(seed)
    report = SelfCheckReport()
    for name in sorted(T.backward_rules()):
        result = check_op(name, points, rng)
        logger.debug(result.to_line())
        report.results.append(result)
    report.results.append(check_pipeline(rng))
    report.results.extend(check_oracles(rng, instances))
    for result in report.failed:
        logger.error(f"Check failed: {result.to_line()}")
    logger.info(
        f"Selfcheck: {len(report.results) - len(report.failed)}/"
        f"{len(report.results)} checks passed"
    )
    return report
