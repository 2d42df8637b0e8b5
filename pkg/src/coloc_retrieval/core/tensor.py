"""Dense float64 tensors with tape-based reverse-mode differentiation.

Operations run eagerly on numpy arrays. When a :class:`Tape` is active on
the current thread and at least one input requires a gradient, the
operation is appended to the tape together with the context its backward
rule needs. :meth:`Tape.backward` then walks the recorded operations in
exact reverse order.

Backward rules live in a registry keyed by operation name so that the
verification harness can exercise (and tests can fault-inject) each rule
independently.

Broadcasting is limited to a scalar combined with a tensor; every other
shape combination must match exactly.
"""

import logging
import os
import threading
from dataclasses import dataclass
from typing import (
    Any,
    Callable,
    Dict,
    List,
    Optional,
    Sequence,
    Tuple,
    Union,
)

import numpy as np
import numpy.typing as npt

from .errors import (
    DomainError,
    EmptyCaptionError,
    NumericalError,
    RankError,
    ShapeError,
    TapeError,
)

logger = logging.getLogger(__name__)

Array = npt.NDArray[np.float64]
Shape = Tuple[int, ...]
Operand = Union["Tensor", float, int]
Ctx = Dict[str, Any]
Grads = Tuple[Optional[Array], ...]
BackwardRule = Callable[[Array, Ctx], Grads]

ELEMENTWISE_KINDS = (
    "relu",
    "tanh",
    "sigmoid",
    "exp",
    "log",
    "neg",
    "add",
    "sub",
    "mul",
)

_debug = os.environ.get("COLOC_DEBUG", "") not in ("", "0")
_local = threading.local()
_BACKWARD_RULES: Dict[str, BackwardRule] = {}


def set_debug(enabled: bool) -> None:
    """Enable or disable NaN/Inf checks on every forward value."""
    global _debug
    _debug = enabled


def debug_enabled() -> bool:
    """Return whether forward values are checked for NaN/Inf."""
    return _debug


class Tensor:
    """A dense row-major float64 array that may take part in a tape."""

    __slots__ = ("data", "requires_grad", "node_id", "_tape")

    def __init__(self, data: Any, requires_grad: bool = False):
        """Create a tensor holding a float64 copy of ``data``."""
        array = np.array(data, dtype=np.float64, order="C")
        if any(dim <= 0 for dim in array.shape):
            raise ShapeError("tensor", array.shape, detail="empty dimension")
        self.data: Array = array
        self.requires_grad = requires_grad
        self.node_id: Optional[int] = None
        self._tape: Optional["Tape"] = None

    @classmethod
    def _wrap(cls, value: Any, requires_grad: bool = False) -> "Tensor":
        """Wrap an operation result without copying it."""
        out = cls.__new__(cls)
        out.data = np.asarray(value, dtype=np.float64, order="C")
        out.requires_grad = requires_grad
        out.node_id = None
        out._tape = None
        return out

    @property
    def shape(self) -> Shape:
        """Dimension sizes."""
        return tuple(self.data.shape)

    @property
    def ndim(self) -> int:
        """Rank of the tensor."""
        return int(self.data.ndim)

    @property
    def size(self) -> int:
        """Number of elements."""
        return int(self.data.size)

    def item(self) -> float:
        """Return the single value of a one-element tensor."""
        if self.data.size != 1:
            raise RankError("item", self.shape, detail="expected one element")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> Array:
        """Return a copy of the underlying array."""
        return self.data.copy()

    def detach(self) -> "Tensor":
        """Return a constant copy that never records on a tape."""
        return Tensor(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={list(self.shape)}{flag})"

    def __add__(self, other: Operand) -> "Tensor":
        return add(self, other)

    def __radd__(self, other: Operand) -> "Tensor":
        return add(other, self)

    def __sub__(self, other: Operand) -> "Tensor":
        return sub(self, other)

    def __rsub__(self, other: Operand) -> "Tensor":
        return sub(other, self)

    def __mul__(self, other: Operand) -> "Tensor":
        return mul(self, other)

    def __rmul__(self, other: Operand) -> "Tensor":
        return mul(other, self)

    def __neg__(self) -> "Tensor":
        return neg(self)

    def __matmul__(self, other: "Tensor") -> "Tensor":
        return matmul(self, other)


@dataclass
class Operation:
    """One recorded forward operation."""

    name: str
    inputs: Tuple[Optional[int], ...]
    output: int
    ctx: Dict[str, Any]


class GradientMap(Dict[int, Tensor]):
    """Gradients keyed by node id, as returned by :meth:`Tape.backward`."""

    def __init__(self, tape: "Tape"):
        super().__init__()
        self.tape = tape

    def of(self, tensor: Tensor) -> Tensor:
        """Gradient of ``tensor``; zeros if it did not reach the loss."""
        if tensor._tape is self.tape and tensor.node_id in self:
            return self[tensor.node_id]
        return Tensor._wrap(np.zeros_like(tensor.data))


class Tape:
    """An ordered record of differentiable operations.

    Use as a context manager; tapes nest per thread and independent
    threads may each run their own tape concurrently.
    """

    def __init__(self) -> None:
        self.operations: List[Operation] = []
        self._shapes: List[Shape] = []
        self._leaves: Dict[int, Tensor] = {}

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(
        self, exc_type: type, exc_val: Exception, exc_tb: object
    ) -> None:
        stack = _tape_stack()
        if stack and stack[-1] is self:
            stack.pop()

    def __len__(self) -> int:
        return len(self.operations)

    def _new_node(self, tensor: Tensor) -> int:
        node_id = len(self._shapes)
        self._shapes.append(tensor.shape)
        tensor.node_id = node_id
        tensor._tape = self
        return node_id

    def watch(self, tensor: Tensor) -> int:
        """Register a leaf tensor and return its node id on this tape."""
        if tensor._tape is self and tensor.node_id is not None:
            return tensor.node_id
        node_id = self._new_node(tensor)
        self._leaves[node_id] = tensor
        return node_id

    def tracks(self, tensor: Tensor) -> bool:
        """Whether ``tensor`` is a node of this tape."""
        return tensor._tape is self and tensor.node_id is not None

    def record(
        self,
        name: str,
        inputs: Sequence[Tensor],
        output: Tensor,
        ctx: Dict[str, Any],
    ) -> None:
        """Append an operation; constant inputs get no node."""
        input_ids: List[Optional[int]] = []
        for tensor in inputs:
            if self.tracks(tensor):
                input_ids.append(tensor.node_id)
            elif tensor.requires_grad:
                input_ids.append(self.watch(tensor))
            else:
                input_ids.append(None)
        output_id = self._new_node(output)
        self.operations.append(
            Operation(name, tuple(input_ids), output_id, ctx)
        )

    def backward(self, loss: Tensor) -> GradientMap:
        """Propagate d(loss)/d(node) back to every watched leaf."""
        if loss.shape != ():
            raise RankError("backward", loss.shape, detail="loss not scalar")
        if not self.tracks(loss):
            if not loss.requires_grad:
                raise TapeError("Loss is not recorded on this tape")
            self.watch(loss)
        assert loss.node_id is not None

        grads: Dict[int, Array] = {loss.node_id: np.ones(())}
        for op in reversed(self.operations):
            upstream = grads.get(op.output)
            if upstream is None:
                continue
            if op.output not in self._leaves and op.output != loss.node_id:
                del grads[op.output]
            rule = _BACKWARD_RULES[op.name]
            input_grads = rule(upstream, op.ctx)
            for node_id, grad in zip(op.inputs, input_grads):
                if node_id is None or grad is None:
                    continue
                grad = np.asarray(grad, dtype=np.float64)
                if grad.shape != self._shapes[node_id]:
                    raise ShapeError(
                        f"backward[{op.name}]",
                        grad.shape,
                        self._shapes[node_id],
                    )
                if node_id in grads:
                    grads[node_id] = grads[node_id] + grad
                else:
                    grads[node_id] = grad

        result = GradientMap(self)
        for node_id, leaf in self._leaves.items():
            grad = grads.get(node_id)
            if grad is None:
                grad = np.zeros(self._shapes[node_id])
            result[node_id] = Tensor._wrap(grad)
        result[loss.node_id] = Tensor._wrap(grads[loss.node_id])
        return result


def _tape_stack() -> List[Tape]:
    stack: Optional[List[Tape]] = getattr(_local, "stack", None)
    if stack is None:
        stack = []
        _local.stack = stack
    return stack


def active_tape() -> Optional[Tape]:
    """The innermost tape entered on this thread, if any."""
    stack = _tape_stack()
    return stack[-1] if stack else None


def backward(loss: Tensor, tape: Optional[Tape] = None) -> GradientMap:
    """Run reverse-mode differentiation of ``loss`` on its tape."""
    target = tape or loss._tape or active_tape()
    if target is None:
        raise TapeError("backward() needs an active tape")
    return target.backward(loss)


def register_backward(name: str) -> Callable[[BackwardRule], BackwardRule]:
    """Decorator registering the backward rule of operation ``name``."""

    def decorator(rule: BackwardRule) -> BackwardRule:
        _BACKWARD_RULES[name] = rule
        return rule

    return decorator


def backward_rules() -> Dict[str, BackwardRule]:
    """The live backward-rule registry."""
    return _BACKWARD_RULES


def as_tensor(value: Operand) -> Tensor:
    """Promote a Python number to a constant scalar tensor."""
    if isinstance(value, Tensor):
        return value
    return Tensor._wrap(np.asarray(float(value)))


def _result(
    name: str, inputs: Sequence[Tensor], value: Any, **ctx: Any
) -> Tensor:
    value = np.asarray(value, dtype=np.float64)
    if _debug and not np.all(np.isfinite(value)):
        raise NumericalError(f"{name}: forward value is NaN or infinite")
    tape = active_tape()
    tracked = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor._wrap(value, requires_grad=tracked)
    if tape is not None and tracked:
        tape.record(name, inputs, out, ctx)
    return out


def _check_binary(name: str, a: Tensor, b: Tensor) -> None:
    if a.shape == b.shape or a.shape == () or b.shape == ():
        return
    raise ShapeError(name, a.shape, b.shape, detail="only scalar broadcasts")


def _unbroadcast(grad: Array, shape: Shape) -> Array:
    if grad.shape == shape:
        return grad
    return np.asarray(grad.sum())


def _require_rank(name: str, t: Tensor, rank: int) -> None:
    if t.ndim != rank:
        raise RankError(name, t.shape, detail=f"expected rank {rank}")


# -- elementwise ------------------------------------------------------------


def add(a: Operand, b: Operand) -> Tensor:
    """Elementwise sum."""
    a, b = as_tensor(a), as_tensor(b)
    _check_binary("add", a, b)
    return _result(
        "add", (a, b), a.data + b.data, a_shape=a.shape, b_shape=b.shape
    )


@register_backward("add")
def _add_backward(g: Array, ctx: Ctx) -> Grads:
    return _unbroadcast(g, ctx["a_shape"]), _unbroadcast(g, ctx["b_shape"])


def sub(a: Operand, b: Operand) -> Tensor:
    """Elementwise difference."""
    a, b = as_tensor(a), as_tensor(b)
    _check_binary("sub", a, b)
    return _result(
        "sub", (a, b), a.data - b.data, a_shape=a.shape, b_shape=b.shape
    )


@register_backward("sub")
def _sub_backward(g: Array, ctx: Ctx) -> Grads:
    return _unbroadcast(g, ctx["a_shape"]), _unbroadcast(-g, ctx["b_shape"])


def mul(a: Operand, b: Operand) -> Tensor:
    """Elementwise product."""
    a, b = as_tensor(a), as_tensor(b)
    _check_binary("mul", a, b)
    return _result("mul", (a, b), a.data * b.data, a=a.data, b=b.data)


@register_backward("mul")
def _mul_backward(g: Array, ctx: Ctx) -> Grads:
    a, b = ctx["a"], ctx["b"]
    return _unbroadcast(g * b, a.shape), _unbroadcast(g * a, b.shape)


def neg(t: Tensor) -> Tensor:
    """Elementwise negation."""
    return _result("neg", (t,), -t.data)


@register_backward("neg")
def _neg_backward(g: Array, ctx: Ctx) -> Grads:
    return (-g,)


def relu(t: Tensor) -> Tensor:
    """Rectified linear unit; the subgradient at zero is zero."""
    return _result("relu", (t,), np.maximum(t.data, 0.0), x=t.data)


@register_backward("relu")
def _relu_backward(g: Array, ctx: Ctx) -> Grads:
    return (g * (ctx["x"] > 0.0),)


def tanh(t: Tensor) -> Tensor:
    """Hyperbolic tangent."""
    y = np.tanh(t.data)
    return _result("tanh", (t,), y, y=y)


@register_backward("tanh")
def _tanh_backward(g: Array, ctx: Ctx) -> Grads:
    y = ctx["y"]
    return (g * (1.0 - y * y),)


def sigmoid(t: Tensor) -> Tensor:
    """Logistic function, evaluated through tanh to avoid overflow."""
    y = 0.5 * (1.0 + np.tanh(0.5 * t.data))
    return _result("sigmoid", (t,), y, y=y)


@register_backward("sigmoid")
def _sigmoid_backward(g: Array, ctx: Ctx) -> Grads:
    y = ctx["y"]
    return (g * y * (1.0 - y),)


def exp(t: Tensor) -> Tensor:
    """Elementwise exponential."""
    y = np.exp(t.data)
    return _result("exp", (t,), y, y=y)


@register_backward("exp")
def _exp_backward(g: Array, ctx: Ctx) -> Grads:
    return (g * ctx["y"],)


def log(t: Tensor) -> Tensor:
    """Natural logarithm; non-positive entries raise DomainError."""
    if np.any(t.data <= 0.0):
        raise DomainError("log: input has non-positive entries")
    return _result("log", (t,), np.log(t.data), x=t.data)


@register_backward("log")
def _log_backward(g: Array, ctx: Ctx) -> Grads:
    return (g / ctx["x"],)


_UNARY: Dict[str, Callable[[Tensor], Tensor]] = {
    "relu": relu,
    "tanh": tanh,
    "sigmoid": sigmoid,
    "exp": exp,
    "log": log,
    "neg": neg,
}
_BINARY: Dict[str, Callable[[Operand, Operand], Tensor]] = {
    "add": add,
    "sub": sub,
    "mul": mul,
}


def elementwise(kind: str, *args: Operand) -> Tensor:
    """Dispatch one of :data:`ELEMENTWISE_KINDS` by name."""
    if kind in _UNARY:
        if len(args) != 1:
            raise ValueError(f"{kind} takes one argument, got {len(args)}")
        return _UNARY[kind](as_tensor(args[0]))
    if kind in _BINARY:
        if len(args) != 2:
            raise ValueError(f"{kind} takes two arguments, got {len(args)}")
        return _BINARY[kind](args[0], args[1])
    raise ValueError(
        f"Unknown elementwise kind: {kind}. Supported: {ELEMENTWISE_KINDS}"
    )


# -- linear algebra and shape plumbing --------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product of an m×k and a k×n tensor."""
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError("matmul", a.shape, b.shape)
    return _result("matmul", (a, b), a.data @ b.data, a=a.data, b=b.data)


@register_backward("matmul")
def _matmul_backward(g: Array, ctx: Ctx) -> Grads:
    a, b = ctx["a"], ctx["b"]
    return g @ b.T, a.T @ g


def transpose(t: Tensor) -> Tensor:
    """Transpose of a matrix."""
    _require_rank("transpose", t, 2)
    return _result("transpose", (t,), t.data.T)


@register_backward("transpose")
def _transpose_backward(g: Array, ctx: Ctx) -> Grads:
    return (g.T,)


def reshape(t: Tensor, shape: Sequence[int]) -> Tensor:
    """View the same values under a new shape."""
    target = tuple(int(d) for d in shape)
    if int(np.prod(target)) != t.size:
        raise ShapeError("reshape", t.shape, target)
    return _result("reshape", (t,), t.data.reshape(target), shape=t.shape)


@register_backward("reshape")
def _reshape_backward(g: Array, ctx: Ctx) -> Grads:
    return (g.reshape(ctx["shape"]),)


def reduce_sum(
    t: Tensor, axis: Optional[int] = None, keepdims: bool = False
) -> Tensor:
    """Sum of all entries, or along one axis."""
    if axis is not None and not -t.ndim <= axis < t.ndim:
        raise RankError("reduce_sum", t.shape, detail=f"no axis {axis}")
    value = t.data.sum(axis=axis, keepdims=keepdims)
    return _result(
        "reduce_sum", (t,), value, shape=t.shape, axis=axis, keepdims=keepdims
    )


@register_backward("reduce_sum")
def _reduce_sum_backward(g: Array, ctx: Ctx) -> Grads:
    axis = ctx["axis"]
    if axis is not None and not ctx["keepdims"]:
        g = np.expand_dims(g, axis)
    return (np.broadcast_to(g, ctx["shape"]).copy(),)


def gather(t: Tensor, index: npt.ArrayLike) -> Tensor:
    """Pick flat (row-major) entries of ``t``; the result has index's shape.

    The backward rule scatter-adds, so repeated indices accumulate.
    """
    flat_index = np.asarray(index, dtype=np.int64)
    if flat_index.size == 0:
        raise ShapeError("gather", t.shape, flat_index.shape, "empty index")
    if flat_index.min() < 0 or flat_index.max() >= t.size:
        raise ShapeError(
            "gather", t.shape, flat_index.shape, "index out of range"
        )
    value = t.data.reshape(-1)[flat_index]
    return _result("gather", (t,), value, shape=t.shape, index=flat_index)


@register_backward("gather")
def _gather_backward(g: Array, ctx: Ctx) -> Grads:
    shape = ctx["shape"]
    out = np.zeros(int(np.prod(shape)))
    np.add.at(out, ctx["index"].reshape(-1), g.reshape(-1))
    return (out.reshape(shape),)


def take_rows(t: Tensor, rows: Sequence[int]) -> Tensor:
    """Select rows of a matrix by position."""
    _require_rank("take_rows", t, 2)
    width = t.shape[1]
    row_index = np.asarray(rows, dtype=np.int64).reshape(-1, 1)
    if row_index.size and (
        row_index.min() < 0 or row_index.max() >= t.shape[0]
    ):
        raise ShapeError("take_rows", t.shape, row_index.shape, "bad row")
    return gather(t, row_index * width + np.arange(width))


def concat(tensors: Sequence[Tensor]) -> Tensor:
    """Concatenate along the first axis."""
    if not tensors:
        raise ShapeError("concat", (), detail="nothing to concatenate")
    tail = tensors[0].shape[1:]
    for t in tensors[1:]:
        if t.ndim == 0 or t.shape[1:] != tail:
            raise ShapeError("concat", tensors[0].shape, t.shape)
    sizes = [t.shape[0] for t in tensors]
    value = np.concatenate([t.data for t in tensors], axis=0)
    return _result("concat", tuple(tensors), value, sizes=sizes)


@register_backward("concat")
def _concat_backward(g: Array, ctx: Ctx) -> Grads:
    bounds = np.cumsum(ctx["sizes"])[:-1]
    return tuple(np.split(g, bounds, axis=0))


def stack(tensors: Sequence[Tensor]) -> Tensor:
    """Stack equally shaped tensors along a new first axis."""
    if not tensors:
        raise ShapeError("stack", (), detail="nothing to stack")
    first = tensors[0].shape
    for t in tensors[1:]:
        if t.shape != first:
            raise ShapeError("stack", first, t.shape)
    value = np.stack([t.data for t in tensors], axis=0)
    return _result("stack", tuple(tensors), value, count=len(tensors))


@register_backward("stack")
def _stack_backward(g: Array, ctx: Ctx) -> Grads:
    return tuple(g[i] for i in range(ctx["count"]))


def tile_rows(t: Tensor, count: int) -> Tensor:
    """Repeat a 1×n row ``count`` times into a count×n matrix."""
    if t.ndim != 2 or t.shape[0] != 1:
        raise ShapeError("tile_rows", t.shape, detail="expected a 1×n row")
    if count <= 0:
        raise ShapeError("tile_rows", t.shape, detail=f"count={count}")
    return _result("tile_rows", (t,), np.repeat(t.data, count, axis=0))


@register_backward("tile_rows")
def _tile_rows_backward(g: Array, ctx: Ctx) -> Grads:
    return (g.sum(axis=0, keepdims=True),)


# -- reductions used by the similarity score and the losses -----------------


def max_over_spatial(t: Tensor) -> Tensor:
    """Per-slice maximum over the two leading (spatial) axes.

    For an R×C×D input returns the D maxima. The gradient of each slice
    goes to a single position, the first maximum in row-major order.
    """
    _require_rank("max_over_spatial", t, 3)
    rows, cols, depth = t.shape
    flat = t.data.reshape(rows * cols, depth)
    argmax = np.argmax(flat, axis=0)
    value = flat[argmax, np.arange(depth)]
    return _result(
        "max_over_spatial", (t,), value, shape=t.shape, argmax=argmax
    )


@register_backward("max_over_spatial")
def _max_over_spatial_backward(g: Array, ctx: Ctx) -> Grads:
    rows, cols, depth = ctx["shape"]
    grad = np.zeros((rows * cols, depth))
    grad[ctx["argmax"], np.arange(depth)] = g
    return (grad.reshape(ctx["shape"]),)


def mean_masked(t: Tensor, mask: Union[Tensor, npt.ArrayLike]) -> Tensor:
    """Mean of the entries of a vector where ``mask`` is one."""
    _require_rank("mean_masked", t, 1)
    mask_data = mask.data if isinstance(mask, Tensor) else np.asarray(mask)
    mask_data = np.asarray(mask_data, dtype=np.float64)
    if mask_data.shape != t.shape:
        raise ShapeError("mean_masked", t.shape, mask_data.shape)
    if not np.all((mask_data == 0.0) | (mask_data == 1.0)):
        raise ValueError("mean_masked: mask must hold only 0 and 1")
    count = float(mask_data.sum())
    if count == 0.0:
        raise EmptyCaptionError("mean_masked: mask selects no token")
    value = float((t.data * mask_data).sum()) / count
    return _result("mean_masked", (t,), value, mask=mask_data, count=count)


@register_backward("mean_masked")
def _mean_masked_backward(g: Array, ctx: Ctx) -> Grads:
    return (g * ctx["mask"] / ctx["count"],)


def log_sum_exp(t: Tensor) -> Tensor:
    """Shift-stabilised log(Σ exp(t)) of a vector."""
    _require_rank("log_sum_exp", t, 1)
    peak = float(t.data.max())
    shifted = np.exp(t.data - peak)
    total = float(shifted.sum())
    value = peak + float(np.log(total))
    return _result("log_sum_exp", (t,), value, softmax=shifted / total)


@register_backward("log_sum_exp")
def _log_sum_exp_backward(g: Array, ctx: Ctx) -> Grads:
    return (g * ctx["softmax"],)


# -- verification ------------------------------------------------------------


def grad_check(
    f: Callable[[], Tensor], params: Sequence[Tensor], eps: float = 1e-5
) -> float:
    """Compare tape gradients of ``f`` against central differences.

    ``f`` must rebuild its scalar output from the current values of
    ``params`` on every call. Returns the largest
    ``|analytic - numeric| / max(|analytic|, |numeric|, 1e-8)`` over every
    entry of every parameter.
    """
    if not 0.0 < eps <= 1e-3:
        raise ValueError(f"grad_check step must lie in (0, 1e-3], got {eps}")
    for param in params:
        param.requires_grad = True

    with Tape() as tape:
        loss = f()
        if loss.shape != ():
            raise RankError("grad_check", loss.shape, detail="not scalar")
        if tape.tracks(loss):
            grads = tape.backward(loss)
            analytic = [grads.of(p).data for p in params]
        else:
            analytic = [np.zeros_like(p.data) for p in params]

    worst = 0.0
    for param, exact in zip(params, analytic):
        flat = param.data.reshape(-1)
        exact_flat = exact.reshape(-1)
        for i in range(flat.size):
            original = flat[i]
            flat[i] = original + eps
            upper = f().item()
            flat[i] = original - eps
            lower = f().item()
            flat[i] = original
            numeric = (upper - lower) / (2.0 * eps)
            a = float(exact_flat[i])
            error = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
            worst = max(worst, error)
    logger.debug(f"grad_check over {len(params)} tensor(s): {worst:.3e}")
    return worst
