"""Dense float64 tensors with define-by-run reverse-mode differentiation.

Operations executed inside an active :class:`Tape` are recorded in execution
order; :meth:`Tape.backward` walks that record in reverse. Outside a tape (or
inside :func:`no_grad`) the same operations run without recording.
"""

from __future__ import annotations

import contextvars
from contextlib import contextmanager
from dataclasses import dataclass
from typing import Callable, Iterable, Iterator, Optional, Sequence

import numpy as np

from app.errors import DimensionError, DomainError, GradError

_GELU_C = float(np.sqrt(2.0 / np.pi))

_active_tape: contextvars.ContextVar[Optional["Tape"]] = contextvars.ContextVar(
    "active_tape", default=None
)

BackwardFn = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


class Tensor:
    """
    A dense n-dimensional float64 value with an optional gradient buffer.

    Attributes:
        data: Row-major float64 array.
        requires_grad: Whether backward() accumulates into ``grad``.
        grad: Same-shape float64 buffer, present iff ``requires_grad``.
        name: Optional label used in error messages and checkpoints.
    """

    def __init__(self, data, requires_grad: bool = False, name: str = ""):
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = np.zeros_like(self.data) if requires_grad else None
        self.name = name
        self._node: Optional[_TapeNode] = None

    @classmethod
    def _wrap(cls, data: np.ndarray, requires_grad: bool) -> "Tensor":
        out = cls.__new__(cls)
        out.data = np.asarray(data, dtype=np.float64, order="C")
        out.requires_grad = requires_grad
        out.grad = np.zeros_like(out.data) if requires_grad else None
        out.name = ""
        out._node = None
        return out

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return int(self.data.size)

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        if self.size != 1:
            raise DimensionError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def detach(self) -> "Tensor":
        return Tensor._wrap(self.data.copy(), requires_grad=False)

    def zero_grad(self) -> None:
        if self.grad is not None:
            self.grad.fill(0.0)

    def set_requires_grad(self, flag: bool) -> None:
        self.requires_grad = flag
        self.grad = np.zeros_like(self.data) if flag else None

    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, other)

    def __sub__(self, other: "Tensor") -> "Tensor":
        return sub(self, other)

    def __mul__(self, other) -> "Tensor":
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, float(other))

    __rmul__ = __mul__

    def __neg__(self) -> "Tensor":
        return scale(self, -1.0)

    def __matmul__(self, other: "Tensor") -> "Tensor":
        return matmul(self, other)

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{label})"


@dataclass(eq=False)
class _TapeNode:
    op: str
    output: Tensor
    inputs: tuple[Tensor, ...]
    backward_fn: BackwardFn
    tape: "Tape"


class Tape:
    """Ordered record of the differentiable operations of one forward pass."""

    def __init__(self):
        self.nodes: list[_TapeNode] = []
        self._token: Optional[contextvars.Token] = None

    def __enter__(self) -> "Tape":
        self._token = _active_tape.set(self)
        return self

    def __exit__(self, *exc) -> None:
        _active_tape.reset(self._token)
        self._token = None

    def __len__(self) -> int:
        return len(self.nodes)

    def record(self, op: str, output: Tensor, inputs: tuple[Tensor, ...], backward_fn: BackwardFn) -> None:
        node = _TapeNode(op, output, inputs, backward_fn, self)
        output._node = node
        self.nodes.append(node)

    def backward(self, loss: Tensor) -> None:
        """
        Accumulate d(loss)/d(t) into ``t.grad`` for every reachable tensor.

        Args:
            loss: Single-element tensor produced by an operation on this tape.

        Raises:
            GradError: If the loss is not scalar or was not recorded here.
        """
        if loss.size != 1:
            raise GradError(f"loss must be a scalar, got shape {loss.shape}")
        if loss._node is None or loss._node.tape is not self:
            raise GradError("loss was not produced on this tape")

        reachable: set[int] = set()
        pending = [loss._node]
        while pending:
            node = pending.pop()
            if id(node) in reachable:
                continue
            reachable.add(id(node))
            for parent in node.inputs:
                if parent._node is not None and parent._node.tape is self:
                    pending.append(parent._node)

        loss.grad += 1.0
        for node in reversed(self.nodes):
            if id(node) not in reachable:
                continue
            grads = node.backward_fn(node.output.grad)
            for parent, g in zip(node.inputs, grads):
                if g is not None and parent.requires_grad:
                    parent.grad += g


def backward(tape: Tape, loss: Tensor) -> None:
    tape.backward(loss)


@contextmanager
def no_grad() -> Iterator[None]:
    """Run operations without recording them on any tape."""
    token = _active_tape.set(None)
    try:
        yield
    finally:
        _active_tape.reset(token)


def zero_grad(tensors: Iterable[Tensor]) -> None:
    for t in tensors:
        t.zero_grad()


def _result(op: str, data: np.ndarray, inputs: tuple[Tensor, ...], backward_fn: BackwardFn) -> Tensor:
    tape = _active_tape.get()
    tracked = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor._wrap(data, requires_grad=tracked)
    if tracked:
        tape.record(op, out, inputs, backward_fn)
    return out


def _same_shape(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise DimensionError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


# Linear algebra

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    a_data, b_data = a.data, b.data

    def _backward(g):
        return g @ b_data.T, a_data.T @ g

    return _result("matmul", a_data @ b_data, (a, b), _backward)


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum; ``b`` may also be a bias row added to every row of a 2-d ``a``."""
    if a.shape == b.shape:
        return _result("add", a.data + b.data, (a, b), lambda g: (g, g))
    if a.ndim == 2 and b.ndim == 1 and a.shape[1] == b.shape[0]:
        return _result("add_bias", a.data + b.data, (a, b), lambda g: (g, g.sum(axis=0)))
    raise DimensionError(f"add: shape mismatch {a.shape} vs {b.shape}")


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("sub", a, b)
    return _result("sub", a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("mul", a, b)
    a_data, b_data = a.data, b.data
    return _result("mul", a_data * b_data, (a, b), lambda g: (g * b_data, g * a_data))


def scale(a: Tensor, factor: float) -> Tensor:
    factor = float(factor)
    return _result("scale", a.data * factor, (a,), lambda g: (g * factor,))


# Pointwise nonlinearities

def relu(a: Tensor) -> Tensor:
    # NaN propagates forward; the mask sends no gradient through it
    mask = a.data > 0
    return _result("relu", np.maximum(a.data, 0.0), (a,), lambda g: (g * mask,))


def gelu(a: Tensor) -> Tensor:
    x = a.data
    t = np.tanh(_GELU_C * (x + 0.044715 * x**3))
    out = 0.5 * x * (1.0 + t)

    def _backward(g):
        dt = (1.0 - t**2) * _GELU_C * (1.0 + 3 * 0.044715 * x**2)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * dt),)

    return _result("gelu", out, (a,), _backward)


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _result("exp", out, (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    bad = np.argwhere(~(a.data > 0))
    if bad.size:
        index = tuple(int(i) for i in bad[0])
        raise DomainError(f"log: non-positive value {a.data[index]!r} at index {index}")
    a_data = a.data
    return _result("log", np.log(a_data), (a,), lambda g: (g / a_data,))


def elementwise(op: str, *args) -> Tensor:
    """Dispatch a pointwise operation by name (add, sub, mul, scale, relu, gelu, exp, log)."""
    table = {
        "add": add,
        "sub": sub,
        "mul": mul,
        "scale": scale,
        "relu": relu,
        "gelu": gelu,
        "exp": exp,
        "log": log,
    }
    if op not in table:
        raise ValueError(f"unknown elementwise op {op!r}")
    return table[op](*args)


# Reductions and reshaping

def sum(a: Tensor) -> Tensor:  # noqa: A001 - mirrors numpy naming
    shape = a.shape
    return _result("sum", np.array(a.data.sum()), (a,), lambda g: (np.full(shape, g.item()),))


def mean(a: Tensor) -> Tensor:
    return scale(sum(a), 1.0 / a.size)


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    original = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError as e:
        raise DimensionError(f"reshape: cannot view {original} as {shape}") from e
    return _result("reshape", out, (a,), lambda g: (g.reshape(original),))


def flatten(a: Tensor) -> Tensor:
    """Collapse every dimension after the batch dimension."""
    return reshape(a, (a.shape[0], int(np.prod(a.shape[1:], dtype=np.int64))))


# Row-wise softmax family (2-d inputs, temperature applied inside)

def _check_rows(op: str, a: Tensor, temperature: float) -> None:
    if a.ndim != 2:
        raise DimensionError(f"{op}: expected a 2-d batch of logits, got shape {a.shape}")
    if not temperature > 0:
        raise ValueError(f"{op}: temperature must be positive, got {temperature}")


def _log_softmax_rows(logits: np.ndarray, temperature: float) -> np.ndarray:
    z = logits / temperature
    shifted = z - z.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def softmax(a: Tensor, temperature: float = 1.0) -> Tensor:
    _check_rows("softmax", a, temperature)
    z = a.data / temperature
    e = np.exp(z - z.max(axis=1, keepdims=True))
    p = e / e.sum(axis=1, keepdims=True)

    def _backward(g):
        return (p * (g - (g * p).sum(axis=1, keepdims=True)) / temperature,)

    return _result("softmax", p, (a,), _backward)


def log_softmax(a: Tensor, temperature: float = 1.0) -> Tensor:
    _check_rows("log_softmax", a, temperature)
    out = _log_softmax_rows(a.data, temperature)
    p = np.exp(out)

    def _backward(g):
        return ((g - p * g.sum(axis=1, keepdims=True)) / temperature,)

    return _result("log_softmax", out, (a,), _backward)


def soft_cross_entropy(a: Tensor, target_logits: np.ndarray, temperature: float) -> Tensor:
    """
    Batch-summed KL(softmax(target/T) || softmax(a/T)) as one recorded operation.

    The target side is a plain array and never receives a gradient. The
    gradient w.r.t. ``a`` is (p_a - p_target) / T, exactly zero when both
    logit rows are identical.
    """
    _check_rows("soft_cross_entropy", a, temperature)
    target_logits = np.asarray(target_logits, dtype=np.float64)
    if target_logits.shape != a.shape:
        raise DimensionError(f"soft_cross_entropy: shape mismatch {a.shape} vs {target_logits.shape}")
    log_p = _log_softmax_rows(a.data, temperature)
    log_q = _log_softmax_rows(target_logits, temperature)
    p, q = np.exp(log_p), np.exp(log_q)
    value = np.array((q * (log_q - log_p)).sum())

    def _backward(g):
        return (g.item() * (p - q) / temperature,)

    return _result("soft_cross_entropy", value, (a,), _backward)


# Convolution and pooling (NCHW)

def conv2d(x: Tensor, weight: Tensor, bias: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """
    Direct 2-d convolution with zero padding.

    Args:
        x: Input of shape (batch, in_channels, height, width).
        weight: Kernel of shape (out_channels, in_channels, k, k).
        bias: Per-output-channel bias of shape (out_channels,).
        stride: Step between kernel applications, >= 1.
        padding: Zeros added on every spatial border.
    """
    if x.ndim != 4 or weight.ndim != 4 or x.shape[1] != weight.shape[1]:
        raise DimensionError(f"conv2d: input {x.shape} does not match kernel {weight.shape}")
    if bias.shape != (weight.shape[0],):
        raise DimensionError(f"conv2d: bias {bias.shape} does not match kernel {weight.shape}")
    if stride < 1 or padding < 0:
        raise DimensionError(f"conv2d: invalid stride={stride} padding={padding}")

    batch, _, height, width = x.shape
    out_channels, _, k, _ = weight.shape
    h_out = (height + 2 * padding - k) // stride + 1
    w_out = (width + 2 * padding - k) // stride + 1
    if h_out < 1 or w_out < 1:
        raise DimensionError(f"conv2d: kernel {k} larger than padded input {x.shape}")

    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    w = weight.data
    h_span = stride * (h_out - 1) + 1
    w_span = stride * (w_out - 1) + 1

    out = np.zeros((batch, out_channels, h_out, w_out))
    for i in range(k):
        for j in range(k):
            window = xp[:, :, i:i + h_span:stride, j:j + w_span:stride]
            out += np.einsum("bchw,oc->bohw", window, w[:, :, i, j])
    out += bias.data[None, :, None, None]

    def _backward(g):
        dxp = np.zeros_like(xp)
        dw = np.zeros_like(w)
        for i in range(k):
            for j in range(k):
                window = xp[:, :, i:i + h_span:stride, j:j + w_span:stride]
                dw[:, :, i, j] = np.einsum("bohw,bchw->oc", g, window)
                dxp[:, :, i:i + h_span:stride, j:j + w_span:stride] += np.einsum("bohw,oc->bchw", g, w[:, :, i, j])
        dx = dxp[:, :, padding:padding + height, padding:padding + width]
        return dx, dw, g.sum(axis=(0, 2, 3))

    return _result("conv2d", out, (x, weight, bias), _backward)


def avg_pool2d(x: Tensor, size: int) -> Tensor:
    """Non-overlapping mean pooling over size x size windows; trailing rows/cols are dropped."""
    if x.ndim != 4:
        raise DimensionError(f"avg_pool2d: expected NCHW input, got shape {x.shape}")
    batch, channels, height, width = x.shape
    h_out, w_out = height // size, width // size
    if size < 1 or h_out < 1 or w_out < 1:
        raise DimensionError(f"avg_pool2d: window {size} does not fit input {x.shape}")

    cropped = x.data[:, :, :h_out * size, :w_out * size]
    out = cropped.reshape(batch, channels, h_out, size, w_out, size).mean(axis=(3, 5))
    shape = x.shape

    def _backward(g):
        spread = np.repeat(np.repeat(g, size, axis=2), size, axis=3) / (size * size)
        dx = np.zeros(shape)
        dx[:, :, :h_out * size, :w_out * size] = spread
        return (dx,)

    return _result("avg_pool2d", out, (x,), _backward)
