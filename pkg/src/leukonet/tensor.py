"""Dense float64 tensors with a recording tape for reverse-mode autodiff.

Operations only record themselves while a :class:`Tape` is active and at
least one input requires a gradient. Outside a tape every op is a plain
numpy computation, which is what evaluation and inference use.
"""

from __future__ import annotations

import logging
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np

logger = logging.getLogger(__name__)

BackwardFn = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


class DimensionError(ValueError):
    """Raised when operand shapes do not conform."""


class ConfigurationError(ValueError):
    """Raised for invalid operator or model configuration."""


class Tensor:
    """A float64 ndarray plus gradient bookkeeping."""

    __slots__ = ("data", "grad", "requires_grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None):
        arr = np.asarray(data, dtype=np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(())
        self.data = np.ascontiguousarray(arr)
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise DimensionError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label}, requires_grad={self.requires_grad})"

    # Arithmetic sugar; the implementations live in functional.
    def __add__(self, other):
        from .functional import add

        return add(self, _as_tensor(other))

    __radd__ = __add__

    def __mul__(self, other):
        from .functional import mul

        return mul(self, _as_tensor(other))

    __rmul__ = __mul__

    def sum(self):
        from .functional import sum as _sum

        return _sum(self)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class _Op:
    __slots__ = ("name", "inputs", "output", "backward")

    def __init__(self, name: str, inputs: Tuple[Tensor, ...], output: Tensor, backward: BackwardFn):
        self.name = name
        self.inputs = inputs
        self.output = output
        self.backward = backward


_active: List["Tape"] = []


class Tape:
    """Ordered record of differentiable operations.

    Use as a context manager; ops executed inside the block are appended in
    execution order, which is already a topological order of the graph.

        with Tape() as tape:
            loss = model_loss(...)
        tape.backward(loss)
    """

    def __init__(self):
        self.ops: List[_Op] = []

    def __enter__(self) -> "Tape":
        _active.append(self)
        return self

    def __exit__(self, *exc) -> None:
        popped = _active.pop()
        assert popped is self

    def __len__(self) -> int:
        return len(self.ops)

    def record(self, name: str, inputs: Tuple[Tensor, ...], output: Tensor, backward: BackwardFn) -> None:
        self.ops.append(_Op(name, inputs, output, backward))

    def backward(self, loss: Tensor, params: Optional[Sequence[Tensor]] = None) -> None:
        backward(loss, self, params)


def current_tape() -> Optional[Tape]:
    return _active[-1] if _active else None


def record(name: str, out_data: np.ndarray, inputs: Tuple[Tensor, ...], backward_fn: BackwardFn) -> Tensor:
    """Wrap ``out_data`` and register the op on the active tape if needed."""
    tape = current_tape()
    needs_grad = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor(out_data, requires_grad=needs_grad)
    if needs_grad:
        tape.record(name, inputs, out, backward_fn)
    return out


def backward(loss: Tensor, tape: Tape, params: Optional[Sequence[Tensor]] = None) -> None:
    """Populate ``.grad`` on every leaf that requires a gradient.

    Leaf gradients accumulate into existing ``.grad`` arrays. Tensors listed
    in ``params`` get a zero gradient first when they have none, so unused
    parameters end up with an explicit zero.
    """
    if loss.size != 1:
        raise DimensionError(f"backward needs a scalar loss, got shape {loss.shape}")
    if len(tape) == 0:
        raise ValueError("backward called on an empty tape")
    if params is not None:
        for p in params:
            if p.grad is None:
                p.grad = np.zeros_like(p.data)

    produced = {id(op.output) for op in tape.ops}
    grads = {id(loss): np.ones_like(loss.data)}
    for op in reversed(tape.ops):
        g_out = grads.pop(id(op.output), None)
        if g_out is None:
            continue
        in_grads = op.backward(g_out)
        for inp, g in zip(op.inputs, in_grads):
            if g is None or not inp.requires_grad:
                continue
            if g.shape != inp.data.shape:
                raise DimensionError(f"{op.name}: gradient shape {g.shape} != input shape {inp.data.shape}")
            key = id(inp)
            if key in produced:
                if key in grads:
                    grads[key] = grads[key] + g
                else:
                    grads[key] = g
            elif inp.grad is None:
                inp.grad = np.array(g, dtype=np.float64, copy=True)
            else:
                inp.grad += g
