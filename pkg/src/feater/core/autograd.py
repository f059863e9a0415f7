"""Minimal tape-based reverse-mode differentiation.

Every kernel in :mod:`feater.core.kernels` computes its forward value with
numpy and, when a :class:`Tape` is active and an input requires a gradient,
appends a node holding a closure that maps the output cotangent to input
cotangents. :meth:`Tape.backward` replays the nodes in reverse.
"""
from __future__ import annotations

import contextvars
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

_ACTIVE_TAPE: contextvars.ContextVar["Tape | None"] = contextvars.ContextVar(
    "feater_tape", default=None
)


class Tensor:
    """A float64 array plus an optional gradient slot."""

    __slots__ = ("data", "grad", "requires_grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data, dtype=np.float64)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
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
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

    # arithmetic sugar delegates to kernels so that it is recorded on the tape
    def __add__(self, other):
        from feater.core import kernels

        return kernels.add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        from feater.core import kernels

        return kernels.sub(self, other)

    def __mul__(self, other):
        from feater.core import kernels

        return kernels.mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        from feater.core import kernels

        return kernels.mul(self, -1.0)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


@dataclass
class _Node:
    output: Tensor
    inputs: tuple[Tensor, ...]
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]


class Tape:
    """Records differentiable operations executed inside ``with Tape():``."""

    def __init__(self):
        self.nodes: list[_Node] = []
        self._token = None

    def __enter__(self) -> "Tape":
        self._token = _ACTIVE_TAPE.set(self)
        return self

    def __exit__(self, *exc) -> None:
        _ACTIVE_TAPE.reset(self._token)
        self._token = None

    def record(self, output: Tensor, inputs: tuple[Tensor, ...], backward) -> None:
        self.nodes.append(_Node(output, inputs, backward))

    def backward(self, loss: Tensor) -> None:
        """Accumulate d(loss)/d(leaf) into ``.grad`` of every leaf requiring grad.

        Leaves are tensors that require a gradient but were not produced by a
        recorded node. Existing ``.grad`` values on leaves are overwritten.
        """
        if loss.size != 1:
            raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
        cot: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        produced = {id(node.output) for node in self.nodes}
        leaves: dict[int, Tensor] = {}
        for node in reversed(self.nodes):
            g = cot.pop(id(node.output), None)
            if g is None:
                continue
            grads = node.backward(g)
            for inp, gi in zip(node.inputs, grads):
                if gi is None or not inp.requires_grad:
                    continue
                key = id(inp)
                if key in cot:
                    cot[key] = cot[key] + gi
                else:
                    cot[key] = gi
                if key not in produced:
                    leaves[key] = inp
        for key, leaf in leaves.items():
            leaf.grad = cot.get(key, np.zeros_like(leaf.data))


def active_tape() -> Tape | None:
    return _ACTIVE_TAPE.get()


def record(output: Tensor, inputs: tuple[Tensor, ...], backward) -> Tensor:
    """Mark ``output`` as differentiable and log it on the active tape, if any."""
    if any(t.requires_grad for t in inputs):
        output.requires_grad = True
        tape = _ACTIVE_TAPE.get()
        if tape is not None:
            tape.record(output, inputs, backward)
    return output
