"""Tape-based reverse-mode autodiff over float64 numpy arrays.

A ``Tape`` records every differentiable operation performed while it is
active; ``backward`` replays the record in reverse and accumulates gradients
into the parameter tensors that fed the graph.  One tape belongs to one
training step; evaluation code simply runs with no tape active, which keeps
the inference path free of graph nodes.
"""

from __future__ import annotations

from typing import Callable, Optional, Sequence

import numpy as np

from .errors import DetachedGraph, NonFinite, NotScalar

# When true, every recorded op validates its output for NaN/Inf.  Off by
# default; the training loop checks losses and gradient norms instead.
CHECK_FINITE = False

_TAPE_STACK: list["Tape"] = []


def active_tape() -> Optional["Tape"]:
    return _TAPE_STACK[-1] if _TAPE_STACK else None


class no_grad:
    """Masks any active tape: ops inside run as plain array math."""

    def __enter__(self) -> "no_grad":
        _TAPE_STACK.append(None)
        return self

    def __exit__(self, *exc) -> None:
        assert _TAPE_STACK and _TAPE_STACK[-1] is None
        _TAPE_STACK.pop()


class Tensor:
    """N-dimensional float64 array with an optional gradient buffer."""

    __slots__ = ("data", "grad", "requires_grad", "_tape", "_tid")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self._tape: Optional[Tape] = None
        self._tid: Optional[int] = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise NotScalar(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        """Constant copy sharing no graph history."""
        return Tensor(self.data.copy())

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", param" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"


def parameter(data, rng: Optional[np.random.Generator] = None,
              scale: Optional[float] = None) -> Tensor:
    """Trainable leaf tensor.  ``data`` may be a shape tuple, in which case
    values are drawn from ``rng`` as N(0, scale)."""
    if isinstance(data, tuple):
        if rng is None or scale is None:
            raise ValueError("shape-based parameter needs rng and scale")
        data = rng.normal(0.0, scale, size=data)
    return Tensor(data, requires_grad=True)


class _Node:
    __slots__ = ("op", "out_id", "in_ids", "backward")

    def __init__(self, op: str, out_id: int, in_ids: tuple,
                 backward: Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]):
        self.op = op
        self.out_id = out_id
        self.in_ids = in_ids
        self.backward = backward


class Tape:
    """Append-only record of operations; topological by construction."""

    def __init__(self):
        self.nodes: list[_Node] = []
        self._leaves: dict[int, Tensor] = {}
        self._next = 0

    # -- context manager -----------------------------------------------
    def __enter__(self) -> "Tape":
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, *exc) -> None:
        assert _TAPE_STACK and _TAPE_STACK[-1] is self
        _TAPE_STACK.pop()

    # -- graph construction ----------------------------------------------
    def _fresh(self) -> int:
        tid = self._next
        self._next += 1
        return tid

    def live_id(self, t: Tensor) -> Optional[int]:
        """Tape id of ``t`` if it participates in gradient flow here."""
        if t._tape is self and t._tid is not None:
            return t._tid
        if t.requires_grad:
            tid = self._fresh()
            t._tape = self
            t._tid = tid
            self._leaves[tid] = t
            return tid
        return None

    def record(self, op: str, out: Tensor, in_ids: tuple, backward) -> None:
        if CHECK_FINITE and not np.all(np.isfinite(out.data)):
            raise NonFinite(f"op {op} produced non-finite values")
        out._tape = self
        out._tid = self._fresh()
        self.nodes.append(_Node(op, out._tid, in_ids, backward))

    def clear(self) -> None:
        self.nodes.clear()
        self._leaves.clear()


def backward(loss: Tensor) -> None:
    """Reverse sweep from ``loss``; accumulates into parameter ``.grad``.

    Parameters never touched by the graph keep their gradient buffer as-is
    (``None`` counts as zero everywhere downstream).
    """
    if loss.data.size != 1:
        raise NotScalar(f"backward needs a scalar loss, got shape {loss.shape}")
    tape = loss._tape
    if tape is None or loss._tid is None:
        raise DetachedGraph("loss is not on any tape")
    if loss._tid in tape._leaves:
        raise DetachedGraph("loss is a leaf, not produced by tape ops")
    if not np.isfinite(loss.data.reshape(())):
        raise NonFinite("loss is not finite")

    grads: dict[int, np.ndarray] = {loss._tid: np.ones_like(loss.data)}
    for node in reversed(tape.nodes):
        g = grads.pop(node.out_id, None)
        if g is None:
            continue
        in_grads = node.backward(g)
        for tid, gi in zip(node.in_ids, in_grads):
            if tid is None or gi is None:
                continue
            acc = grads.get(tid)
            grads[tid] = gi if acc is None else acc + gi

    for tid, leaf in tape._leaves.items():
        g = grads.get(tid)
        if g is None:
            continue
        g = g.reshape(leaf.data.shape)
        leaf.grad = g.copy() if leaf.grad is None else leaf.grad + g


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``g`` down to ``shape`` (inverse of numpy broadcasting)."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


def apply_op(op: str, out_data: np.ndarray, operands: Sequence[Tensor],
             backward_fn) -> Tensor:
    """Record ``op`` on the active tape if any operand is gradient-relevant.

    ``backward_fn(g)`` must return per-operand gradients in operand order
    (``None`` for operands that need none).
    """
    out = Tensor(out_data)
    tape = active_tape()
    if tape is None:
        return out
    ids = tuple(tape.live_id(t) for t in operands)
    if all(i is None for i in ids):
        return out
    tape.record(op, out, ids, backward_fn)
    return out
