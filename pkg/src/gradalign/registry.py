"""Named parameter registry with per-component gradient accounting."""

from __future__ import annotations

from enum import Enum
from typing import Iterator, Optional

import numpy as np

from .errors import MissingGrad, UnknownComponent
from .tensor import Tensor


class Component(str, Enum):
    BACKBONE = "backbone"
    AIFI = "aifi"
    CCFF = "ccff"
    DECODER = "decoder"
    PROJECTOR = "projector"


# The four components whose gradient norms feed the ratio controller; the
# projector is trained but deliberately left out of the controller's total.
RATIO_COMPONENTS = (Component.BACKBONE, Component.AIFI,
                    Component.CCFF, Component.DECODER)


def _as_component(c) -> Component:
    if isinstance(c, Component):
        return c
    try:
        return Component(str(c).lower())
    except ValueError:
        raise UnknownComponent(f"unknown component {c!r}") from None


class ParameterRegistry:
    """Ordered map of dot-separated parameter names to (tensor, component).

    Iteration order is insertion order; models register parameters grouped
    by component so that grouped and flat L1 sums associate identically.
    """

    def __init__(self):
        self._entries: dict[str, tuple[Tensor, Component]] = {}

    def register(self, name: str, tensor: Tensor, component) -> None:
        if name in self._entries:
            raise ValueError(f"duplicate parameter name {name!r}")
        if not tensor.requires_grad:
            raise ValueError(f"parameter {name!r} must require grad")
        self._entries[name] = (tensor, _as_component(component))

    def __len__(self) -> int:
        return len(self._entries)

    def __contains__(self, name: str) -> bool:
        return name in self._entries

    def __iter__(self) -> Iterator[tuple[str, Tensor, Component]]:
        for name, (t, c) in self._entries.items():
            yield name, t, c

    def get(self, name: str) -> Tensor:
        return self._entries[name][0]

    def component_of(self, name: str) -> Component:
        return self._entries[name][1]

    def n_values(self) -> int:
        return sum(t.size for _, t, _ in self)

    def zero_grads(self) -> None:
        for _, t, _ in self:
            t.grad = None

    def ensure_grads(self) -> None:
        """Zero-fill gradient buffers of parameters the last backward never
        reached, so downstream accounting sees explicit zeros."""
        for _, t, _ in self:
            if t.grad is None:
                t.grad = np.zeros_like(t.data)

    # -- gradient accounting -------------------------------------------------

    def component_grad_l1(self, component) -> float:
        """Sum of |g| over every gradient element tagged with ``component``.

        Parameters with an absent gradient contribute 0.  Accumulation walks
        the registry in insertion order with plain left-to-right addition.
        """
        component = _as_component(component)
        total = 0.0
        for _, t, c in self:
            if c is component and t.grad is not None:
                total += float(np.abs(t.grad).sum())
        return total

    def grad_l1_by_component(self) -> dict[Component, float]:
        out = {c: 0.0 for c in Component}
        for _, t, c in self:
            if t.grad is not None:
                out[c] += float(np.abs(t.grad).sum())
        return out

    def total_grad_l1(self) -> float:
        """L1 norm over all registry parameters, accumulated per component
        and then across components in declaration order -- the same
        association ``sum(component_grad_l1(c) for c in Component)`` uses,
        so the accounting closure is exact rather than within-epsilon."""
        buckets = self.grad_l1_by_component()
        total = 0.0
        for c in Component:
            total += buckets[c]
        return total


class Sgd:
    def __init__(self, registry: ParameterRegistry, lr: float, strict: bool = False):
        self.registry = registry
        self.lr = float(lr)
        self.strict = strict

    def step(self) -> None:
        for name, t, _ in self.registry:
            if t.grad is None:
                if self.strict:
                    raise MissingGrad(f"no gradient for {name!r}")
                continue
            t.data -= self.lr * t.grad


class Adam:
    """Adam with bias correction; beta1=0.9, beta2=0.999, eps=1e-8."""

    def __init__(self, registry: ParameterRegistry, lr: float,
                 strict: bool = False):
        self.registry = registry
        self.lr = float(lr)
        self.strict = strict
        self.beta1 = 0.9
        self.beta2 = 0.999
        self.eps = 1e-8
        self._state: dict[str, tuple[np.ndarray, np.ndarray, int]] = {}

    def step(self) -> None:
        for name, t, _ in self.registry:
            g = t.grad
            if g is None:
                if self.strict:
                    raise MissingGrad(f"no gradient for {name!r}")
                continue
            m, v, step_i = self._state.get(
                name, (np.zeros_like(t.data), np.zeros_like(t.data), 0))
            step_i += 1
            m = self.beta1 * m + (1.0 - self.beta1) * g
            v = self.beta2 * v + (1.0 - self.beta2) * (g * g)
            m_hat = m / (1.0 - self.beta1 ** step_i)
            v_hat = v / (1.0 - self.beta2 ** step_i)
            t.data -= self.lr * m_hat / (np.sqrt(v_hat) + self.eps)
            self._state[name] = (m, v, step_i)


def make_optimizer(kind: str, registry: ParameterRegistry, lr: float,
                   strict: bool = False):
    kind = kind.lower()
    if kind == "sgd":
        return Sgd(registry, lr, strict=strict)
    if kind == "adam":
        return Adam(registry, lr, strict=strict)
    raise ValueError(f"unknown optimizer kind {kind!r}")
