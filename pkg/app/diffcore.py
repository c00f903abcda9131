# app/diffcore.py
"""
Reverse-mode differentiation over flat parameter vectors, plus Adam.

Every learnable quantity in a run (hash tables, MLP weights, sharpness, the
BSE forward-model parameters) lives in ONE flat tensor. A ``ParamLayout``
hands out named views into it, so gradients always come back as a single
vector of the same length and untouched parameters get exact zeros.

The graph itself is recorded by torch autograd; ``Tape`` only keeps the
named intermediate nodes in creation order so that a non-finite loss can
be traced back to the first node that went bad.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import torch

from app.utils import NonFiniteError, ValidationError

ARCCOS_EPS = 1e-7
NORM_EPS = 1e-12


# --------------------------
# Parameter layout
# --------------------------
@dataclass(frozen=True)
class ParamSlot:
    name: str
    offset: int
    shape: Tuple[int, ...]

    @property
    def numel(self) -> int:
        return math.prod(self.shape) if self.shape else 1


class ParamLayout:
    """Named, contiguous slices of a flat parameter vector."""

    def __init__(self) -> None:
        self.slots: Dict[str, ParamSlot] = {}
        self.size = 0

    def register(self, name: str, shape: Sequence[int]) -> ParamSlot:
        if name in self.slots:
            raise ValidationError(f"parameter {name!r} registered twice")
        slot = ParamSlot(name, self.size, tuple(int(s) for s in shape))
        self.slots[name] = slot
        self.size += slot.numel
        return slot

    def __contains__(self, name: str) -> bool:
        return name in self.slots

    def view(self, flat: torch.Tensor, name: str) -> torch.Tensor:
        s = self.slots[name]
        return flat[s.offset:s.offset + s.numel].view(s.shape)

    def zeros(self, dtype: torch.dtype = torch.float32) -> torch.Tensor:
        return torch.zeros(self.size, dtype=dtype)

    def names(self, prefix: str = "") -> List[str]:
        return [n for n in self.slots if n.startswith(prefix)]

    def mask(self, prefix: str, dtype: torch.dtype = torch.float32) -> torch.Tensor:
        """1 on every slot whose name starts with ``prefix``, 0 elsewhere."""
        m = torch.zeros(self.size, dtype=dtype)
        for n in self.names(prefix):
            s = self.slots[n]
            m[s.offset:s.offset + s.numel] = 1
        return m


# --------------------------
# Tape
# --------------------------
class Tape:
    """Ordered record of named graph nodes (inputs always precede outputs)."""

    def __init__(self) -> None:
        self.nodes: List[Tuple[str, torch.Tensor]] = []

    def record(self, name: str, value: torch.Tensor) -> torch.Tensor:
        self.nodes.append((name, value))
        return value

    def first_non_finite(self) -> Optional[str]:
        for name, value in self.nodes:
            if not bool(torch.isfinite(value.detach()).all()):
                return name
        return None


Graph = Callable[[torch.Tensor, Tape], torch.Tensor]


def forward_backward(graph: Graph, params: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
    """
    Evaluate ``graph(params, tape)`` and return (loss, d loss / d params).

    ``params`` is copied into a fresh leaf so the caller's vector is never
    attached to a graph. Parameters the graph does not reach get zero gradient.
    """
    leaf = params.detach().clone().requires_grad_(True)
    tape = Tape()
    loss = graph(leaf, tape)
    if loss.numel() != 1:
        raise ValidationError(f"graph must produce a scalar, got shape {tuple(loss.shape)}")
    loss = loss.reshape(())

    if not bool(torch.isfinite(loss.detach())):
        bad = tape.first_non_finite() or "loss"
        raise NonFiniteError(f"non-finite loss {float(loss.detach())}; first non-finite node: {bad}")

    if not loss.requires_grad:
        return loss.detach(), torch.zeros_like(leaf.detach())

    (grad,) = torch.autograd.grad(loss, leaf, allow_unused=True)
    if grad is None:
        grad = torch.zeros_like(leaf.detach())
    return loss.detach(), grad.detach()


# --------------------------
# Primitives with guarded derivatives
# --------------------------
def safe_arccos(x: torch.Tensor, eps: float = ARCCOS_EPS) -> torch.Tensor:
    return torch.acos(torch.clamp(x, -1.0 + eps, 1.0 - eps))


def safe_norm(v: torch.Tensor, dim: int = -1, keepdim: bool = False) -> torch.Tensor:
    """L2 norm whose gradient is 0 (not NaN) when the norm is below 1e-12."""
    sq = (v * v).sum(dim=dim, keepdim=keepdim)
    tiny = sq < NORM_EPS * NORM_EPS
    safe_sq = torch.where(tiny, torch.ones_like(sq), sq)
    return torch.where(tiny, torch.zeros_like(sq), torch.sqrt(safe_sq))


def normalize(v: torch.Tensor, dim: int = -1) -> torch.Tensor:
    n = safe_norm(v, dim=dim, keepdim=True)
    return v / torch.where(n > 0, n, torch.ones_like(n))


def left_min(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    # ties route the whole gradient to ``a``
    return torch.where(a <= b, a, b)


def left_max(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    return torch.where(a >= b, a, b)


def dot(a: torch.Tensor, b: torch.Tensor, dim: int = -1) -> torch.Tensor:
    return (a * b).sum(dim=dim)


# torch.abs already uses sign(x) as its derivative, which is 0 at 0.
safe_abs = torch.abs


# --------------------------
# Adam
# --------------------------
@dataclass
class AdamState:
    first_moment: torch.Tensor
    second_moment: torch.Tensor
    step_count: int = 0
    learning_rate: Union[float, torch.Tensor] = 0.01   # scalar or one rate per parameter
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8

    @classmethod
    def for_params(cls, params: torch.Tensor, learning_rate: Union[float, torch.Tensor] = 0.01, **kw) -> "AdamState":
        return cls(
            first_moment=torch.zeros_like(params.detach()),
            second_moment=torch.zeros_like(params.detach()),
            learning_rate=learning_rate,
            **kw,
        )


def adam_step(state: AdamState, params: torch.Tensor, grads: torch.Tensor) -> torch.Tensor:
    """One bias-corrected Adam update. Mutates ``state``; returns new params."""
    if params.shape != grads.shape or params.shape != state.first_moment.shape:
        raise ValidationError(
            f"length mismatch: params {tuple(params.shape)}, grads {tuple(grads.shape)}, "
            f"state {tuple(state.first_moment.shape)}"
        )
    with torch.no_grad():
        g = grads.to(params.dtype)
        state.step_count += 1
        t = state.step_count
        state.first_moment.mul_(state.beta1).add_(g, alpha=1.0 - state.beta1)
        state.second_moment.mul_(state.beta2).addcmul_(g, g, value=1.0 - state.beta2)
        m_hat = state.first_moment / (1.0 - state.beta1 ** t)
        v_hat = state.second_moment / (1.0 - state.beta2 ** t)
        return params.detach() - state.learning_rate * m_hat / (torch.sqrt(v_hat) + state.epsilon)
