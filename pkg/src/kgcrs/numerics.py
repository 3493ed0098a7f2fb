"""Small numeric helpers shared by the models."""

from __future__ import annotations

import contextlib
import math

import torch

DTYPE = torch.float64

_recorders: list[list[torch.Tensor]] = []


def relu(x: torch.Tensor) -> torch.Tensor:
    if _recorders:
        _recorders[-1].append(x.detach().clone())
    return torch.relu(x)


@contextlib.contextmanager
def record_preactivations():
    """Collect every tensor passed through :func:`relu` inside the block."""
    buf: list[torch.Tensor] = []
    _recorders.append(buf)
    try:
        yield buf
    finally:
        _recorders.pop()


def softmax(x: torch.Tensor, dim: int = -1) -> torch.Tensor:
    z = x - x.max(dim=dim, keepdim=True).values.detach()
    e = torch.exp(z)
    return e / e.sum(dim=dim, keepdim=True)


def masked_softmax(x: torch.Tensor, mask: torch.Tensor, dim: int = -1) -> torch.Tensor:
    """Softmax restricted to ``mask`` positions; fully masked rows give zeros."""
    x = x.masked_fill(~mask, -math.inf)
    peak = x.max(dim=dim, keepdim=True).values.detach()
    peak = torch.where(torch.isfinite(peak), peak, torch.zeros_like(peak))
    e = torch.exp(x - peak) * mask
    denom = e.sum(dim=dim, keepdim=True)
    return e / torch.where(denom > 0, denom, torch.ones_like(denom))


def uniform_(t: torch.Tensor, bound: float, gen: torch.Generator) -> torch.Tensor:
    with torch.no_grad():
        t.copy_(torch.rand(t.shape, generator=gen, dtype=t.dtype) * 2 * bound - bound)
    return t


def xavier_(t: torch.Tensor, gen: torch.Generator) -> torch.Tensor:
    fan_out, fan_in = t.shape[-2], t.shape[-1]
    return uniform_(t, math.sqrt(6.0 / (fan_in + fan_out)), gen)
