"""Pair scoring math: mention pooling, localized context and the bilinear head.

All functions take torch tensors and are differentiable; dtype follows the inputs.
"""

from __future__ import annotations

import math
from typing import Sequence

import torch
from torch import nn

PROB_EPS = 1e-7


def entity_embedding(H: torch.Tensor, positions: Sequence[int]) -> torch.Tensor:
    """Logsumexp pooling of the marker embeddings of one entity's mentions."""
    if len(positions) == 0:
        raise ValueError("entity_embedding needs at least one marker position")
    return torch.logsumexp(H[list(positions)], dim=0)


def entity_attention(A: torch.Tensor, positions: Sequence[int]) -> torch.Tensor:
    """Mean over mention positions of the last-layer attention rows, per head."""
    if len(positions) == 0:
        raise ValueError("entity_attention needs at least one marker position")
    return A[:, list(positions), :].mean(dim=1)


def localized_context(H: torch.Tensor, A_s: torch.Tensor, A_o: torch.Tensor,
                      return_degenerate: bool = False):
    """Context vector for a pair from the product of both entities' attention.

    The head-summed product is normalized to a distribution over positions. When
    the two attentions do not overlap at all, the weights fall back to uniform.
    """
    c, degenerate = batch_localized_context(H, A_s.unsqueeze(0), A_o.unsqueeze(0))
    if return_degenerate:
        return c[0], bool(degenerate[0])
    return c[0]


def batch_localized_context(H: torch.Tensor, A_s: torch.Tensor, A_o: torch.Tensor):
    """Vectorized :func:`localized_context` over P pairs; A_* are (P, heads, l)."""
    q = (A_s * A_o).sum(dim=1)
    total = q.sum(dim=-1, keepdim=True)
    degenerate = total.squeeze(-1) <= 0
    uniform = torch.full_like(q, 1.0 / q.shape[-1])
    safe_total = torch.where(total > 0, total, torch.ones_like(total))
    q = torch.where(total > 0, q / safe_total, uniform)
    return q @ H, degenerate


class RCPHead(nn.Module):
    """Projection and bilinear parameters of the binary NA classifier."""

    def __init__(self, hidden_dim: int, seed: int | None = 0, dtype=torch.float32):
        super().__init__()
        d = hidden_dim
        self.hidden_dim = d
        self.W_s = nn.Parameter(torch.empty(d, d, dtype=dtype))
        self.W_c = nn.Parameter(torch.empty(d, d, dtype=dtype))
        self.W_o = nn.Parameter(torch.empty(d, d, dtype=dtype))
        self.W_bilinear = nn.Parameter(torch.empty(d, d, dtype=dtype))
        self.b = nn.Parameter(torch.zeros((), dtype=dtype))
        self.reset_parameters(seed)

    def reset_parameters(self, seed: int | None = 0) -> None:
        gen = torch.Generator().manual_seed(seed) if seed is not None else None
        bound = 1.0 / math.sqrt(self.hidden_dim)
        with torch.no_grad():
            for w in (self.W_s, self.W_c, self.W_o, self.W_bilinear):
                w.copy_(torch.rand(w.shape, generator=gen, dtype=w.dtype) * 2 * bound - bound)
            self.b.zero_()

    def logits(self, h_s: torch.Tensor, h_o: torch.Tensor, c: torch.Tensor) -> torch.Tensor:
        context = c @ self.W_c.T
        z_s = torch.tanh(h_s @ self.W_s.T + context)
        z_o = torch.tanh(h_o @ self.W_o.T + context)
        return ((z_s @ self.W_bilinear) * z_o).sum(dim=-1) + self.b

    def forward(self, h_s, h_o, c):
        return torch.sigmoid(self.logits(h_s, h_o, c))


def pair_probability(h_s: torch.Tensor, h_o: torch.Tensor, c: torch.Tensor,
                     params: RCPHead) -> torch.Tensor:
    """P(NA | subject, object). Accepts single vectors or (P, d) batches."""
    return params(h_s, h_o, c)


def bce_loss(probs, is_na, eps: float = PROB_EPS) -> torch.Tensor:
    """Summed binary cross entropy with NA as the positive label."""
    probs = torch.as_tensor(probs)
    target = torch.as_tensor(is_na, dtype=probs.dtype if probs.is_floating_point() else torch.float64)
    if probs.shape != target.shape:
        raise ValueError(f"length mismatch: {tuple(probs.shape)} vs {tuple(target.shape)}")
    p = probs.clamp(eps, 1 - eps)
    return -(target * torch.log(p) + (1 - target) * torch.log1p(-p)).sum()
