"""Per-token selection: sigmoid scoring head and exact-count discretization.

Scores come from a single linear-plus-sigmoid readout of the final hidden
states, one forward pass, no recurrence. Discretization keeps the top
tokens by score with half-up rounding of keep_ratio * n, floored at one
token, ties broken toward the smaller index.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import FrozenSet, Iterable, Optional, Sequence

import torch
import torch.nn as nn

from .errors import ConfigurationError, ContractViolation


class SelectionHead(nn.Module):
    """p = sigmoid(W h + b), output dimension exactly 1 per token."""

    def __init__(self, d_model: int):
        super().__init__()
        self.linear = nn.Linear(d_model, 1)
        nn.init.normal_(self.linear.weight, std=0.02)
        nn.init.zeros_(self.linear.bias)

    @property
    def d_model(self) -> int:
        return self.linear.in_features

    def forward(self, hidden: torch.Tensor) -> torch.Tensor:
        return torch.sigmoid(self.linear(hidden)).squeeze(-1)


def score(hidden: torch.Tensor, head: SelectionHead) -> torch.Tensor:
    """SelectionScores for hidden rows of width d_model."""
    if hidden.shape[-1] != head.d_model:
        raise ContractViolation(
            f"hidden width {hidden.shape[-1]} does not match head d_model {head.d_model}")
    return head(hidden)


def round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def target_count(n: int, keep_ratio: float, n_always: int = 0) -> int:
    """Kept-token cardinality: max(|always_keep|, 1, round(keep_ratio * n))."""
    if not 0.0 < keep_ratio <= 1.0:
        raise ConfigurationError(f"keep_ratio {keep_ratio} outside (0, 1]")
    if n < 1:
        raise ContractViolation("need at least one token")
    return min(n, max(n_always, 1, round_half_up(keep_ratio * n)))


@dataclass
class KeepMask:
    """Binary keep vector with exact kept-count semantics."""

    values: torch.Tensor
    keep_ratio: float
    kept_count: int
    always_keep: FrozenSet[int] = field(default_factory=frozenset)

    def __post_init__(self):
        ones = int(self.values.sum().item())
        if ones != self.kept_count:
            raise ContractViolation(f"mask has {ones} ones, expected {self.kept_count}")

    def __len__(self) -> int:
        return int(self.values.numel())

    @property
    def indices(self) -> list:
        return torch.nonzero(self.values, as_tuple=False).flatten().tolist()


def discretize(p: torch.Tensor, keep_ratio: float,
               always_keep: Iterable[int] = frozenset()) -> KeepMask:
    """Top-k% keep mask over scores p.

    The kept set is always_keep plus the highest-score remaining indices up
    to the target count. Ties take the smaller index (stable descending
    sort). Deterministic.
    """
    if p.dim() != 1:
        raise ContractViolation("scores must be a 1-d vector")
    n = p.numel()
    forced = frozenset(int(i) for i in always_keep)
    for i in forced:
        if not 0 <= i < n:
            raise ContractViolation(f"always_keep index {i} outside [0, {n})")
    kept = target_count(n, keep_ratio, n_always=len(forced))
    values = torch.zeros(n, dtype=torch.float32)
    for i in forced:
        values[i] = 1.0
    need = kept - len(forced)
    if need > 0:
        order = torch.argsort(-p.detach(), stable=True)
        for idx in order.tolist():
            if need == 0:
                break
            if values[idx] == 0.0:
                values[idx] = 1.0
                need -= 1
    return KeepMask(values=values, keep_ratio=keep_ratio, kept_count=kept, always_keep=forced)


def soft_mask(p: torch.Tensor, keep_ratio: float, mode: str,
              always_keep: Iterable[int] = frozenset()) -> torch.Tensor:
    """Differentiable mask for training.

    hard-ste: forward value equals the binary keep mask, gradient w.r.t. p
    is the identity (straight-through). soft: the mask is p itself.
    """
    if mode == "soft":
        return p
    if mode == "hard-ste":
        hard = discretize(p.detach(), keep_ratio, always_keep).values.to(p.dtype)
        return p + (hard - p).detach()
    raise ConfigurationError(f"unknown mask mode {mode!r}; expected hard-ste or soft")
