"""Reference compressors: perplexity-iterative, random, demo truncation.

The perplexity selector keeps the most surprising tokens (highest -log P):
high-probability tokens are recoverable from context and are dropped first.
It recomputes perplexities segment by segment conditioned on the running
compressed prefix, so it needs one forward per segment (the multi-round
latency foil), unlike the single-pass selection head.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import List, Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .checkpoints import CheckpointBundle
from .compress import CompressedPrompt, allocate_counts, select_top
from .errors import ConfigurationError, ContractViolation, LengthError
from .selector import target_count
from .tokenizer import bos_always_keep

BASELINE_KINDS = ("perplexity-iterative", "random", "demo-truncate", "zero-shot", "full-shot")


@dataclass
class BaselineSpec:
    kind: str
    ratio: Optional[float] = None
    seed: int = 0
    segment_size: int = 256

    def validate(self) -> "BaselineSpec":
        if self.kind not in BASELINE_KINDS:
            raise ConfigurationError(f"unknown baseline kind {self.kind!r}; expected one of {BASELINE_KINDS}")
        if self.kind in ("perplexity-iterative", "random", "demo-truncate"):
            if self.ratio is None or not 0.0 < self.ratio <= 1.0:
                raise ConfigurationError(f"{self.kind} needs a ratio in (0, 1]")
        if self.kind == "perplexity-iterative" and self.segment_size < 2:
            raise ConfigurationError("segment_size must be >= 2")
        return self


def _segment_nll(bundle: CheckpointBundle, prefix: List[int], segment: List[int],
                 use_adapters: bool) -> torch.Tensor:
    """-log P for each segment token conditioned on compressed prefix + segment."""
    max_len = bundle.config.max_seq_len
    room = max_len - len(segment)
    if room < 0:
        raise LengthError(f"segment of {len(segment)} tokens exceeds max_seq_len {max_len}")
    prefix = prefix[-room:] if room else []
    ids = torch.tensor([prefix + segment])
    if bundle.adapters is not None:
        bundle.adapters.set_enabled(use_adapters)
    with torch.no_grad():
        logits = bundle.model(ids)[0]
    start = len(prefix)
    values = torch.empty(len(segment))
    for i in range(len(segment)):
        pos = start + i
        if pos == 0:
            values[i] = float("inf")  # unconditioned first token: always keep
        else:
            values[i] = F.cross_entropy(logits[pos - 1][None], ids[0, pos][None])
    return values


def perplexity_select(text: str, keep_ratio: float, bundle: CheckpointBundle,
                      segment_size: int = 256, use_adapters: bool = False) -> CompressedPrompt:
    """Iterative per-segment selection of highest-perplexity tokens."""
    if not 0.0 < keep_ratio <= 1.0:
        raise ConfigurationError(f"keep_ratio {keep_ratio} outside (0, 1]")
    if segment_size < 2:
        raise ConfigurationError("segment_size must be >= 2")
    ids = bundle.tokenizer.tokenize(text, strict=True)
    if len(ids) == 0:
        raise ContractViolation("cannot compress empty text")
    bounds = list(range(0, len(ids), segment_size))
    segments = [ids[b:b + segment_size] for b in bounds]
    n_always = 1 if ids[0] == bundle.tokenizer.bos_id else 0
    global_target = target_count(len(ids), keep_ratio, n_always=n_always)
    counts = allocate_counts(global_target, [len(s) for s in segments])
    prefix: List[int] = []
    kept_global: List[int] = []
    for base, seg, count in zip(bounds, segments, counts):
        if count > 0:
            values = _segment_nll(bundle, prefix, seg, use_adapters)
            always = bos_always_keep(ids, bundle.tokenizer) if base == 0 else ()
            kept = select_top(values, count, always)
            kept_global.extend(base + i for i in kept)
            prefix.extend(seg[i] for i in kept)
    return CompressedPrompt(
        text=bundle.tokenizer.detokenize_ids([ids[i] for i in kept_global]),
        kept_indices=kept_global,
        source_token_count=len(ids),
        kept_token_count=len(kept_global),
        requested_ratio=keep_ratio,
        actual_ratio=len(kept_global) / len(ids),
        method="perplexity-iterative",
    )


def random_select(text: str, keep_ratio: float, tokenizer, seed: int = 0) -> CompressedPrompt:
    """Uniform random kept set of exact target cardinality (chance floor)."""
    if not 0.0 < keep_ratio <= 1.0:
        raise ConfigurationError(f"keep_ratio {keep_ratio} outside (0, 1]")
    ids = tokenizer.tokenize(text, strict=True)
    if len(ids) == 0:
        raise ContractViolation("cannot compress empty text")
    count = target_count(len(ids), keep_ratio)
    rng = np.random.default_rng(seed)
    kept = sorted(int(i) for i in rng.choice(len(ids), size=count, replace=False))
    return CompressedPrompt(
        text=tokenizer.detokenize_ids([ids[i] for i in kept]),
        kept_indices=kept,
        source_token_count=len(ids),
        kept_token_count=count,
        requested_ratio=keep_ratio,
        actual_ratio=count / len(ids),
        method="random",
    )


def demo_truncate(demonstrations: Sequence[str], keep_fraction: float) -> List[str]:
    """Keep the first ceil(fraction * m) whole demonstrations, untouched."""
    if len(demonstrations) < 1:
        raise ConfigurationError("need at least one demonstration")
    if not 0.0 < keep_fraction <= 1.0:
        raise ConfigurationError(f"keep_fraction {keep_fraction} outside (0, 1]")
    m = math.ceil(keep_fraction * len(demonstrations))
    return list(demonstrations[:m])
