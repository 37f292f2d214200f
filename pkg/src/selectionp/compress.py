"""Inference-time compression: score once, keep top tokens, detokenize.

Exact-rate discipline: a single call keeps max(1, round(ratio * n)) tokens;
chunked calls allocate that global target across chunks by largest
remainder (proportional to chunk length), so |kept - ratio * n| <= 1 holds
for any number of chunks while each chunk still runs at the requested rate
to within one token.
"""
from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import torch

from .checkpoints import CheckpointBundle
from .errors import ConfigurationError, ContractViolation, LengthError
from .selector import KeepMask, discretize, score, target_count
from .tokenizer import bos_always_keep


@dataclass
class CompressedPrompt:
    text: str
    kept_indices: List[int]
    source_token_count: int
    kept_token_count: int
    requested_ratio: float
    actual_ratio: float
    chunk_boundaries: List[int] = field(default_factory=list)
    method: str = "selection-p"

    def __post_init__(self):
        if self.kept_token_count != len(self.kept_indices):
            raise ContractViolation("kept_token_count must equal |kept_indices|")
        if any(b > a for a, b in zip(self.kept_indices[1:], self.kept_indices)):
            raise ContractViolation("kept_indices must be strictly increasing")


def allocate_counts(total: int, weights: Sequence[float], minimum: int = 0) -> List[int]:
    """Largest-remainder split of `total` proportional to weights.

    Ties in remainder go to the smaller index; `minimum` puts a floor under
    every slot (total must cover it).
    """
    m = len(weights)
    if total < minimum * m:
        raise ConfigurationError(f"cannot allocate {total} with minimum {minimum} over {m} slots")
    wsum = float(sum(weights))
    ideal = [total * (w / wsum) for w in weights] if wsum > 0 else [total / m] * m
    counts = [max(minimum, math.floor(x)) for x in ideal]
    while sum(counts) > total:  # minimum floors can overshoot
        over = [j for j in range(m) if counts[j] > minimum]
        i = max(over, key=lambda j: (counts[j] - ideal[j], -j))
        counts[i] -= 1
    remainders = sorted(range(m), key=lambda j: (-(ideal[j] - counts[j]), j))
    k = 0
    while sum(counts) < total:
        counts[remainders[k % m]] += 1
        k += 1
    return counts


def select_top(p: torch.Tensor, count: int, always_keep: Sequence[int] = ()) -> List[int]:
    """Indices of the `count` highest scores (stable ties, forced indices first)."""
    n = p.numel()
    forced = sorted(set(int(i) for i in always_keep))
    if count < len(forced):
        raise ContractViolation("count smaller than forced always-keep set")
    if count > n:
        raise ContractViolation("count exceeds available tokens")
    chosen = set(forced)
    if count > len(chosen):
        order = torch.argsort(-p.detach(), stable=True).tolist()
        for idx in order:
            if len(chosen) == count:
                break
            chosen.add(idx)
    return sorted(chosen)


def _score_tokens(bundle: CheckpointBundle, ids: List[int], use_adapters: bool) -> torch.Tensor:
    if bundle.head is None:
        raise ContractViolation("checkpoint has no selection head")
    if bundle.adapters is not None:
        bundle.adapters.set_enabled(use_adapters)
    with torch.no_grad():
        hidden, _ = bundle.model.encode(torch.tensor([ids]))
        return score(hidden, bundle.head)[0]


def _write_sidecar(path, ids: List[int], p: torch.Tensor, kept: Sequence[int]) -> None:
    mask = [1 if i in set(kept) else 0 for i in range(len(ids))]
    doc = {"token_ids": ids, "scores": [round(float(x), 6) for x in p], "keep_mask": mask}
    Path(path).write_text(json.dumps(doc) + "\n")


def compress(text: str, keep_ratio: float, bundle: CheckpointBundle,
             use_adapters: bool = True, sidecar_path=None) -> CompressedPrompt:
    """Single-pass compression of one piece of text."""
    if not 0.0 < keep_ratio <= 1.0:
        raise ConfigurationError(f"keep_ratio {keep_ratio} outside (0, 1]")
    ids = bundle.tokenizer.tokenize(text, strict=True)
    if len(ids) == 0:
        raise ContractViolation("cannot compress empty text")
    if len(ids) > bundle.config.max_seq_len:
        raise LengthError(
            f"input of {len(ids)} tokens exceeds max_seq_len {bundle.config.max_seq_len}; "
            "use chunked_compress")
    p = _score_tokens(bundle, ids, use_adapters)
    mask = discretize(p, keep_ratio, bos_always_keep(ids, bundle.tokenizer))
    kept = mask.indices
    if sidecar_path is not None:
        _write_sidecar(sidecar_path, ids, p, kept)
    return CompressedPrompt(
        text=bundle.tokenizer.detokenize_ids([ids[i] for i in kept]),
        kept_indices=kept,
        source_token_count=len(ids),
        kept_token_count=len(kept),
        requested_ratio=keep_ratio,
        actual_ratio=len(kept) / len(ids),
    )


def chunked_compress(text: str, keep_ratio: float, bundle: CheckpointBundle,
                     chunk_size: Optional[int] = None, joiner: str = " ",
                     use_adapters: bool = True) -> CompressedPrompt:
    """Compress long inputs chunk by chunk, joining outputs with one space.

    chunk_size defaults to min(2048, the model's max_seq_len).
    """
    if chunk_size is None:
        chunk_size = min(2048, bundle.config.max_seq_len)
    if chunk_size > bundle.config.max_seq_len:
        raise ConfigurationError(
            f"chunk_size {chunk_size} exceeds max_seq_len {bundle.config.max_seq_len}")
    if chunk_size < 1:
        raise ConfigurationError("chunk_size must be >= 1")
    if not 0.0 < keep_ratio <= 1.0:
        raise ConfigurationError(f"keep_ratio {keep_ratio} outside (0, 1]")
    ids = bundle.tokenizer.tokenize(text, strict=True)
    if len(ids) <= chunk_size:
        return compress(text, keep_ratio, bundle, use_adapters=use_adapters)
    bounds = list(range(0, len(ids), chunk_size))
    chunks = [ids[b:b + chunk_size] for b in bounds]
    global_target = target_count(len(ids), keep_ratio, n_always=1 if ids[0] == bundle.tokenizer.bos_id else 0)
    counts = allocate_counts(global_target, [len(c) for c in chunks])
    always0 = bos_always_keep(ids, bundle.tokenizer)
    if always0 and counts[0] == 0:
        counts[0] = 1
        donor = max(range(1, len(counts)), key=lambda j: counts[j])
        counts[donor] -= 1
    kept_global: List[int] = []
    pieces: List[str] = []
    for ci, (chunk, count, base) in enumerate(zip(chunks, counts, bounds)):
        if count == 0:
            continue
        p = _score_tokens(bundle, chunk, use_adapters)
        kept = select_top(p, count, always0 if ci == 0 else ())
        kept_global.extend(base + i for i in kept)
        pieces.append(bundle.tokenizer.detokenize_ids([chunk[i] for i in kept]))
    return CompressedPrompt(
        text=joiner.join(pieces),
        kept_indices=kept_global,
        source_token_count=len(ids),
        kept_token_count=len(kept_global),
        requested_ratio=keep_ratio,
        actual_ratio=len(kept_global) / len(ids),
        chunk_boundaries=bounds,
    )


@dataclass
class BudgetPlan:
    selected_demonstration_ids: List[int]
    budgets: List[int]
    residual_ratio: float
    mode: str

    def __post_init__(self):
        if len(self.budgets) != len(self.selected_demonstration_ids):
            raise ContractViolation("one budget per selected demonstration")


BUDGET_MODES = ("fixed-rate-after-filter", "rate-adjusted")


def budget_controller(demonstrations: Sequence[str], global_budget_tokens: int,
                      mode: str, bundle: CheckpointBundle,
                      base_keep_ratio: float = 0.1, filter_fraction: float = 0.25,
                      use_adapters: bool = True) -> BudgetPlan:
    """Demonstration-level filtering before token-level compression.

    Demonstrations are ranked by mean selection score; the top fraction
    survives in original order. fixed-rate-after-filter then applies the
    base ratio to the survivors (overall rate becomes deeper); rate-adjusted
    computes the token budget split that lands on the global budget.
    """
    if len(demonstrations) < 1:
        raise ConfigurationError("need at least one demonstration")
    if global_budget_tokens < 1:
        raise ConfigurationError("global budget must be at least 1 token")
    if mode not in BUDGET_MODES:
        raise ConfigurationError(f"unknown budget mode {mode!r}; expected one of {BUDGET_MODES}")
    tok = bundle.tokenizer
    id_lists = [tok.tokenize(d, strict=True) for d in demonstrations]
    means = []
    for ids in id_lists:
        p = _score_tokens(bundle, ids, use_adapters)
        means.append(float(p.mean()))
    n_keep = max(1, math.ceil(filter_fraction * len(demonstrations)))
    ranked = sorted(range(len(demonstrations)), key=lambda i: (-means[i], i))[:n_keep]
    selected = sorted(ranked)
    lengths = [len(id_lists[i]) for i in selected]
    subset_tokens = sum(lengths)
    if mode == "fixed-rate-after-filter":
        budget = target_count(subset_tokens, base_keep_ratio)
        residual = base_keep_ratio
    else:
        budget = min(global_budget_tokens, subset_tokens)
        residual = budget / subset_tokens
    if budget < len(selected):
        raise ConfigurationError(
            f"budget of {budget} tokens cannot give 1 token to each of {len(selected)} demonstrations")
    return BudgetPlan(selected_demonstration_ids=selected,
                      budgets=allocate_counts(budget, lengths, minimum=1),
                      residual_ratio=residual, mode=mode)


def apply_budget_plan(plan: BudgetPlan, demonstrations: Sequence[str],
                      bundle: CheckpointBundle, use_adapters: bool = True,
                      joiner: str = " ") -> CompressedPrompt:
    """Compress each selected demonstration to its planned token budget.

    kept_indices index the token stream of all demonstrations joined in
    order, so dropped demonstrations show up as uncovered index ranges.
    """
    tok = bundle.tokenizer
    id_lists = [tok.tokenize(d, strict=True) for d in demonstrations]
    offsets = [0]
    for ids in id_lists:
        offsets.append(offsets[-1] + len(ids))
    source_total = offsets[-1]
    pieces: List[str] = []
    kept_global: List[int] = []
    for demo_id, budget in zip(plan.selected_demonstration_ids, plan.budgets):
        ids = id_lists[demo_id]
        p = _score_tokens(bundle, ids, use_adapters)
        kept = select_top(p, min(budget, len(ids)), bos_always_keep(ids, tok))
        kept_global.extend(offsets[demo_id] + i for i in kept)
        pieces.append(tok.detokenize_ids([ids[i] for i in kept]))
    return CompressedPrompt(
        text=joiner.join(pieces),
        kept_indices=kept_global,
        source_token_count=source_total,
        kept_token_count=len(kept_global),
        requested_ratio=plan.residual_ratio,
        actual_ratio=len(kept_global) / source_total if source_total else 0.0,
        method=f"selection-p+budget:{plan.mode}",
    )


class CompressionCache:
    """Keyed by (checkpoint, text, ratio, chunk size); counts hits/misses."""

    def __init__(self):
        self._store: Dict[tuple, CompressedPrompt] = {}
        self.hits = 0
        self.misses = 0

    @staticmethod
    def _key(bundle_hash: str, text: str, ratio: float, chunk_size: Optional[int]) -> tuple:
        return (bundle_hash, hashlib.sha256(text.encode()).hexdigest(), ratio, chunk_size)

    def get_or_compute(self, bundle: CheckpointBundle, text: str, ratio: float,
                       chunk_size: Optional[int] = None) -> CompressedPrompt:
        key = self._key(bundle.content_hash(), text, ratio, chunk_size)
        if key in self._store:
            self.hits += 1
            return self._store[key]
        self.misses += 1
        if chunk_size is None:
            result = compress(text, ratio, bundle)
        else:
            result = chunked_compress(text, ratio, bundle, chunk_size=chunk_size)
        self._store[key] = result
        return result
