"""Dataclass configs for the model, training loops, world, and evaluation.

Every run writes its fully-resolved config as a JSON manifest next to its
outputs so any result can be regenerated from (manifest, seed).
"""
from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence, Tuple

from .errors import ConfigurationError

MASK_MODES = ("hard-ste", "soft")
MASK_MECHANISMS = ("attention", "embed-zero")
LOSS_TARGETS = ("all", "kept")


def _require(cond: bool, msg: str) -> None:
    if not cond:
        raise ConfigurationError(msg)


@dataclass(frozen=True)
class ModelConfig:
    """Causal transformer hyperparameters.

    Positions enter through a bucketed relative attention bias (per head),
    so sequences longer than any training window remain well-defined up to
    max_seq_len.
    """

    vocab_size: int
    n_layers: int = 4
    n_heads: int = 4
    d_model: int = 128
    d_ff: int = 512
    max_seq_len: int = 2048
    tie_embeddings: bool = True
    n_rel_buckets: int = 32
    mask_mechanism: str = "attention"

    def validate(self) -> "ModelConfig":
        for name in ("vocab_size", "n_layers", "n_heads", "d_model", "d_ff", "max_seq_len", "n_rel_buckets"):
            _require(getattr(self, name) > 0, f"{name} must be positive")
        _require(self.d_model % self.n_heads == 0, "d_model must be divisible by n_heads")
        _require(self.mask_mechanism in MASK_MECHANISMS, f"mask_mechanism must be one of {MASK_MECHANISMS}")
        return self


@dataclass(frozen=True)
class AdapterConfig:
    """Low-rank adapter shape; zero-initialized B preserves the base model."""

    rank: int = 8
    alpha: float = 16.0
    targets: Tuple[str, ...] = ("q", "k", "v", "o")

    def validate(self) -> "AdapterConfig":
        _require(self.rank > 0, "rank must be positive")
        _require(self.alpha > 0, "alpha must be positive")
        _require(len(self.targets) > 0, "targets must be non-empty")
        return self


@dataclass(frozen=True)
class PretrainConfig:
    """Plain CLM pre-training of the base weights (no masking, no adapters)."""

    steps: int = 3200
    batch_size: int = 8
    segment_length: int = 256
    learning_rate: float = 1e-3
    warmup_steps: int = 200
    schedule_horizon: int = 5000
    grad_clip: float = 1.0
    seed: int = 0
    log_every: int = 100
    # Optional early stop on a held-out in-context probe; disabled when
    # probe_threshold is None.
    probe_threshold: Optional[float] = None
    probe_every: int = 100
    min_steps: int = 0

    def validate(self) -> "PretrainConfig":
        _require(self.steps >= 0, "steps must be >= 0")
        _require(self.batch_size > 0, "batch_size must be positive")
        _require(self.segment_length >= 2, "segment_length must be >= 2")
        _require(self.learning_rate > 0, "learning_rate must be positive")
        _require(self.schedule_horizon > 0, "schedule_horizon must be positive")
        return self


@dataclass(frozen=True)
class TrainConfig:
    """Selector training: frozen base, adapters + head learn a masked CLM loss."""

    segment_length: int = 1024
    keep_ratio_schedule: Tuple[float, ...] = (0.1, 0.2, 0.3, 0.5)
    learning_rate: float = 3e-4
    steps: int = 200
    batch_size: int = 4
    seed: int = 0
    mask_mode: str = "hard-ste"
    warmup_frac: float = 0.05
    grad_clip: float = 1.0
    log_every: int = 20
    selection_on_adapted: bool = True
    # Anneal the effective keep ratio from 1.0 down to the scheduled draws
    # over the first ratio_anneal_frac of training. Aggressive masking from a
    # random head produces near-uniform context loss with no usable slope;
    # starting dense lets the head pick up the token-utility signal first.
    ratio_anneal_frac: float = 0.0
    # "all": cross-entropy over every next-token position under the masked
    # context, so dropped tokens stay in the objective and their anchors keep
    # earning credit. "kept": only positions whose own token survives count;
    # under that variant a dropped class exits the loss entirely and nothing
    # ever demands it back.
    loss_targets: str = "all"

    def validate(self) -> "TrainConfig":
        _require(self.segment_length >= 2, "segment_length must be >= 2")
        _require(len(self.keep_ratio_schedule) > 0, "keep_ratio_schedule must be non-empty")
        for r in self.keep_ratio_schedule:
            _require(0.0 < r <= 1.0, f"schedule ratio {r} outside (0, 1]")
        _require(self.mask_mode in MASK_MODES, f"mask_mode must be one of {MASK_MODES}")
        _require(self.learning_rate > 0, "learning_rate must be positive")
        _require(self.steps >= 0, "steps must be >= 0")
        _require(self.batch_size > 0, "batch_size must be positive")
        _require(0.0 <= self.warmup_frac < 1.0, "warmup_frac must be in [0, 1)")
        _require(0.0 <= self.ratio_anneal_frac <= 1.0, "ratio_anneal_frac must be in [0, 1]")
        _require(self.loss_targets in LOSS_TARGETS, f"loss_targets must be one of {LOSS_TARGETS}")
        return self


@dataclass(frozen=True)
class WorldConfig:
    """Synthetic key-value world: episodic bindings re-stated amid filler."""

    n_keys: int = 30
    n_values: int = 30
    n_fillers: int = 40
    pairs_min: int = 3
    pairs_max: int = 12
    # low restatement counts keep first statements load-bearing; filler-heavy
    # mixes match the regime compression is for (most tokens droppable)
    cycles_min: int = 2
    cycles_max: int = 4
    filler_ratios: Tuple[float, ...] = (0.5, 0.7, 0.85)

    def validate(self) -> "WorldConfig":
        _require(self.n_keys >= 2, "n_keys must be >= 2")
        _require(self.n_values >= 2, "n_values must be >= 2")
        _require(self.n_fillers >= 1, "n_fillers must be >= 1")
        _require(2 <= self.pairs_min <= self.pairs_max, "need 2 <= pairs_min <= pairs_max")
        _require(1 <= self.cycles_min <= self.cycles_max, "need 1 <= cycles_min <= cycles_max")
        for r in self.filler_ratios:
            _require(0.0 <= r < 1.0, f"filler ratio {r} outside [0, 1)")
        return self


@dataclass(frozen=True)
class EvalConfig:
    """ICL trial shape: demo budget, seeds, option-scoring reduction."""

    budget_tokens: int = 750
    n_demo_seeds: int = 4
    test_cap: int = 200
    nll_reduction: str = "sum"

    def validate(self) -> "EvalConfig":
        _require(self.budget_tokens >= 1, "budget_tokens must be >= 1")
        _require(self.n_demo_seeds >= 1, "n_demo_seeds must be >= 1")
        _require(self.test_cap >= 1, "test_cap must be >= 1")
        _require(self.nll_reduction in ("sum", "mean"), "nll_reduction must be sum or mean")
        return self


@dataclass(frozen=True)
class LatencyConfig:
    warmup_runs: int = 3
    timed_runs: int = 5

    def validate(self) -> "LatencyConfig":
        _require(self.warmup_runs >= 0, "warmup_runs must be >= 0")
        _require(self.timed_runs >= 1, "timed_runs must be >= 1")
        return self


def to_dict(cfg) -> dict:
    return dataclasses.asdict(cfg)


def from_dict(cls, d: dict):
    names = {f.name for f in dataclasses.fields(cls)}
    kwargs = {k: v for k, v in d.items() if k in names}
    for f in dataclasses.fields(cls):
        if f.name in kwargs and isinstance(f.default, tuple):
            kwargs[f.name] = tuple(kwargs[f.name])
    return cls(**kwargs).validate()


def write_manifest(path, **sections) -> None:
    """Persist resolved configs (dataclasses or plain values) as JSON."""
    doc = {}
    for key, value in sections.items():
        doc[key] = to_dict(value) if dataclasses.is_dataclass(value) else value
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
