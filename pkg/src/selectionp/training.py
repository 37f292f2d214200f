"""Training loops: plain CLM pre-training and selector training.

Selector steps run in two phases. Phase one performs a no-gradient forward
of the full segment to obtain final hidden states and draws a keep ratio
from the schedule. Phase two recomputes scores differentiably from the
detached hidden states (gradient reaches the head through the mask values),
applies the mask as attention key gates, and backpropagates the masked CLM
loss into adapters and head only; base weights stay frozen.

Loss positions: only targets whose own position is kept contribute. When a
degenerate mask keeps no target position at all (possible only on very
short segments at extreme ratios), the step falls back to all targets under
the same masked context so the loss stays defined.
"""
from __future__ import annotations

import json
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn.functional as F

from .config import AdapterConfig, PretrainConfig, TrainConfig, WorldConfig
from .corpus import Segment, make_document, requery_positions
from .errors import ConfigurationError, ContractViolation
from .model import AdapterSet, TransformerLM, attach_lora, base_parameters
from .selector import SelectionHead, discretize, soft_mask
from .tokenizer import WordTokenizer, bos_always_keep


def _full_length_pool(segments: Sequence[Segment], length: int) -> np.ndarray:
    pool = [s.tokens.ids for s in segments if len(s) == length]
    if not pool:
        raise ConfigurationError(f"no segments of full length {length} to batch")
    return np.asarray(pool, dtype=np.int64)


def _write_log(path: Optional[Path], rows: List[dict]) -> None:
    if path is None:
        return
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w") as fh:
        for row in rows:
            fh.write(json.dumps(row) + "\n")


def cosine_lr(base_lr: float, step: int, warmup: int, horizon: int, floor_frac: float = 0.1) -> float:
    warm = min(1.0, (step + 1) / max(warmup, 1))
    decay = 0.5 * (1 + math.cos(math.pi * min(step, horizon) / horizon))
    return base_lr * warm * (floor_frac + (1 - floor_frac) * decay)


def make_requery_probe(tokenizer: WordTokenizer, world_cfg: WorldConfig, seed: int = 9999,
                       n_rows: int = 6, length: int = 256) -> Callable[[TransformerLM], float]:
    """Held-out probe: mean NLL at re-stated value positions.

    Tracks whether in-context retrieval has formed; drops sharply (toward 0,
    from around ln(n_values)) once it has.
    """
    rng = np.random.default_rng(seed)
    rows = []
    for _ in range(n_rows):
        words = make_document(rng, world_cfg, length).split()
        ids = torch.tensor([tokenizer.tokenize(" ".join(words))])
        mask = torch.tensor([requery_positions(words)])
        rows.append((ids, mask))

    def probe(model: TransformerLM) -> float:
        total, count = 0.0, 0
        with torch.no_grad():
            for ids, mask in rows:
                logits = model(ids)
                nll = F.cross_entropy(logits[0, :-1], ids[0, 1:], reduction="none")
                m = mask[0, 1:]
                if m.any():
                    total += float(nll[m].sum())
                    count += int(m.sum())
        return total / max(count, 1)

    return probe


def pretrain_backbone(model: TransformerLM, segments: Sequence[Segment], cfg: PretrainConfig,
                      probe_fn: Optional[Callable[[TransformerLM], float]] = None,
                      log_path=None) -> List[dict]:
    """Standard CLM training of the base weights; no masking, no adapters."""
    cfg.validate()
    torch.manual_seed(cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    pool = _full_length_pool(segments, cfg.segment_length)
    opt = torch.optim.AdamW(model.parameters(), lr=cfg.learning_rate)
    rows: List[dict] = []
    model.train()
    t0 = time.monotonic()
    step = 0
    while step < cfg.steps:
        lr = cosine_lr(cfg.learning_rate, step, cfg.warmup_steps, cfg.schedule_horizon)
        for g in opt.param_groups:
            g["lr"] = lr
        ids = torch.from_numpy(pool[rng.integers(len(pool), size=cfg.batch_size)])
        logits = model(ids)
        loss = F.cross_entropy(logits[:, :-1].reshape(-1, model.cfg.vocab_size), ids[:, 1:].reshape(-1))
        if not torch.isfinite(loss):
            raise ContractViolation(f"non-finite pretraining loss at step {step}")
        opt.zero_grad()
        loss.backward()
        torch.nn.utils.clip_grad_norm_(model.parameters(), cfg.grad_clip)
        opt.step()
        step += 1
        if step % cfg.log_every == 0 or step == cfg.steps:
            rows.append({"step": step, "loss": loss.item(), "lr": lr,
                         "wall_ms": (time.monotonic() - t0) * 1000})
        if (cfg.probe_threshold is not None and probe_fn is not None
                and step >= cfg.min_steps and step % cfg.probe_every == 0):
            value = probe_fn(model)
            rows.append({"step": step, "probe": value, "wall_ms": (time.monotonic() - t0) * 1000})
            if value < cfg.probe_threshold:
                break
    model.eval()
    _write_log(log_path, rows)
    return rows


@dataclass
class TrainState:
    """Mutable selector-training state: counters, optimizer, and modules."""

    model: TransformerLM
    adapters: AdapterSet
    head: SelectionHead
    optimizer: torch.optim.Optimizer
    config: TrainConfig
    rng: np.random.Generator
    bos_id: int
    step: int = 0
    losses: List[float] = field(default_factory=list)
    last_ratio: float = float("nan")


def init_selector_training(model: TransformerLM, cfg: TrainConfig,
                           adapter_cfg: AdapterConfig, bos_id: int) -> TrainState:
    cfg.validate()
    torch.manual_seed(cfg.seed)
    for _, p in base_parameters(model):
        p.requires_grad_(False)
    adapters = attach_lora(model, adapter_cfg)
    head = SelectionHead(model.cfg.d_model)
    params = list(adapters.parameters()) + list(head.parameters())
    opt = torch.optim.AdamW(params, lr=cfg.learning_rate)
    return TrainState(model=model, adapters=adapters, head=head, optimizer=opt,
                      config=cfg, rng=np.random.default_rng(cfg.seed), bos_id=bos_id)


def masked_loss_terms(model: TransformerLM, head: SelectionHead, ids: torch.Tensor,
                      keep_ratio: float, mask_mode: str, bos_id: int,
                      hidden_override: Optional[torch.Tensor] = None,
                      loss_targets: str = "all",
                      ) -> Tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """Masked CLM loss for one batch; returns (loss, scores, hard mask).

    hidden_override supplies the phase-one hidden states; when absent they
    are computed without gradient here. loss_targets selects which next-token
    positions are averaged (see TrainConfig.loss_targets).
    """
    B, T = ids.shape
    if T < 2:
        raise ContractViolation("segments must have at least 2 tokens")
    if hidden_override is None:
        with torch.no_grad():
            hidden, _ = model.encode(ids)
    else:
        hidden = hidden_override.detach()
    p = head(hidden)
    masks = []
    hards = []
    for b in range(B):
        always = bos_always_keep(ids[b].tolist(), _BosLookup(bos_id))
        masks.append(soft_mask(p[b], keep_ratio, mask_mode, always))
        if mask_mode == "hard-ste":
            hards.append(masks[-1].detach())
        else:
            hards.append(discretize(p[b].detach(), keep_ratio, always).values)
    gate = torch.stack(masks)
    hard = torch.stack(hards)
    logits = model(ids, key_gate=gate)
    nll = F.cross_entropy(logits[:, :-1].reshape(-1, model.cfg.vocab_size),
                          ids[:, 1:].reshape(-1), reduction="none").view(B, T - 1)
    if loss_targets == "kept" and mask_mode == "hard-ste":
        kept_targets = hard[:, 1:] > 0.5
        if kept_targets.any():
            loss = nll[kept_targets].mean()
        else:
            loss = nll.mean()
    else:
        loss = nll.mean()
    return loss, p, hard


class _BosLookup:
    """Minimal tokenizer stand-in for bos_always_keep on raw id lists."""

    def __init__(self, bos_id: int):
        self.bos_id = bos_id


def training_step(state: TrainState, ids: torch.Tensor) -> float:
    """One two-phase selector update; returns the loss value."""
    cfg = state.config
    ratio = float(state.rng.choice(cfg.keep_ratio_schedule))
    anneal = int(cfg.ratio_anneal_frac * max(cfg.steps, 1))
    if state.step < anneal:
        # dense-to-sparse curriculum: lift the drawn ratio toward 1.0 early on
        lift = 1.0 - state.step / anneal
        ratio = ratio + (1.0 - ratio) * lift
    state.last_ratio = ratio
    warmup = max(1, int(cfg.warmup_frac * max(cfg.steps, 1)))
    lr = cfg.learning_rate * min(1.0, (state.step + 1) / warmup)
    for g in state.optimizer.param_groups:
        g["lr"] = lr
    state.adapters.set_enabled(cfg.selection_on_adapted)
    with torch.no_grad():
        hidden, _ = state.model.encode(ids)
    state.adapters.set_enabled(True)
    loss, _, _ = masked_loss_terms(state.model, state.head, ids, ratio, cfg.mask_mode,
                                   state.bos_id, hidden_override=hidden,
                                   loss_targets=cfg.loss_targets)
    if not torch.isfinite(loss):
        raise ContractViolation(f"non-finite selector loss at step {state.step}")
    state.optimizer.zero_grad()
    loss.backward()
    torch.nn.utils.clip_grad_norm_(
        list(state.adapters.parameters()) + list(state.head.parameters()), cfg.grad_clip)
    state.optimizer.step()
    state.step += 1
    value = loss.item()
    state.losses.append(value)
    return value


def train_selector(model: TransformerLM, segments: Sequence[Segment], cfg: TrainConfig,
                   adapter_cfg: AdapterConfig = AdapterConfig(), bos_id: int = 1,
                   log_path=None) -> Tuple[AdapterSet, SelectionHead, List[dict]]:
    """Full selector training run over sampled corpus segments."""
    state = init_selector_training(model, cfg, adapter_cfg, bos_id)
    pool = _full_length_pool(segments, cfg.segment_length)
    rows: List[dict] = []
    t0 = time.monotonic()
    for _ in range(cfg.steps):
        ids = torch.from_numpy(pool[state.rng.integers(len(pool), size=cfg.batch_size)])
        loss = training_step(state, ids)
        if state.step % cfg.log_every == 0 or state.step == cfg.steps:
            rows.append({"step": state.step, "loss": loss,
                         "keep_ratio": state.last_ratio,
                         "lr": state.optimizer.param_groups[0]["lr"],
                         "wall_ms": (time.monotonic() - t0) * 1000})
    model.eval()
    _write_log(log_path, rows)
    return state.adapters, state.head, rows
