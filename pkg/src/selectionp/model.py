"""Causal transformer backbone with maskable attention and low-rank adapters.

Masking semantics: a token with keep value 0 is invisible as a key/value to
every other position but stays visible to itself, so each input position
always produces a logits row and every attention row remains a proper
distribution (a fully-masked prefix would otherwise normalize over nothing).
Binary gates reproduce additive -inf column masking exactly on all rows
whose query token is kept.

Positions enter only through a bucketed relative attention bias (exact
buckets for short distances, log-spaced beyond), so behavior is defined for
any length up to max_seq_len regardless of the training window. Per-head
bias init applies distance slopes of different strengths, giving heads a
local-to-global spread at the start of training.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Dict, Iterable, List, Optional, Sequence, Tuple, Union

import torch
import torch.nn as nn
import torch.nn.functional as F

from .config import AdapterConfig, ModelConfig
from .errors import ContractViolation, LengthError
from .selector import KeepMask
from .tokenizer import TokenSequence


def relative_buckets(n: int, n_buckets: int, max_dist: int) -> torch.Tensor:
    """Bucket index for each (query, key) distance i - j >= 0."""
    i = torch.arange(n)
    rel = (i[:, None] - i[None, :]).clamp(min=0)
    exact = n_buckets // 2
    small = rel < exact
    large = exact + (
        torch.log(rel.float().clamp(min=1) / exact)
        / math.log(max(max_dist, exact + 1) / exact) * (n_buckets - exact)
    ).long().clamp(max=n_buckets - exact - 1)
    return torch.where(small, rel, large)


def bucket_center_distance(n_buckets: int, max_dist: int) -> torch.Tensor:
    """Representative distance per bucket (used for bias initialization)."""
    exact = n_buckets // 2
    out = torch.zeros(n_buckets)
    for b in range(n_buckets):
        if b < exact:
            out[b] = b
        else:
            out[b] = exact * math.exp((b - exact + 0.5) / (n_buckets - exact) * math.log(max(max_dist, exact + 1) / exact))
    return out


def head_slopes(n_heads: int) -> torch.Tensor:
    """Geometric distance-decay slopes, with one neutral (global) head."""
    slopes = [2.0 ** (-i) for i in range(n_heads)]
    slopes[-1] = 0.0
    return torch.tensor(slopes)


class LoraLinear(nn.Module):
    """Additive low-rank delta on a frozen linear layer; B = 0 at init."""

    def __init__(self, base: nn.Linear, rank: int, alpha: float):
        super().__init__()
        self.base = base
        self.A = nn.Parameter(torch.randn(rank, base.in_features) * 0.02)
        self.B = nn.Parameter(torch.zeros(base.out_features, rank))
        self.scale = alpha / rank
        self.enabled = True

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        out = self.base(x)
        if self.enabled:
            out = out + F.linear(F.linear(x, self.A), self.B) * self.scale
        return out


class Block(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        d, h = cfg.d_model, cfg.n_heads
        self.n_heads = h
        self.ln1 = nn.LayerNorm(d)
        self.ln2 = nn.LayerNorm(d)
        self.q = nn.Linear(d, d)
        self.k = nn.Linear(d, d)
        self.v = nn.Linear(d, d)
        self.o = nn.Linear(d, d)
        self.f1 = nn.Linear(d, cfg.d_ff)
        self.f2 = nn.Linear(cfg.d_ff, d)
        self.rel = nn.Embedding(cfg.n_rel_buckets, h)

    def attention(self, x: torch.Tensor, buckets: torch.Tensor,
                  key_gate: Optional[torch.Tensor]) -> Tuple[torch.Tensor, torch.Tensor]:
        B, T, d = x.shape
        h = self.n_heads
        q = self.q(x).view(B, T, h, -1).transpose(1, 2)
        k = self.k(x).view(B, T, h, -1).transpose(1, 2)
        v = self.v(x).view(B, T, h, -1).transpose(1, 2)
        a = (q @ k.transpose(-2, -1)) / math.sqrt(d // h)
        a = a + self.rel(buckets).permute(2, 0, 1)[None]
        causal = torch.triu(torch.ones(T, T, dtype=torch.bool, device=x.device), diagonal=1)
        a = a.masked_fill(causal, float("-inf"))
        if key_gate is None:
            w = torch.softmax(a, dim=-1)
        else:
            # Gated softmax: w[i, j] proportional to g_j * exp(a[i, j]), with
            # the diagonal always visible. Differentiable in the gate.
            g = key_gate[:, None, None, :].expand(B, h, T, T)
            eye = torch.eye(T, dtype=torch.bool, device=x.device)[None, None]
            g = torch.where(eye, torch.ones_like(g), g)
            # row max over columns that can receive weight: the denominator
            # then holds an exp(0) term even when a gated-out column carries
            # the sharpest logit, which would otherwise underflow the row
            amax = a.masked_fill(g <= 0, float("-inf")).amax(dim=-1, keepdim=True).detach()
            # gated-out columns contribute 0 forward but carry gradient in g;
            # contributing columns satisfy a <= amax, so capping the exponent
            # at 0 leaves the forward pass untouched while bounding the
            # straight-through gradient of excluded sharp columns by exp(0)
            ea = torch.exp((a - amax).clamp(max=0.0))
            ea = ea * g
            w = ea / ea.sum(dim=-1, keepdim=True)
        out = (w @ v).transpose(1, 2).reshape(B, T, d)
        return self.o(out), w

    def forward(self, x: torch.Tensor, buckets: torch.Tensor,
                key_gate: Optional[torch.Tensor] = None,
                collect_attention: bool = False):
        att, w = self.attention(self.ln1(x), buckets, key_gate)
        x = x + att
        x = x + self.f2(F.gelu(self.f1(self.ln2(x))))
        return (x, w) if collect_attention else (x, None)


class TransformerLM(nn.Module):
    """Pre-LN decoder-only LM with tied embeddings and GPT-2-style init."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg.validate()
        self.emb = nn.Embedding(cfg.vocab_size, cfg.d_model)
        self.blocks = nn.ModuleList([Block(cfg) for _ in range(cfg.n_layers)])
        self.ln_f = nn.LayerNorm(cfg.d_model)
        if not cfg.tie_embeddings:
            self.lm_head = nn.Linear(cfg.d_model, cfg.vocab_size, bias=False)
        self.apply(self._init_weights)
        dist = bucket_center_distance(cfg.n_rel_buckets, cfg.max_seq_len)
        slopes = head_slopes(cfg.n_heads)
        for blk in self.blocks:
            nn.init.normal_(blk.o.weight, std=0.02 / math.sqrt(2 * cfg.n_layers))
            nn.init.normal_(blk.f2.weight, std=0.02 / math.sqrt(2 * cfg.n_layers))
            with torch.no_grad():
                blk.rel.weight.copy_(-dist[:, None] * slopes[None, :])

    @staticmethod
    def _init_weights(m: nn.Module) -> None:
        if isinstance(m, nn.Linear):
            nn.init.normal_(m.weight, std=0.02)
            if m.bias is not None:
                nn.init.zeros_(m.bias)
        elif isinstance(m, nn.Embedding):
            nn.init.normal_(m.weight, std=0.02)

    def _buckets(self, T: int, device) -> torch.Tensor:
        return relative_buckets(T, self.cfg.n_rel_buckets, self.cfg.max_seq_len).to(device)

    def encode(self, ids: torch.Tensor, key_gate: Optional[torch.Tensor] = None,
               collect_attention: bool = False) -> Tuple[torch.Tensor, Optional[torch.Tensor]]:
        """Hidden states of the final layer; optionally last-layer attention."""
        if ids.dim() != 2:
            raise ContractViolation("ids must be [batch, tokens]")
        B, T = ids.shape
        if T > self.cfg.max_seq_len:
            raise LengthError(f"input length {T} exceeds max_seq_len {self.cfg.max_seq_len}")
        if key_gate is not None:
            if key_gate.shape != ids.shape:
                raise ContractViolation("keep mask length must match token length")
            key_gate = key_gate.to(dtype=torch.float32)
        buckets = self._buckets(T, ids.device)
        x = self.emb(ids)
        attn_gate = key_gate
        if key_gate is not None and self.cfg.mask_mechanism == "embed-zero":
            x = x * key_gate[..., None]
            attn_gate = None
        last_attn = None
        for li, blk in enumerate(self.blocks):
            want = collect_attention and li == len(self.blocks) - 1
            x, w = blk(x, buckets, key_gate=attn_gate, collect_attention=want)
            if want:
                last_attn = w
        return self.ln_f(x), last_attn

    def logits_from_hidden(self, hidden: torch.Tensor) -> torch.Tensor:
        if self.cfg.tie_embeddings:
            return hidden @ self.emb.weight.T
        return self.lm_head(hidden)

    def forward(self, ids: torch.Tensor, key_gate: Optional[torch.Tensor] = None) -> torch.Tensor:
        hidden, _ = self.encode(ids, key_gate=key_gate)
        return self.logits_from_hidden(hidden)


@dataclass
class ForwardOutput:
    """Single-sequence forward result (logits rows correspond 1:1 to inputs)."""

    logits: torch.Tensor
    last_hidden: torch.Tensor
    last_layer_mean_attention: torch.Tensor


def mean_received_attention(attn: torch.Tensor) -> torch.Tensor:
    """Mean attention each token receives as a key.

    Average over heads and over causal-visible query positions (i >= j) of
    the last layer's attention weights; pairs hidden by causality are not
    counted in the denominator.
    """
    if attn.dim() != 4:
        raise ContractViolation("attention must be [batch, heads, query, key]")
    B, H, T, _ = attn.shape
    summed = attn.sum(dim=1).sum(dim=1)  # [B, T_key]
    visible = torch.arange(T, 0, -1, device=attn.device, dtype=attn.dtype)  # T - j
    return summed / (H * visible)[None, :]


def _as_ids_tensor(tokens: Union[TokenSequence, Sequence[int], torch.Tensor]) -> torch.Tensor:
    if isinstance(tokens, TokenSequence):
        ids = tokens.ids
    elif isinstance(tokens, torch.Tensor):
        ids = tokens
    else:
        ids = list(tokens)
    t = torch.as_tensor(ids, dtype=torch.long)
    if t.dim() != 1:
        raise ContractViolation("expected a single token sequence")
    return t


def forward(model: TransformerLM, tokens, keep_mask=None, adapters: Optional["AdapterSet"] = None) -> ForwardOutput:
    """Contract-level forward on one sequence.

    keep_mask may be a KeepMask, tensor, or sequence of {0,1}. When adapters
    is None any attached adapters are disabled for the call; passing an
    AdapterSet enables exactly that set.
    """
    ids = _as_ids_tensor(tokens)[None, :]
    gate = None
    if keep_mask is not None:
        values = keep_mask.values if isinstance(keep_mask, KeepMask) else keep_mask
        gate = torch.as_tensor(values, dtype=torch.float32)
        if gate.dim() == 1:
            gate = gate[None, :]
        if gate.shape != ids.shape:
            raise ContractViolation("keep mask length must match token length")
    attached = find_adapters(model)
    restore = {id(l): l.enabled for l in attached}
    for l in attached:
        l.enabled = adapters is not None and l in adapters.layers
    try:
        with torch.no_grad():
            hidden, attn = model.encode(ids, key_gate=gate, collect_attention=True)
            logits = model.logits_from_hidden(hidden)
            mean_attn = mean_received_attention(attn)
    finally:
        for l in attached:
            l.enabled = restore[id(l)]
    return ForwardOutput(logits=logits[0], last_hidden=hidden[0], last_layer_mean_attention=mean_attn[0])


def clm_loss(logits: torch.Tensor, tokens) -> torch.Tensor:
    """Mean next-token negative log-likelihood over positions 1..n-1."""
    ids = _as_ids_tensor(tokens)
    if ids.numel() < 2:
        raise ContractViolation("clm_loss needs at least 2 tokens")
    if logits.shape[0] != ids.numel():
        raise ContractViolation("logits rows must match token count")
    return F.cross_entropy(logits[:-1], ids[1:])


def per_position_nll(logits: torch.Tensor, ids: torch.Tensor) -> torch.Tensor:
    """-log P(x_i | x_<i) for i in 1..n-1, as a length n-1 vector."""
    return F.cross_entropy(logits[:-1], ids[1:], reduction="none")


def token_perplexities(model: TransformerLM, tokens, adapters: Optional["AdapterSet"] = None) -> torch.Tensor:
    """Per-token -log P(x_i | prefix); position 0 gets +inf (always keep)."""
    ids = _as_ids_tensor(tokens)
    if ids.numel() < 2:
        raise ContractViolation("token_perplexities needs at least 2 tokens")
    out = forward(model, ids, adapters=adapters)
    vals = per_position_nll(out.logits, ids)
    return torch.cat([torch.tensor([float("inf")]), vals])


class AdapterSet:
    """Handle over the LoraLinear layers attached to one model."""

    def __init__(self, layers: List[LoraLinear], config: AdapterConfig):
        self.layers = list(layers)
        self.config = config

    def parameters(self) -> Iterable[nn.Parameter]:
        for l in self.layers:
            yield l.A
            yield l.B

    def set_enabled(self, flag: bool) -> None:
        for l in self.layers:
            l.enabled = flag

    def state_dict(self) -> Dict[str, torch.Tensor]:
        out = {}
        for i, l in enumerate(self.layers):
            out[f"{i}.A"] = l.A.detach().clone()
            out[f"{i}.B"] = l.B.detach().clone()
        return out

    def load_state_dict(self, state: Dict[str, torch.Tensor]) -> None:
        for i, l in enumerate(self.layers):
            with torch.no_grad():
                l.A.copy_(state[f"{i}.A"])
                l.B.copy_(state[f"{i}.B"])


def attach_lora(model: TransformerLM, config: AdapterConfig = AdapterConfig()) -> AdapterSet:
    """Wrap target projections in every block; base weights are untouched."""
    config.validate()
    layers: List[LoraLinear] = []
    for blk in model.blocks:
        for name in config.targets:
            target = getattr(blk, name)
            if isinstance(target, LoraLinear):
                raise ContractViolation(f"block projection {name} already has adapters attached")
            if not isinstance(target, nn.Linear):
                raise ContractViolation(f"adapter target {name} is not a linear layer")
            wrapped = LoraLinear(target, rank=config.rank, alpha=config.alpha)
            setattr(blk, name, wrapped)
            layers.append(wrapped)
    return AdapterSet(layers, config)


def find_adapters(model: TransformerLM) -> List[LoraLinear]:
    return [m for m in model.modules() if isinstance(m, LoraLinear)]


def base_parameters(model: TransformerLM) -> List[Tuple[str, nn.Parameter]]:
    """Named parameters of the base model, excluding adapter factors."""
    return [(n, p) for n, p in model.named_parameters() if ".A" not in n and ".B" not in n]


def base_state_clone(model: TransformerLM) -> Dict[str, torch.Tensor]:
    return {n: p.detach().clone() for n, p in base_parameters(model)}
