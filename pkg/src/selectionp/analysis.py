"""Correlation, part-of-speech preservation, and latency analyses.

All analyses are read-only over checkpoints and compression outputs. The
rank correlations relate three per-token signals on the same sequence:
selection probability p, mean received attention (last layer of the tuned
model), and conditional token perplexity.
"""
from __future__ import annotations

import time
import warnings
from dataclasses import dataclass, field
from statistics import median
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
import scipy.stats
import torch

from .checkpoints import CheckpointBundle
from .compress import CompressedPrompt, chunked_compress
from .corpus import classify_word
from .errors import ConfigurationError, ContractViolation
from .evaluate import assemble_prompt, build_demo_set, score_options
from .model import forward, token_perplexities
from .selector import score
from .tasks import ClassificationTask


def spearman(x: Sequence[float], y: Sequence[float]) -> Optional[float]:
    """Rank correlation with average ranks for ties.

    Returns None when undefined (either vector constant): an explicit marker
    rather than a fake 0, because "no monotone signal" and "undefined" are
    different findings.
    """
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if x.shape != y.shape:
        raise ContractViolation(f"length mismatch: {x.shape} vs {y.shape}")
    if x.size < 3:
        raise ContractViolation("spearman needs >= 3 points")
    if np.ptp(x) == 0 or np.ptp(y) == 0:
        return None
    rho = scipy.stats.spearmanr(x, y).correlation
    return None if np.isnan(rho) else float(rho)


@dataclass
class CorrelationReport:
    task: str
    n_tokens: int
    p_vs_attention: Optional[float]
    p_vs_perplexity: Optional[float]
    attention_vs_perplexity: Optional[float]

    def to_dict(self) -> dict:
        return dict(self.__dict__)


def token_signals(text: str, bundle: CheckpointBundle,
                  use_adapters: bool = True) -> Tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """(p, mean received attention, perplexity) per token of one sequence."""
    if bundle.head is None:
        raise ConfigurationError("checkpoint has no selection head")
    ids = torch.tensor(bundle.tokenizer.tokenize(text, strict=True))
    adapters = bundle.adapters if use_adapters else None
    out = forward(bundle.model, ids, adapters=adapters)
    with torch.no_grad():
        p = score(out.last_hidden, bundle.head)
    ppl = token_perplexities(bundle.model, ids, adapters=adapters)
    return p, out.last_layer_mean_attention, ppl


def correlate_signals(text: str, bundle: CheckpointBundle, task: str = "",
                      use_adapters: bool = True) -> CorrelationReport:
    """Pairwise Spearman among p, attention, perplexity on one sequence.

    Token 0 is excluded from pairs involving perplexity (its conditional is
    undefined; the +inf sentinel would otherwise dominate the ranking).
    """
    p, attn, ppl = token_signals(text, bundle, use_adapters=use_adapters)
    p_np, attn_np, ppl_np = p.numpy(), attn.numpy(), ppl.numpy()
    return CorrelationReport(
        task=task,
        n_tokens=int(p_np.size),
        p_vs_attention=spearman(p_np, attn_np),
        p_vs_perplexity=spearman(p_np[1:], ppl_np[1:]),
        attention_vs_perplexity=spearman(attn_np[1:], ppl_np[1:]),
    )


@dataclass
class PosReport:
    """Per-tag word preservation: kept/total, for tags above 1% frequency."""

    preservation: Dict[str, float]
    frequency: Dict[str, float]
    kept_counts: Dict[str, int]
    total_counts: Dict[str, int]
    excluded_tokens: int = 0
    min_frequency: float = 0.01

    def to_dict(self) -> dict:
        return dict(self.__dict__)


def pos_preservation(original_text: str, compressed: CompressedPrompt,
                     tagger: Callable[[str], str] = classify_word,
                     min_frequency: float = 0.01) -> PosReport:
    """Fraction of each tag's words surviving compression.

    kept_indices index the whitespace words of the original text; indices
    that fall outside it are warned about and excluded from both sides.
    """
    words = original_text.split()
    if not words:
        raise ContractViolation("empty original text")
    excluded = 0
    kept_set = set()
    for idx in compressed.kept_indices:
        if 0 <= idx < len(words):
            kept_set.add(idx)
        else:
            warnings.warn(f"kept index {idx} does not align to a source word; excluded")
            excluded += 1
    total: Dict[str, int] = {}
    kept: Dict[str, int] = {}
    for i, w in enumerate(words):
        tag = tagger(w)
        total[tag] = total.get(tag, 0) + 1
        if i in kept_set:
            kept[tag] = kept.get(tag, 0) + 1
    n = len(words)
    frequency = {t: c / n for t, c in total.items()}
    reported = {t for t, f in frequency.items() if f > min_frequency}
    return PosReport(
        preservation={t: kept.get(t, 0) / total[t] for t in sorted(reported)},
        frequency={t: frequency[t] for t in sorted(reported)},
        kept_counts={t: kept.get(t, 0) for t in sorted(total)},
        total_counts={t: total[t] for t in sorted(total)},
        excluded_tokens=excluded,
        min_frequency=min_frequency,
    )


def payload_preservation(original_text: str, compressed: CompressedPrompt,
                         payload_tags: Sequence[str] = ("key", "value"),
                         tagger: Callable[[str], str] = classify_word) -> float:
    """Fraction of payload-tagged words kept (ground truth on the kv world)."""
    report = pos_preservation(original_text, compressed, tagger=tagger)
    total = sum(report.total_counts.get(t, 0) for t in payload_tags)
    if total == 0:
        raise ContractViolation(f"no words tagged {payload_tags} in the original")
    kept = sum(report.kept_counts.get(t, 0) for t in payload_tags)
    return kept / total


@dataclass
class LatencyReport:
    condition: str
    keep_ratio: float
    compression_ms: float
    inference_ms: float
    end_to_end_ms: float
    speedup: float

    def __post_init__(self):
        if self.end_to_end_ms + 1e-9 < self.inference_ms:
            raise ContractViolation("end_to_end_ms must cover inference_ms")

    def to_dict(self) -> dict:
        return dict(self.__dict__)


def _timed_condition(task: ClassificationTask, prompt_full: str, ratio: float,
                     score_bundle: CheckpointBundle, compress_bundle: CheckpointBundle,
                     n_test: int, chunk_size: Optional[int]) -> Tuple[float, float]:
    """(compression_ms, inference_ms) for one full trial cycle."""
    t0 = time.perf_counter()
    if ratio >= 1.0:
        prompt_text = prompt_full  # uncompressed reference: no selection pass
    else:
        prompt_text = chunked_compress(prompt_full, ratio, compress_bundle,
                                       chunk_size=chunk_size).text
    t1 = time.perf_counter()
    for inst in task.test[:n_test]:
        score_options(prompt_text, task.template.query(inst.context), inst.options, score_bundle)
    t2 = time.perf_counter()
    return (t1 - t0) * 1e3, (t2 - t1) * 1e3


def measure_latency(task: ClassificationTask, score_bundle: CheckpointBundle,
                    compress_bundle: Optional[CheckpointBundle] = None,
                    ratios: Sequence[float] = (1.0, 0.5, 0.2, 0.1),
                    budget_tokens: int = 750, seed: int = 0, n_test: int = 16,
                    warmups: int = 3, timed_runs: int = 5,
                    chunk_size: Optional[int] = None) -> List[LatencyReport]:
    """Median-of-n wall times per keep ratio, with warmup runs discarded.

    The ratio-1.0 condition is the uncompressed reference all speedups are
    measured against; it is always run even if absent from `ratios`.
    """
    if timed_runs < 1 or warmups < 0:
        raise ConfigurationError("need timed_runs >= 1 and warmups >= 0")
    compress_bundle = compress_bundle or score_bundle
    task.validate()
    demo_set = build_demo_set(task, compress_bundle.tokenizer, budget_tokens, seed)
    prompt_full = assemble_prompt(demo_set.demonstrations, task.template)
    conditions = list(dict.fromkeys([1.0] + [float(r) for r in ratios]))
    medians: Dict[float, Tuple[float, float]] = {}
    for ratio in conditions:
        for _ in range(warmups):
            _timed_condition(task, prompt_full, ratio, score_bundle, compress_bundle,
                             n_test, chunk_size)
        runs = [_timed_condition(task, prompt_full, ratio, score_bundle, compress_bundle,
                                 n_test, chunk_size) for _ in range(timed_runs)]
        medians[ratio] = (median(c for c, _ in runs), median(i for _, i in runs))
    base_e2e = sum(medians[1.0])
    reports = []
    for ratio in conditions:
        if ratio not in [float(r) for r in ratios]:
            continue
        comp_ms, inf_ms = medians[ratio]
        e2e = comp_ms + inf_ms
        reports.append(LatencyReport(
            condition="full-shot" if ratio >= 1.0 else f"selection-p@{ratio:g}",
            keep_ratio=ratio, compression_ms=comp_ms, inference_ms=inf_ms,
            end_to_end_ms=e2e, speedup=base_e2e / e2e))
    return reports


def plot_pos_bars(report: PosReport, path) -> None:
    """Bar chart of per-tag preservation ratios (static image)."""
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    tags = list(report.preservation)
    fig, ax = plt.subplots(figsize=(6, 3.5))
    ax.bar(tags, [report.preservation[t] for t in tags], color="#4878a8")
    ax.set_ylabel("token preservation")
    ax.set_ylim(0, 1.05)
    for i, t in enumerate(tags):
        ax.text(i, report.preservation[t] + 0.02, f"{report.preservation[t]:.2f}",
                ha="center", fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def plot_correlation_heatmap(report: CorrelationReport, path) -> None:
    """3x3 heatmap of the pairwise rank correlations (static image)."""
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    names = ["p", "attention", "perplexity"]
    def val(v):
        return np.nan if v is None else v
    m = np.array([
        [1.0, val(report.p_vs_attention), val(report.p_vs_perplexity)],
        [val(report.p_vs_attention), 1.0, val(report.attention_vs_perplexity)],
        [val(report.p_vs_perplexity), val(report.attention_vs_perplexity), 1.0],
    ])
    fig, ax = plt.subplots(figsize=(4.2, 3.6))
    im = ax.imshow(m, vmin=-1, vmax=1, cmap="coolwarm")
    ax.set_xticks(range(3), names)
    ax.set_yticks(range(3), names)
    for i in range(3):
        for j in range(3):
            label = "n/a" if np.isnan(m[i, j]) else f"{m[i, j]:.2f}"
            ax.text(j, i, label, ha="center", va="center", fontsize=9)
    fig.colorbar(im, ax=ax, shrink=0.85)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
