"""In-context-learning evaluation harness.

A trial fixes a demonstration budget and a compression method, then for each
seed: sample a demonstration set, compress the joined demonstration prompt
once, and score every test instance by summed option NLL. Accuracy per seed
plus the mean across seeds mirrors the multi-trial protocol of the
compression experiments.
"""
from __future__ import annotations

import csv
import json
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, List, Optional, Sequence

import numpy as np
import torch

from .baselines import demo_truncate, perplexity_select, random_select
from .checkpoints import CheckpointBundle
from .compress import CompressedPrompt, CompressionCache, chunked_compress
from .corpus import BOS_TOKEN
from .errors import ConfigurationError, DataError, LengthError
from .model import per_position_nll
from .tasks import ClassificationTask, Template

METHODS = ("selection-p", "ppl", "random", "demo-truncate", "zero-shot", "full-shot")


@dataclass
class DemonstrationSet:
    task_name: str
    seed: int
    demonstrations: List[str]
    demo_tokens: List[int]
    budget_tokens: int

    def __post_init__(self):
        if len(self.demonstrations) != len(self.demo_tokens):
            raise ConfigurationError("demonstrations/demo_tokens length mismatch")
        if self.demonstrations and self.total_tokens > self.budget_tokens + max(self.demo_tokens):
            raise ConfigurationError(
                f"greedy fill overshot: {self.total_tokens} tokens against budget {self.budget_tokens}")

    @property
    def total_tokens(self) -> int:
        return sum(self.demo_tokens)


@dataclass
class EvalRecord:
    task: str
    seed: int
    compressor: str
    keep_ratio: float
    accuracy: float
    n_test: int
    prompt_tokens: int
    wall_ms: float

    def to_dict(self) -> dict:
        return dict(self.__dict__)


@dataclass
class TrialResult:
    records: List[EvalRecord]

    @property
    def mean_accuracy(self) -> float:
        return float(np.mean([r.accuracy for r in self.records]))


def build_demo_set(task: ClassificationTask, tokenizer, budget_tokens: int, seed: int) -> DemonstrationSet:
    """Seed-shuffled greedy fill: append demos while under budget, at least one."""
    if not task.train:
        raise ConfigurationError(f"task {task.name!r} has an empty training split")
    if budget_tokens < 0:
        raise ConfigurationError("budget_tokens must be >= 0")
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(task.train))
    demos: List[str] = []
    counts: List[int] = []
    for idx in order:
        if demos and sum(counts) >= budget_tokens:
            break
        inst = task.train[int(idx)]
        text = task.template.demonstration(inst.context, inst.label)
        demos.append(text)
        counts.append(len(tokenizer.tokenize(text, strict=False)))
    return DemonstrationSet(task_name=task.name, seed=seed, demonstrations=demos,
                            demo_tokens=counts, budget_tokens=budget_tokens)


def assemble_prompt(demonstrations: Sequence[str], template: Template) -> str:
    parts = ([BOS_TOKEN] if template.prepend_bos else []) + list(demonstrations)
    return " ".join(p for p in parts if p)


def score_options(prompt: str, context: str, options: Sequence[str],
                  bundle: CheckpointBundle, reduction: str = "sum",
                  use_adapters: bool = False) -> int:
    """Predict the option with minimal summed NLL; ties go to the smallest index."""
    if reduction not in ("sum", "mean"):
        raise ConfigurationError("reduction must be sum or mean")
    prefix_text = " ".join(p for p in (prompt, context) if p)
    prefix = bundle.tokenizer.tokenize(prefix_text, strict=True)
    if bundle.adapters is not None:
        bundle.adapters.set_enabled(use_adapters)
    scores = np.empty(len(options))
    for oi, option in enumerate(options):
        opt_ids = bundle.tokenizer.tokenize(option, strict=True)
        if not opt_ids:
            raise DataError(f"option {oi} tokenizes to nothing")
        ids = prefix + opt_ids
        if len(ids) > bundle.config.max_seq_len:
            raise LengthError(
                f"prompt+context+option is {len(ids)} tokens (max {bundle.config.max_seq_len}); "
                "compress harder")
        tens = torch.tensor([ids])
        with torch.no_grad():
            logits = bundle.model(tens)[0]
        nll = per_position_nll(logits, tens[0])[len(prefix):]
        scores[oi] = nll.sum().item() if reduction == "sum" else nll.mean().item()
    return int(np.argmin(scores))


def _compress_prompt(method: str, prompt_text: str, keep_ratio: float,
                     compress_bundle: CheckpointBundle, seed: int,
                     chunk_size: int, segment_size: int,
                     cache: Optional[CompressionCache]) -> CompressedPrompt:
    if method == "selection-p":
        chunk_size = min(chunk_size or 2048, compress_bundle.config.max_seq_len)
        if cache is not None:
            return cache.get_or_compute(compress_bundle, prompt_text, keep_ratio, chunk_size)
        return chunked_compress(prompt_text, keep_ratio, compress_bundle, chunk_size=chunk_size)
    if method == "ppl":
        return perplexity_select(prompt_text, keep_ratio, compress_bundle, segment_size=segment_size)
    if method == "random":
        return random_select(prompt_text, keep_ratio, compress_bundle.tokenizer, seed=seed)
    raise ConfigurationError(f"no token-level compressor for method {method!r}")


def _bundle_label(bundle: CheckpointBundle) -> str:
    return bundle.path.name if bundle.path is not None else "mem"


def run_trial(task: ClassificationTask, method: str, keep_ratio: float,
              budget_tokens: int, score_bundle: CheckpointBundle,
              compress_bundle: Optional[CheckpointBundle] = None,
              seeds: Sequence[int] = (0, 1, 2, 3), n_test_cap: int = 200,
              chunk_size: Optional[int] = None, segment_size: int = 256,
              nll_reduction: str = "sum", cache: Optional[CompressionCache] = None,
              on_record: Optional[Callable[[EvalRecord], None]] = None) -> TrialResult:
    """Evaluate one (task, method, ratio) condition across demonstration seeds."""
    if method not in METHODS:
        raise ConfigurationError(f"unknown method {method!r}; expected one of {METHODS}")
    if not 0.0 < keep_ratio <= 1.0:
        raise ConfigurationError(f"keep_ratio {keep_ratio} outside (0, 1]")
    task.validate()
    compress_bundle = compress_bundle or score_bundle
    compressor_id = f"{method}@{keep_ratio:g}"
    if compress_bundle is not score_bundle:
        compressor_id += f"[compress={_bundle_label(compress_bundle)},score={_bundle_label(score_bundle)}]"
    records: List[EvalRecord] = []
    for seed in seeds:
        t0 = time.perf_counter()
        if method == "zero-shot":
            prompt_text = ""
            prompt_tokens = 0
        else:
            demo_set = build_demo_set(task, compress_bundle.tokenizer, budget_tokens, seed)
            demos = demo_set.demonstrations
            if method == "demo-truncate":
                demos = demo_truncate(demos, keep_ratio)
            prompt_text = assemble_prompt(demos, task.template)
            if method in ("selection-p", "ppl", "random"):
                comp = _compress_prompt(method, prompt_text, keep_ratio, compress_bundle,
                                        seed, chunk_size, segment_size, cache)
                prompt_text = comp.text
                prompt_tokens = comp.kept_token_count
            else:
                prompt_tokens = len(score_bundle.tokenizer.tokenize(prompt_text, strict=False))
        test = task.test[:n_test_cap]
        correct = 0
        for inst in test:
            pred = score_options(prompt_text, task.template.query(inst.context),
                                 inst.options, score_bundle, reduction=nll_reduction)
            correct += int(pred == inst.gold)
        rec = EvalRecord(task=task.name, seed=int(seed), compressor=compressor_id,
                         keep_ratio=keep_ratio, accuracy=correct / len(test),
                         n_test=len(test), prompt_tokens=prompt_tokens,
                         wall_ms=(time.perf_counter() - t0) * 1e3)
        records.append(rec)
        if on_record is not None:
            on_record(rec)
    return TrialResult(records=records)


def transfer_eval(compress_bundle: CheckpointBundle, score_bundle: CheckpointBundle,
                  task: ClassificationTask, keep_ratio: float, budget_tokens: int,
                  **kwargs) -> TrialResult:
    """Compress with one checkpoint, score likelihoods with another."""
    try:
        return run_trial(task, "selection-p", keep_ratio, budget_tokens,
                         score_bundle=score_bundle, compress_bundle=compress_bundle, **kwargs)
    except DataError as exc:
        raise ConfigurationError(
            f"scoring tokenizer cannot cover the compressor's output: {exc}") from exc


def write_records_csv(records: Sequence[EvalRecord], path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fields = ["task", "seed", "compressor", "keep_ratio", "accuracy", "n_test",
              "prompt_tokens", "wall_ms"]
    with path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=fields)
        writer.writeheader()
        for rec in records:
            writer.writerow(rec.to_dict())


def write_records_json(records: Sequence[EvalRecord], path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps([r.to_dict() for r in records], indent=2) + "\n", encoding="utf-8")


def read_records_json(path) -> List[EvalRecord]:
    rows = json.loads(Path(path).read_text(encoding="utf-8"))
    return [EvalRecord(**row) for row in rows]
