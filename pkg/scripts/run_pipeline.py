#!/usr/bin/env python3
"""Build every experiment artifact: corpus, base models, selector checkpoints.

Idempotent: stages whose outputs already exist are skipped, so a partial run
can be resumed. Expect roughly 30-50 minutes on one CPU core for the full
build (two base pretrains dominate; both stop early once the in-context
retrieval probe clears its threshold).

Layout under --root (default <repo>/artifacts):
    corpus/train.txt            world corpus for pretraining + selector training
    checkpoints/base4/          4-layer base LM (compression side)
    checkpoints/base8/          8-layer base LM (independent scoring side)
    checkpoints/selector_s{0,1,2}/   adapters + selection head, three seeds
"""
import argparse
import sys
import time
from pathlib import Path

import torch

torch.set_num_threads(1)

from selectionp.checkpoints import load_checkpoint, save_checkpoint
from selectionp.config import (AdapterConfig, ModelConfig, PretrainConfig, TrainConfig,
                               WorldConfig, write_manifest)
from selectionp.corpus import build_segments, generate_corpus, load_corpus, world_words
from selectionp.model import TransformerLM
from selectionp.tokenizer import WordTokenizer
from selectionp.training import make_requery_probe, pretrain_backbone, train_selector

WORLD = WorldConfig()

# Desk-scale experiment shape: d64 keeps a pretraining run in minutes on one
# CPU core while still forming in-context retrieval (verified by the probe).
BASE4 = dict(n_layers=4, n_heads=4, d_model=64, d_ff=256)
BASE8 = dict(n_layers=8, n_heads=4, d_model=64, d_ff=256)

PRETRAIN4 = PretrainConfig(steps=4000, batch_size=8, segment_length=256, learning_rate=1e-3,
                           warmup_steps=200, schedule_horizon=5000, seed=0,
                           probe_threshold=0.15, probe_every=100, min_steps=2400)
PRETRAIN8 = PretrainConfig(steps=5000, batch_size=8, segment_length=256, learning_rate=1e-3,
                           warmup_steps=200, schedule_horizon=6000, seed=1,
                           probe_threshold=0.15, probe_every=100, min_steps=2400)
SELECTOR = TrainConfig(segment_length=256, keep_ratio_schedule=(0.1, 0.2, 0.3, 0.5),
                       learning_rate=1e-3, steps=300, batch_size=4)

QUICK_SCALE = dict(steps=30, min_steps=0, probe_threshold=None)


def ensure_corpus(root: Path, quick: bool) -> Path:
    path = root / "corpus" / "train.txt"
    if path.exists():
        print(f"[corpus] exists: {path}")
        return path
    n_docs = 16 if quick else 256
    stats = generate_corpus(path, WORLD.validate(), n_documents=n_docs, doc_length=2048, seed=11)
    print(f"[corpus] wrote {stats['documents']} docs, {stats['tokens']} tokens")
    return path


def build_tokenizer(docs) -> WordTokenizer:
    # coverage line guarantees every world surface form is in-vocabulary,
    # even ones a sampled corpus happens to miss
    words = world_words(WORLD)
    coverage = " ".join(words["keys"] + words["values"] + words["fillers"])
    return WordTokenizer.train(list(docs) + [coverage])


def ensure_base(root: Path, name: str, arch: dict, cfg: PretrainConfig, quick: bool) -> Path:
    out = root / "checkpoints" / name
    if (out / "header.json").exists():
        print(f"[{name}] exists: {out}")
        return out
    docs, report = load_corpus(root / "corpus" / "train.txt")
    tokenizer = build_tokenizer(docs)
    segments, corpus_manifest = build_segments(docs, tokenizer, cfg.segment_length, report)
    if quick:
        cfg = PretrainConfig(**{**cfg.__dict__, **QUICK_SCALE})
    model_cfg = ModelConfig(vocab_size=tokenizer.vocab_size, max_seq_len=2048, **arch).validate()
    model = TransformerLM(model_cfg)
    probe = make_requery_probe(tokenizer, WORLD)
    t0 = time.monotonic()
    rows = pretrain_backbone(model, segments, cfg.validate(), probe_fn=probe,
                             log_path=out / "log.jsonl")
    probes = [r for r in rows if "probe" in r]
    step = max((r["step"] for r in rows), default=0)
    save_checkpoint(out, model, tokenizer, step=step)
    write_manifest(out / "manifest.json", model_config=model_cfg, pretrain_config=cfg,
                   corpus=corpus_manifest.__dict__)
    last_probe = probes[-1]["probe"] if probes else float("nan")
    print(f"[{name}] {step} steps in {time.monotonic()-t0:.0f}s, final probe NLL {last_probe:.3f}")
    return out


def ensure_selector(root: Path, base: Path, seed: int, quick: bool) -> Path:
    out = root / "checkpoints" / f"selector_s{seed}"
    if (out / "header.json").exists():
        print(f"[selector_s{seed}] exists: {out}")
        return out
    bundle = load_checkpoint(base)
    docs, report = load_corpus(root / "corpus" / "train.txt")
    segments, _ = build_segments(docs, bundle.tokenizer, SELECTOR.segment_length, report)
    cfg = TrainConfig(**{**SELECTOR.__dict__, "seed": seed,
                         **({"steps": 5} if quick else {})}).validate()
    adapter_cfg = AdapterConfig().validate()
    t0 = time.monotonic()
    adapters, head, rows = train_selector(bundle.model, segments, cfg, adapter_cfg,
                                          bos_id=bundle.tokenizer.bos_id,
                                          log_path=out / "log.jsonl")
    save_checkpoint(out, bundle.model, bundle.tokenizer, step=cfg.steps,
                    adapters=adapters, head=head, extra={"base_checkpoint": str(base)})
    write_manifest(out / "manifest.json", train_config=cfg, adapter_config=adapter_cfg)
    print(f"[selector_s{seed}] {cfg.steps} steps in {time.monotonic()-t0:.0f}s, "
          f"final loss {rows[-1]['loss']:.3f}")
    return out


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(description=__doc__,
                                     formatter_class=argparse.RawDescriptionHelpFormatter)
    parser.add_argument("--root", default=str(Path(__file__).resolve().parent.parent / "artifacts"))
    parser.add_argument("--quick", action="store_true",
                        help="tiny stand-in build for smoke testing the plumbing")
    parser.add_argument("--skip-8l", action="store_true")
    args = parser.parse_args(argv)
    root = Path(args.root)
    ensure_corpus(root, args.quick)
    base4 = ensure_base(root, "base4", BASE4, PRETRAIN4, args.quick)
    for seed in (0, 1, 2):
        ensure_selector(root, base4, seed, args.quick)
    if not args.skip_8l:
        ensure_base(root, "base8", BASE8, PRETRAIN8, args.quick)
    print("pipeline complete")
    return 0


if __name__ == "__main__":
    sys.exit(main())
