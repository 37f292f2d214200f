"""Command-line entry point.

One subcommand per pipeline stage: pretrain, train-selector, compress, eval,
transfer, bench, analyze, report. Every run writes its fully-resolved
configuration as manifest.json beside its outputs, and all randomness flows
from the --seed / --task-seed flags, so any run can be reproduced from its
manifest alone.

Exit codes: 0 success, 1 validation/data failure (message names the field),
2 usage errors.
"""
from __future__ import annotations

import argparse
import csv
import json
import sys
from pathlib import Path
from typing import List, Optional

from . import analysis, baselines, corpus, evaluate, tasks, training
from .checkpoints import load_checkpoint, save_checkpoint
from .compress import chunked_compress
from .config import (AdapterConfig, ModelConfig, PretrainConfig, TrainConfig, WorldConfig,
                     write_manifest)
from .errors import SelectionPError
from .model import TransformerLM
from .tokenizer import WordTokenizer


def _parse_ratios(text: str) -> List[float]:
    try:
        return [float(x) for x in text.split(",") if x]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"bad ratio list {text!r}") from exc


def _parse_seeds(text: str) -> List[int]:
    try:
        return [int(x) for x in text.split(",") if x]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"bad seed list {text!r}") from exc


def _load_docs(path: str):
    fmt = "jsonl" if path.endswith(".jsonl") else "plain-text"
    docs, report = corpus.load_corpus(path, format=fmt)
    return docs, report


def _add_task_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--task", required=True,
                   help="path to a task JSON file, or 'synthetic-kv'")
    p.add_argument("--task-seed", type=int, default=0)
    p.add_argument("--filler-ratio", type=float, default=0.75)
    p.add_argument("--n-keys", type=int, default=24)
    p.add_argument("--n-options", type=int, default=8)
    p.add_argument("--n-test", type=int, default=64)


def _resolve_task(args) -> tasks.ClassificationTask:
    if args.task == "synthetic-kv":
        return tasks.make_synthetic_kv_task(
            n_keys=args.n_keys, filler_ratio=args.filler_ratio, seed=args.task_seed,
            n_options=args.n_options, n_test=args.n_test)
    return tasks.load_task(args.task)


def _manifest(args, out_dir: Path, **extra) -> None:
    resolved = {k: v for k, v in vars(args).items() if k != "func"}
    write_manifest(out_dir / "manifest.json", command=args.command, args=resolved, **extra)


def _cmd_pretrain(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    docs, report = _load_docs(args.corpus)
    tokenizer = WordTokenizer.train(docs)
    segments, corpus_manifest = corpus.build_segments(docs, tokenizer, args.segment, report)
    model_cfg = ModelConfig(vocab_size=tokenizer.vocab_size, n_layers=args.layers,
                            n_heads=args.heads, d_model=args.d_model, d_ff=args.d_ff,
                            max_seq_len=args.max_seq_len).validate()
    pre_cfg = PretrainConfig(steps=args.steps, batch_size=args.batch, segment_length=args.segment,
                             learning_rate=args.lr, warmup_steps=args.warmup,
                             schedule_horizon=args.horizon, seed=args.seed,
                             probe_threshold=None if args.no_probe else args.probe_threshold,
                             probe_every=args.probe_every, min_steps=args.min_steps).validate()
    model = TransformerLM(model_cfg)
    probe = None
    if not args.no_probe:
        probe = training.make_requery_probe(tokenizer, WorldConfig().validate())
    rows = training.pretrain_backbone(model, segments, pre_cfg, probe_fn=probe,
                                      log_path=out / "log.jsonl")
    step = rows[-1]["step"] if rows else 0
    save_checkpoint(out, model, tokenizer, step=step)
    _manifest(args, out, model_config=model_cfg, pretrain_config=pre_cfg,
              corpus=corpus_manifest.__dict__)
    print(f"pretrained {args.layers}-layer model for {step} steps -> {out}")
    return 0


def _cmd_train_selector(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    bundle = load_checkpoint(args.base)
    docs, report = _load_docs(args.corpus)
    segments, corpus_manifest = corpus.build_segments(docs, bundle.tokenizer, args.segment, report)
    cfg = TrainConfig(segment_length=args.segment, keep_ratio_schedule=tuple(args.ratios),
                      learning_rate=args.lr, steps=args.steps, batch_size=args.batch,
                      seed=args.seed, mask_mode=args.mask_mode).validate()
    adapter_cfg = AdapterConfig(rank=args.lora_rank, alpha=args.lora_alpha).validate()
    adapters, head, rows = training.train_selector(bundle.model, segments, cfg, adapter_cfg,
                                                   bos_id=bundle.tokenizer.bos_id,
                                                   log_path=out / "log.jsonl")
    save_checkpoint(out, bundle.model, bundle.tokenizer, step=cfg.steps,
                    adapters=adapters, head=head,
                    extra={"base_checkpoint": str(args.base)})
    _manifest(args, out, train_config=cfg, adapter_config=adapter_cfg,
              corpus=corpus_manifest.__dict__)
    print(f"trained selector for {cfg.steps} steps -> {out}")
    return 0


def _cmd_compress(args) -> int:
    bundle = load_checkpoint(args.checkpoint)
    text = Path(args.input).read_text(encoding="utf-8").strip()
    if args.method == "selection-p":
        comp = chunked_compress(text, args.ratio, bundle, chunk_size=args.chunk_size)
    elif args.method == "ppl":
        comp = baselines.perplexity_select(text, args.ratio, bundle, segment_size=args.segment_size)
    else:
        comp = baselines.random_select(text, args.ratio, bundle.tokenizer, seed=args.seed)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(comp.text + "\n", encoding="utf-8")
    _manifest(args, out.parent, result={
        "source_token_count": comp.source_token_count,
        "kept_token_count": comp.kept_token_count,
        "requested_ratio": comp.requested_ratio,
        "actual_ratio": comp.actual_ratio,
    })
    print(json.dumps({"kept": comp.kept_token_count, "of": comp.source_token_count,
                      "actual_ratio": round(comp.actual_ratio, 4)}))
    return 0


def _run_and_write(args, result: evaluate.TrialResult, out: Path, tag: str) -> None:
    evaluate.write_records_csv(result.records, out / f"records_{tag}.csv")
    evaluate.write_records_json(result.records, out / f"records_{tag}.json")
    print(f"{tag}: mean accuracy {result.mean_accuracy:.4f} over {len(result.records)} seeds")


def _cmd_eval(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    task = _resolve_task(args)
    bundle = load_checkpoint(args.checkpoint)
    result = evaluate.run_trial(task, args.method, args.ratio, args.budget, bundle,
                                seeds=args.seeds, n_test_cap=args.test_cap,
                                chunk_size=args.chunk_size, segment_size=args.segment_size,
                                nll_reduction=args.nll_reduction)
    _run_and_write(args, result, out, f"{task.name}_{args.method}")
    _manifest(args, out, mean_accuracy=result.mean_accuracy)
    return 0


def _cmd_transfer(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    task = _resolve_task(args)
    comp_bundle = load_checkpoint(args.compress_checkpoint)
    score_bundle = load_checkpoint(args.score_checkpoint)
    result = evaluate.transfer_eval(comp_bundle, score_bundle, task, args.ratio, args.budget,
                                    seeds=args.seeds, n_test_cap=args.test_cap)
    _run_and_write(args, result, out, f"{task.name}_transfer")
    _manifest(args, out, mean_accuracy=result.mean_accuracy)
    return 0


def _cmd_bench(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    task = _resolve_task(args)
    bundle = load_checkpoint(args.checkpoint)
    reports = analysis.measure_latency(task, bundle, ratios=args.ratios, budget_tokens=args.budget,
                                       seed=args.seed, n_test=args.n_bench,
                                       warmups=args.warmups, timed_runs=args.timed_runs)
    rows = [r.to_dict() for r in reports]
    (out / "latency.json").write_text(json.dumps(rows, indent=2) + "\n", encoding="utf-8")
    with (out / "latency.csv").open("w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0].keys()))
        writer.writeheader()
        writer.writerows(rows)
    _manifest(args, out)
    for r in reports:
        print(f"ratio {r.keep_ratio:g}: end-to-end {r.end_to_end_ms:.1f} ms "
              f"(compression {r.compression_ms:.1f} ms), speedup {r.speedup:.2f}x")
    return 0


def _cmd_analyze(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    bundle = load_checkpoint(args.checkpoint)
    task = _resolve_task(args)
    demo_set = evaluate.build_demo_set(task, bundle.tokenizer, args.budget, args.seed)
    prompt = evaluate.assemble_prompt(demo_set.demonstrations, task.template)
    corr = analysis.correlate_signals(prompt, bundle, task=task.name)
    comp = chunked_compress(prompt, args.ratio, bundle, chunk_size=args.chunk_size)
    pos = analysis.pos_preservation(prompt, comp)
    (out / "correlation.json").write_text(json.dumps(corr.to_dict(), indent=2) + "\n",
                                          encoding="utf-8")
    (out / "pos_preservation.json").write_text(json.dumps(pos.to_dict(), indent=2) + "\n",
                                               encoding="utf-8")
    if not args.no_plots:
        analysis.plot_pos_bars(pos, out / "pos_preservation.png")
        analysis.plot_correlation_heatmap(corr, out / "correlation.png")
    _manifest(args, out)
    print(json.dumps({"correlation": corr.to_dict(), "preservation": pos.preservation}))
    return 0


def _cmd_report(args) -> int:
    results = Path(args.results)
    records: List[evaluate.EvalRecord] = []
    for path in sorted(results.glob("**/records_*.json")):
        records.extend(evaluate.read_records_json(path))
    if not records:
        print(f"no records_*.json found under {results}", file=sys.stderr)
        return 1
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    task_names = sorted({r.task for r in records})
    conditions = sorted({r.compressor for r in records})
    table: List[dict] = []
    for cond in conditions:
        row = {"condition": cond}
        values = []
        for t in task_names:
            cell = [r.accuracy for r in records if r.compressor == cond and r.task == t]
            if cell:
                row[t] = sum(cell) / len(cell)
                values.append(row[t])
        row["AVG"] = sum(values) / len(values)
        table.append(row)
    fields = ["condition"] + task_names + ["AVG"]
    with (out / "summary.csv").open("w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=fields)
        writer.writeheader()
        writer.writerows(table)
    lines = ["| " + " | ".join(fields) + " |",
             "| " + " | ".join("---" for _ in fields) + " |"]
    for row in table:
        cells = [str(row["condition"])] + [
            f"{row[f]:.4f}" if f in row else "-" for f in fields[1:]]
        lines.append("| " + " | ".join(cells) + " |")
    (out / "summary.md").write_text("\n".join(lines) + "\n", encoding="utf-8")
    print("\n".join(lines))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="selectionp",
        description="Self-supervised per-token prompt compression: training, "
                    "compression, evaluation, and analysis.")
    parser.add_argument("--config", default=None,
                        help="JSON file of default flag values; explicit flags win")
    sub = parser.add_subparsers(dest="command", metavar="command")

    p = sub.add_parser("pretrain", help="train a base language model from scratch")
    p.add_argument("--corpus", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--layers", type=int, default=4)
    p.add_argument("--heads", type=int, default=4)
    p.add_argument("--d-model", type=int, default=64)
    p.add_argument("--d-ff", type=int, default=256)
    p.add_argument("--max-seq-len", type=int, default=2048)
    p.add_argument("--steps", type=int, default=3200)
    p.add_argument("--batch", type=int, default=8)
    p.add_argument("--segment", type=int, default=256)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--warmup", type=int, default=200)
    p.add_argument("--horizon", type=int, default=5000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--probe-threshold", type=float, default=0.15)
    p.add_argument("--probe-every", type=int, default=100)
    p.add_argument("--min-steps", type=int, default=2400)
    p.add_argument("--no-probe", action="store_true",
                   help="disable the in-context-retrieval early-stop probe")
    p.set_defaults(func=_cmd_pretrain)

    p = sub.add_parser("train-selector", help="train adapters + selection head on a frozen base")
    p.add_argument("--base", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--steps", type=int, default=300)
    p.add_argument("--batch", type=int, default=4)
    p.add_argument("--segment", type=int, default=256)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--ratios", type=_parse_ratios, default=[0.1, 0.2, 0.3, 0.5])
    p.add_argument("--mask-mode", choices=("hard-ste", "soft"), default="hard-ste")
    p.add_argument("--lora-rank", type=int, default=8)
    p.add_argument("--lora-alpha", type=float, default=16.0)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=_cmd_train_selector)

    p = sub.add_parser("compress", help="compress a text file")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--ratio", type=float, required=True)
    p.add_argument("--method", choices=("selection-p", "ppl", "random"), default="selection-p")
    p.add_argument("--chunk-size", type=int, default=None,
                   help="compression chunk length (default: model max)")
    p.add_argument("--segment-size", type=int, default=256)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=_cmd_compress)

    p = sub.add_parser("eval", help="in-context-learning trial")
    _add_task_flags(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--method", choices=evaluate.METHODS, default="selection-p")
    p.add_argument("--ratio", type=float, default=1.0)
    p.add_argument("--budget", type=int, default=750)
    p.add_argument("--seeds", type=_parse_seeds, default=[0, 1, 2, 3])
    p.add_argument("--test-cap", type=int, default=200)
    p.add_argument("--chunk-size", type=int, default=None,
                   help="compression chunk length (default: model max)")
    p.add_argument("--segment-size", type=int, default=256)
    p.add_argument("--nll-reduction", choices=("sum", "mean"), default="sum")
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("transfer", help="compress with model A, score with model B")
    _add_task_flags(p)
    p.add_argument("--compress-checkpoint", required=True)
    p.add_argument("--score-checkpoint", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--ratio", type=float, default=0.3)
    p.add_argument("--budget", type=int, default=750)
    p.add_argument("--seeds", type=_parse_seeds, default=[0, 1, 2, 3])
    p.add_argument("--test-cap", type=int, default=200)
    p.set_defaults(func=_cmd_transfer)

    p = sub.add_parser("bench", help="latency benchmark across keep ratios")
    _add_task_flags(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--ratios", type=_parse_ratios, default=[1.0, 0.5, 0.2, 0.1])
    p.add_argument("--budget", type=int, default=750)
    p.add_argument("--n-bench", type=int, default=16)
    p.add_argument("--warmups", type=int, default=3)
    p.add_argument("--timed-runs", type=int, default=5)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=_cmd_bench)

    p = sub.add_parser("analyze", help="correlation and preservation analyses")
    _add_task_flags(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--ratio", type=float, default=0.3)
    p.add_argument("--budget", type=int, default=750)
    p.add_argument("--chunk-size", type=int, default=None,
                   help="compression chunk length (default: model max)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--no-plots", action="store_true")
    p.set_defaults(func=_cmd_analyze)

    p = sub.add_parser("report", help="summarize eval records as Markdown + CSV")
    p.add_argument("--results", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_report)
    # subparsers re-apply their own defaults at parse time, so config-file
    # overrides must be installed on each of them, not just the root parser
    parser.command_parsers = {name: sp for name, sp in sub.choices.items()}
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    if "--config" in argv:
        cfg_path = argv[argv.index("--config") + 1]
        try:
            overrides = json.loads(Path(cfg_path).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            print(f"error: cannot read config {cfg_path}: {exc}", file=sys.stderr)
            return 1
        parser.set_defaults(**overrides)
        for sp in parser.command_parsers.values():
            known = {a.dest for a in sp._actions}
            sp.set_defaults(**{k: v for k, v in overrides.items() if k in known})
    args = parser.parse_args(argv)
    if getattr(args, "command", None) is None:
        parser.print_usage(sys.stderr)
        return 2
    try:
        return args.func(args)
    except SelectionPError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
