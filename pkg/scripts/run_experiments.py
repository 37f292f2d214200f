#!/usr/bin/env python3
"""Run the full experiment suite against the built artifacts.

Stages (each idempotent, writing under --results):
    eval      ICL accuracy table: methods x keep ratios x three kv task variants
    growth    accuracy vs demonstration budget, compressed vs full prompts
    transfer  compress with the 4-layer selector, score with the 8-layer base
    bench     end-to-end latency across keep ratios
    analyze   signal correlations + class preservation (json + png)
    report    collect all records into summary.csv / summary.md

Expects `scripts/run_pipeline.py` to have populated --root first. Wall time
for the default settings is roughly 20-40 minutes on one CPU core; use
--quick for a fast smoke pass.
"""
import argparse
import json
import sys
import time
from pathlib import Path

import torch

torch.set_num_threads(1)

from scipy import stats

from selectionp import analysis, evaluate
from selectionp.checkpoints import load_checkpoint
from selectionp.cli import main as cli_main
from selectionp.compress import chunked_compress
from selectionp.config import write_manifest
from selectionp.tasks import make_synthetic_kv_task

RATIOS = (0.1, 0.2, 0.3, 0.5)
COMPRESSORS = ("selection-p", "ppl", "random", "demo-truncate")


def task_suite(quick: bool):
    n_test = 16 if quick else 48
    return [make_synthetic_kv_task(n_keys=24, filler_ratio=f, seed=0, n_test=n_test)
            for f in (0.6, 0.75, 0.85)]


def stage_eval(args, root: Path, out: Path) -> None:
    sel = load_checkpoint(root / "checkpoints" / args.selector)
    seeds = (0,) if args.quick else (0, 1, 2)
    cache = evaluate.CompressionCache()
    for task in task_suite(args.quick):
        for method, ratio in ([("full-shot", 1.0), ("zero-shot", 1.0)] +
                              [(m, r) for m in COMPRESSORS for r in RATIOS]):
            tag = f"{task.name}_{method}_r{ratio:g}"
            path = out / f"records_{tag}.json"
            if path.exists():
                continue
            t0 = time.monotonic()
            result = evaluate.run_trial(task, method, ratio, args.budget, sel,
                                        seeds=seeds, n_test_cap=args.test_cap, cache=cache)
            evaluate.write_records_json(result.records, path)
            print(f"[eval] {tag}: acc {result.mean_accuracy:.3f} "
                  f"({time.monotonic()-t0:.0f}s)", flush=True)


def stage_growth(args, root: Path, out: Path) -> None:
    """More demonstration budget should buy accuracy, compressed or not."""
    done = out / "growth.json"
    if done.exists():
        print(f"[growth] exists: {done}")
        return
    sel = load_checkpoint(root / "checkpoints" / args.selector)
    task = make_synthetic_kv_task(n_keys=28, filler_ratio=0.6, seed=0,
                                  n_test=16 if args.quick else 48)
    seeds = (0,) if args.quick else (0, 1, 2)
    budgets = (64, 128, 224)
    points = {"full-shot": [], "selection-p": []}
    for budget in budgets:
        for method in points:
            ratio = 1.0 if method == "full-shot" else 0.3
            result = evaluate.run_trial(task, method, ratio, budget, sel,
                                        seeds=seeds, n_test_cap=args.test_cap)
            evaluate.write_records_json(result.records,
                                        out / f"records_growth_{method}_b{budget}.json")
            for rec in result.records:
                points[method].append((budget, rec.accuracy))
            print(f"[growth] {method} @ budget {budget}: {result.mean_accuracy:.3f}", flush=True)
    trends = {}
    for method, pts in points.items():
        rho = stats.spearmanr([b for b, _ in pts], [a for _, a in pts]).statistic
        trends[method] = None if rho != rho else float(rho)
    done.write_text(json.dumps({"budgets": budgets, "points": points, "spearman": trends},
                               indent=2) + "\n", encoding="utf-8")
    print(f"[growth] spearman vs budget: {trends}")


def stage_transfer(args, root: Path, out: Path) -> None:
    sel = load_checkpoint(root / "checkpoints" / args.selector)
    big = load_checkpoint(root / "checkpoints" / "base8")
    seeds = (0,) if args.quick else (0, 1, 2)
    task = make_synthetic_kv_task(n_keys=24, filler_ratio=0.75, seed=0,
                                  n_test=16 if args.quick else 48)
    for method, ratio in [("full-shot", 1.0), ("selection-p", 0.3), ("random", 0.3)]:
        tag = f"transfer_{method}_r{ratio:g}"
        path = out / f"records_{tag}.json"
        if path.exists():
            continue
        if method == "selection-p":
            result = evaluate.transfer_eval(sel, big, task, ratio, args.budget,
                                            seeds=seeds, n_test_cap=args.test_cap)
        else:
            result = evaluate.run_trial(task, method, ratio, args.budget, big,
                                        compress_bundle=sel, seeds=seeds,
                                        n_test_cap=args.test_cap)
        evaluate.write_records_json(result.records, path)
        print(f"[transfer] {tag}: acc {result.mean_accuracy:.3f}", flush=True)


def stage_bench(args, root: Path, out: Path) -> None:
    done = out / "latency.json"
    if done.exists():
        print(f"[bench] exists: {done}")
        return
    sel = load_checkpoint(root / "checkpoints" / args.selector)
    task = make_synthetic_kv_task(n_keys=24, filler_ratio=0.75, seed=0, n_test=32)
    reports = analysis.measure_latency(task, sel, ratios=RATIOS, budget_tokens=args.budget,
                                       n_test=4 if args.quick else 16,
                                       timed_runs=2 if args.quick else 5)
    rows = [r.to_dict() for r in reports]
    done.write_text(json.dumps(rows, indent=2) + "\n", encoding="utf-8")
    for r in reports:
        print(f"[bench] ratio {r.keep_ratio:g}: end-to-end {r.end_to_end_ms:.1f} ms, "
              f"speedup {r.speedup:.2f}x", flush=True)


def stage_analyze(args, root: Path, out: Path) -> None:
    done = out / "correlation.json"
    if done.exists():
        print(f"[analyze] exists: {done}")
        return
    sel = load_checkpoint(root / "checkpoints" / args.selector)
    task = make_synthetic_kv_task(n_keys=24, filler_ratio=0.75, seed=0, n_test=8)
    demo_set = evaluate.build_demo_set(task, sel.tokenizer, args.budget, seed=0)
    prompt = evaluate.assemble_prompt(demo_set.demonstrations, task.template)
    corr = analysis.correlate_signals(prompt, sel, task=task.name)
    done.write_text(json.dumps(corr.to_dict(), indent=2) + "\n", encoding="utf-8")
    rows = []
    for ratio in RATIOS:
        comp = chunked_compress(prompt, ratio, sel)
        pos = analysis.pos_preservation(prompt, comp)
        rows.append({"keep_ratio": ratio, **pos.preservation})
        if ratio == 0.3:
            analysis.plot_pos_bars(pos, out / "pos_preservation.png")
    (out / "pos_preservation.json").write_text(json.dumps(rows, indent=2) + "\n",
                                               encoding="utf-8")
    analysis.plot_correlation_heatmap(corr, out / "correlation.png")
    print(f"[analyze] correlations: {corr.to_dict()}")
    print(f"[analyze] preservation @0.3: {rows[2]}")


def stage_report(args, root: Path, out: Path) -> None:
    rc = cli_main(["report", "--results", str(out.parent), "--out", str(out)])
    if rc != 0:
        raise SystemExit(rc)


STAGES = {"eval": stage_eval, "growth": stage_growth, "transfer": stage_transfer,
          "bench": stage_bench, "analyze": stage_analyze, "report": stage_report}


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(description=__doc__,
                                     formatter_class=argparse.RawDescriptionHelpFormatter)
    parser.add_argument("--root", default=str(Path(__file__).resolve().parent.parent / "artifacts"))
    parser.add_argument("--results", default=str(Path(__file__).resolve().parent.parent / "results"))
    parser.add_argument("--stage", choices=list(STAGES) + ["all"], default="all")
    parser.add_argument("--selector", default="selector_s0")
    parser.add_argument("--budget", type=int, default=192)
    parser.add_argument("--test-cap", type=int, default=48)
    parser.add_argument("--quick", action="store_true")
    args = parser.parse_args(argv)
    root = Path(args.root)
    results = Path(args.results)
    stages = list(STAGES) if args.stage == "all" else [args.stage]
    for name in stages:
        out = results / name
        out.mkdir(parents=True, exist_ok=True)
        t0 = time.monotonic()
        STAGES[name](args, root, out)
        write_manifest(out / "manifest.json", stage=name,
                       args={k: v for k, v in vars(args).items()},
                       wall_s=round(time.monotonic() - t0, 1))
    print("experiments complete")
    return 0


if __name__ == "__main__":
    sys.exit(main())
