"""``synmoe`` command line: train, check, analyze, place, bench.

Exit codes: 0 success, 1 a checked bound or run failed, 2 usage/config/input error.
Only ``OUTPUT_DIR`` is read from the environment; it overrides the
config's output directory but not an explicit ``--out``.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import config as cfgmod
from .checks import SUITES, run_suite
from .moe import MoeModel
from .placement import bucket_and_score, build_graph, partition, round_robin
from .synth import generate_corpus, plant_embeddings, save_corpus
from .theory import cluster_agreement, coupling_coefficient, router_entropy
from .trace import RoutingTrace, TraceFormatError
from .trainer import TrainingDiverged, conditional_activation_matrix, stability_fraction, train


class UsageError(Exception):
    pass


def _seed(text: str) -> int:
    try:
        v = int(text, 0)
    except ValueError:
        raise argparse.ArgumentTypeError(f"invalid seed {text!r}") from None
    if not 0 <= v < 2**64:
        raise argparse.ArgumentTypeError("seed must be an unsigned 64-bit integer")
    return v


def _positive(text: str) -> int:
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError("must be >= 1")
    return v


def _out_dir(args, fallback: str | None) -> Path | None:
    if getattr(args, "out", None):
        return Path(args.out)
    if os.environ.get("OUTPUT_DIR"):
        return Path(os.environ["OUTPUT_DIR"])
    return Path(fallback) if fallback else None


def _load_config(args) -> cfgmod.RunConfig:
    cfg = cfgmod.load(args.config) if args.config else cfgmod.RunConfig()
    if getattr(args, "seed", None) is not None:
        cfg = cfg.with_seed(args.seed)
    return cfg


def _load_trace(path: str) -> RoutingTrace:
    try:
        return RoutingTrace.load(path)
    except FileNotFoundError:
        raise UsageError(f"{path}: trace file not found") from None
    except TraceFormatError as exc:
        raise UsageError(f"{path}: {exc}") from None


def _emit(obj) -> None:
    sys.stdout.write(json.dumps(obj, sort_keys=True) + "\n")


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, sort_keys=True, indent=1) + "\n")


# ---------------------------------------------------------------- subcommands


def cmd_train(args) -> int:
    cfg = _load_config(args)
    out = _out_dir(args, cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    t0 = time.perf_counter()
    (out / "config.ini").write_text(cfgmod.emit(cfg))
    corpus, alloc = generate_corpus(cfg.synth)
    save_corpus(out / "corpus.bin", corpus, alloc, cfg.synth)
    model = plant_embeddings(MoeModel(cfg.model, cfg.seed), alloc, cfg.synth.embed_sep)
    try:
        result = train(model, corpus, cfg.train, out_dir=out)
    except TrainingDiverged as exc:
        print(f"error: {exc} (diagnostics in {out / 'divergence.json'})", file=sys.stderr)
        return 1
    _write_json(out / "timing.json", {"wall_seconds": time.perf_counter() - t0})
    _emit({"out": str(out), "final": result.final_metrics()})
    return 0


def cmd_check(args) -> int:
    results = run_suite(args.suite, args.seed or 0)
    lines = []
    for r in results:
        lines.extend(json.dumps({"suite": r.suite, **rep.to_dict()}, sort_keys=True) for rep in r.reports)
        lines.append(json.dumps({"summary": r.to_dict()}, sort_keys=True))
    for line in lines:
        sys.stdout.write(line + "\n")
    out = _out_dir(args, None)
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / "check.jsonl").write_text("".join(line + "\n" for line in lines))
    return 0 if all(r.passed for r in results) else 1


def analyze_trace(trace: RoutingTrace, seed: int = 0) -> tuple[dict, dict[str, np.ndarray]]:
    """Summary statistics and conditional-activation heatmaps of one trace."""
    report = {"steps": trace.n_steps, "B": trace.B, "L": trace.L, "E": trace.E, "k": trace.k}
    report["entropy"] = [float(np.mean(router_entropy(trace.scores[:, l].astype(np.float64)))) for l in range(trace.L)]
    report["top1_loads"] = [np.bincount(trace.layer_top1(l), minlength=trace.E).tolist() for l in range(trace.L)]
    heatmaps = {}
    kappa, agreement = [], []
    for l in range(trace.L - 1):
        kappa.append(coupling_coefficient(trace.layer_top1(l), trace.layer_top1(l + 1), trace.E)[0])
        heatmaps[f"heatmap_{l}_{l + 1}"] = conditional_activation_matrix(trace, l)
        reps = [trace.scores[:, j].reshape(-1, trace.E).astype(np.float64) for j in (l, l + 1)]
        if reps[0].shape[0] >= trace.E:
            agreement.append(cluster_agreement(reps[0], reps[1], trace.E, seed))
    report["kappa"] = kappa
    report["cluster_agreement_pct"] = agreement
    return report, heatmaps


def cmd_analyze(args) -> int:
    traces = [_load_trace(p) for p in args.trace]
    out = _out_dir(args, None)
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    full = {"traces": []}
    for i, (path, tr) in enumerate(zip(args.trace, traces)):
        report, heatmaps = analyze_trace(tr, args.seed or 0)
        report["path"] = path
        full["traces"].append(report)
        if out is not None:
            for name, M in heatmaps.items():
                np.savetxt(out / f"{name}_{i}.csv" if len(traces) > 1 else out / f"{name}.csv", M, delimiter=",", fmt="%.17g")
    if len(traces) > 1:
        try:
            full["stability"] = [stability_fraction(a, b) for a, b in zip(traces, traces[1:])]
        except ValueError as exc:
            raise UsageError(f"cannot compare traces: {exc}") from None
    if out is not None:
        _write_json(out / "analysis.json", full)
    _emit(full)
    return 0


def cmd_place(args) -> int:
    trace = _load_trace(args.trace)
    cfg = cfgmod.load(args.config) if args.config else cfgmod.RunConfig()
    shards = args.shards or cfg.placement.shards
    if trace.E % shards:
        raise UsageError(f"--shards {shards} must divide E={trace.E}")
    if trace.L < 2:
        raise UsageError("placement needs a trace with at least two layers")
    placement = partition(build_graph(trace), shards)
    baseline = round_robin(trace.E, trace.L, shards)
    penalty = cfg.placement.remote_penalty
    cost = {
        "path_aware": bucket_and_score(trace, placement, penalty).to_dict(),
        "round_robin": bucket_and_score(trace, baseline, penalty).to_dict(),
    }
    out = _out_dir(args, None)
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / "placement.json").write_text(placement.to_json())
        _write_json(out / "cost.json", cost)
    _emit({"placement": placement.to_dict(), "cost": cost})
    return 0


BENCH_VARIANTS = {
    "lb": dict(sp=0.0, cp=0.0),
    "lb+sp": dict(cp=0.0),
    "lb+cp": dict(sp=0.0),
    "lb+sp+cp": dict(),
}


def cmd_bench(args) -> int:
    """Milliseconds per training step with and without the extra regularizers (reported only)."""
    cfg = _load_config(args)
    corpus, alloc = generate_corpus(cfg.synth)
    steps = args.steps
    rows = []
    for name, override in BENCH_VARIANTS.items():
        w = dataclasses.replace(cfg.train.weights, **override)
        tc = dataclasses.replace(cfg.train, steps=steps, weights=w, eval_every=steps + 1, checkpoint_every=steps + 1)
        model = plant_embeddings(MoeModel(cfg.model, cfg.seed), alloc, cfg.synth.embed_sep)
        t0 = time.perf_counter()
        train(model, corpus, tc)
        rows.append((name, 1000.0 * (time.perf_counter() - t0) / max(steps, 1)))
    base = rows[0][1]
    lines = ["variant,ms_per_step,overhead_vs_lb,share_of_step"]
    for name, ms in rows:
        lines.append(f"{name},{ms:.3f},{ms / base:.4f},{(ms - base) / ms:.4f}")
    text = "\n".join(lines) + "\n"
    sys.stdout.write(text)
    out = _out_dir(args, None)
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / "bench.csv").write_text(text)
    return 0


# ---------------------------------------------------------------- entry point


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="synmoe", description="Toy MoE routing regularizers: training, bound checks and placement.")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="generate the synthetic corpus and train")
    t.add_argument("--config", required=True)
    t.add_argument("--seed", type=_seed)
    t.add_argument("--out")
    t.set_defaults(func=cmd_train)

    c = sub.add_parser("check", help="run bound-checking suites")
    c.add_argument("--suite", default="all", choices=["all", *SUITES])
    c.add_argument("--seed", type=_seed)
    c.add_argument("--out")
    c.set_defaults(func=cmd_check)

    a = sub.add_parser("analyze", help="coupling, entropy and heatmaps of routing traces")
    a.add_argument("trace", nargs="+")
    a.add_argument("--seed", type=_seed)
    a.add_argument("--out")
    a.set_defaults(func=cmd_analyze)

    pl = sub.add_parser("place", help="path-aware expert placement from a trace")
    pl.add_argument("trace")
    pl.add_argument("--shards", type=_positive)
    pl.add_argument("--config")
    pl.add_argument("--out")
    pl.set_defaults(func=cmd_place)

    b = sub.add_parser("bench", help="per-step cost of the regularizers")
    b.add_argument("--config")
    b.add_argument("--seed", type=_seed)
    b.add_argument("--steps", type=_positive, default=20)
    b.add_argument("--out")
    b.set_defaults(func=cmd_bench)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (cfgmod.ConfigError, UsageError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
