"""Command-line front end.

    flexoffload generate --layers 8 --attn-bytes 1048576 --ffn-bytes 3145728 --out models/toy
    flexoffload plan --model models/toy --budget-frac 0.5 --strategy flex
    flexoffload run --model models/toy --mode simulate --strategy flex,sync,none --budgets 0,0.25,0.5,0.75
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
import tempfile
from dataclasses import replace
from pathlib import Path

from . import executor
from .config import DEFAULT_WINDOW, ExecutionConfig
from .errors import FlexOffloadError, UsageError
from .manifest import (
    DEFAULT_ALIGNMENT,
    generate_manifest,
    layer_composition,
    load_manifest,
    save_manifest,
    validate_manifest,
    write_blob,
)
from .perfmodel import CostModel
from .planner import PlanStrategy, budget_from_fraction, dumps_plan, io_bytes_per_token, plan, residual_spread
from .report import append_csv, format_csv
from .simulator import MMAP, SCENARIOS, SYNC, analytic_report, simulate
from .storage import ReadMode, measure_bandwidth, open_store

log = logging.getLogger("flexoffload")

MANIFEST_NAME = "model.manifest"
BLOB_NAME = "model.blob"


def scratch_dir() -> Path:
    return Path(os.environ.get("FLEXOFFLOAD_TMPDIR") or Path(tempfile.gettempdir()) / "flexoffload")


def model_paths(model: str | None) -> tuple[Path, Path]:
    """Resolve ``--model`` (directory or manifest file) to (manifest, blob)."""
    p = Path(model) if model else scratch_dir() / "model"
    if p.is_dir() or not p.suffix:
        return p / MANIFEST_NAME, p / BLOB_NAME
    return p, p.with_suffix(".blob")


def _csv_ints(text: str) -> list[int]:
    return [int(x) for x in text.split(",") if x.strip()]


def _csv_floats(text: str) -> list[float]:
    return [float(x) for x in text.split(",") if x.strip()]


def _csv_words(text: str) -> list[str]:
    return [x.strip() for x in text.split(",") if x.strip()]


def resolve_budgets(manifest, args) -> list[int]:
    if args.budget_bytes is not None and args.budget_frac is not None:
        raise UsageError("give --budget-bytes or --budget-frac, not both")
    if args.budget_bytes is not None:
        budgets = _csv_ints(args.budget_bytes)
    elif args.budget_frac is not None:
        fracs = _csv_floats(args.budget_frac)
        bad = [f for f in fracs if not 0 <= f <= 1]
        if bad:
            raise UsageError(f"budget fractions must lie in [0, 1], got {bad}")
        budgets = [budget_from_fraction(manifest, f) for f in fracs]
    else:
        raise UsageError("a budget is required (--budget-bytes or --budget-frac/--budgets)")
    if not budgets:
        raise UsageError("empty budget list")
    return sorted(budgets)


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def cmd_generate(args) -> int:
    if args.layers < 1:
        raise UsageError("--layers must be >= 1")
    manifest = generate_manifest(
        args.layers, args.attn_bytes, args.ffn_bytes, args.gqa_kv_bytes, args.embed_bytes, args.align
    )
    manifest_path, blob_path = model_paths(args.out)
    manifest_path.parent.mkdir(parents=True, exist_ok=True)
    save_manifest(manifest, manifest_path)
    write_blob(manifest, blob_path, seed=args.seed)
    print(f"manifest: {manifest_path}")
    print(f"blob:     {blob_path}")
    print(f"total bytes: {manifest.total_bytes} ({manifest.n_layers} layers, embeddings {manifest.embedding_bytes})")
    print(f"per-layer bytes: {manifest.layers[0].size_bytes}")
    for role, size in layer_composition(manifest):
        print(f"  {role:<10} {size}")
    return 0


def _load(args):
    manifest_path, blob_path = model_paths(args.model)
    manifest = load_manifest(manifest_path)
    problems = validate_manifest(manifest)
    if problems:
        raise UsageError("invalid manifest: " + "; ".join(problems))
    return manifest, blob_path


def cmd_plan(args) -> int:
    manifest, _ = _load(args)
    budgets = resolve_budgets(manifest, args)
    if len(budgets) != 1:
        raise UsageError("plan takes a single budget")
    p = plan(manifest, budgets[0], PlanStrategy(args.strategy))
    out = Path(args.out) if args.out else None
    if out:
        out.write_text(dumps_plan(p))
    print(f"strategy: {p.strategy.value}")
    print(f"budget_bytes: {p.budget_bytes}")
    print(f"locked_bytes: {p.locked_bytes}")
    print(f"embedding_bytes: {p.embedding_bytes}")
    print(f"residual_spread: {residual_spread(p)}")
    print(f"io_bytes_per_token: {io_bytes_per_token(p)}")
    if out:
        print(f"plan written to {out}")
    return 0


def cmd_run(args) -> int:
    manifest, blob_path = _load(args)
    budgets = resolve_budgets(manifest, args)
    scenarios = _csv_words(args.strategy)
    unknown = [s for s in scenarios if s not in SCENARIOS]
    if unknown:
        raise UsageError(f"unknown strategies {unknown}; choose from {', '.join(SCENARIOS)}")
    window = args.window if args.window is not None else min(DEFAULT_WINDOW, manifest.n_layers)
    config = ExecutionConfig(
        window_k=window,
        io_threads=args.io_threads,
        compute_threads=args.compute_threads,
        read_mode=ReadMode(args.read_mode),
        tokens=args.tokens,
        compute_cost_ns_per_byte=args.compute_ns_per_byte,
        verify_payloads=args.verify,
        seed=args.seed,
        page_bytes=args.page_bytes,
    )

    store = None
    if args.mode == "real":
        store = open_store(blob_path, manifest, config.read_mode)
    cost = None
    if args.mode != "real":
        cost = CostModel(args.bandwidth or 2e9, args.compute_ns_per_byte, args.io_overhead_ns, args.io_threads)

    reports = []
    timeline = None
    try:
        for budget in budgets:
            for name in scenarios:
                strategy, schedule = SCENARIOS[name]
                p = plan(manifest, budget, strategy)
                cfg = replace(config, strategy=strategy, budget_bytes=budget)
                if args.mode == "analytic":
                    report = analytic_report(manifest, p, cfg, cost, schedule)
                elif args.mode == "simulate":
                    tl = simulate(manifest, p, cfg, cost, schedule, record=bool(args.plot))
                    report = tl.report
                    if timeline is None and name == scenarios[-1]:
                        timeline = (name, budget, tl.events)
                else:
                    trace = [] if args.plot and timeline is None and name == scenarios[-1] else None
                    if schedule == MMAP:
                        report = executor.run_mmap_like(manifest, store, cfg, trace=trace)
                    elif schedule == SYNC:
                        report = executor.run_sync(manifest, p, store, cfg, trace=trace)
                    else:
                        report = executor.run(manifest, p, store, cfg, trace=trace)
                    if trace:
                        timeline = (name, budget, trace)
                report.source = {"real": "measured", "simulate": "simulated", "analytic": "analytic"}[args.mode]
                reports.append(report)
    finally:
        if store is not None:
            store.close()

    if args.out:
        append_csv(reports, args.out, with_source=True)
        log.info("appended %d rows to %s", len(reports), args.out)
    else:
        sys.stdout.write(format_csv(reports, with_source=True))

    if args.plot:
        from .plotting import figure_path, plot_throughput, plot_timeline

        base = args.out or (scratch_dir() / "results.csv")
        fig = plot_throughput(reports, figure_path(base), model_bytes=manifest.total_bytes, title=f"{args.mode} throughput")
        print(f"figure: {fig}", file=sys.stderr)
        if timeline is not None:
            name, budget, events = timeline
            fig = plot_timeline(events, figure_path(base, "-timeline"), manifest.n_layers, title=f"{name} @ {budget} B")
            print(f"figure: {fig}", file=sys.stderr)
    return 0


def cmd_calibrate(args) -> int:
    manifest, blob_path = _load(args)
    with open_store(blob_path, manifest, ReadMode(args.read_mode)) as store:
        sample = min(args.sample_bytes or manifest.extent, manifest.extent)
        for threads in _csv_ints(args.threads):
            bw = measure_bandwidth(store, sample, threads)
            print(f"threads={threads} bandwidth_bytes_per_s={bw:.4g}")
    return 0


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="flexoffload", description="Memory-budgeted tensor offloading runtime")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    gen = sub.add_parser("generate", help="write a synthetic manifest + blob")
    gen.add_argument("--layers", type=int, default=8)
    gen.add_argument("--attn-bytes", type=int, default=1 << 20)
    gen.add_argument("--ffn-bytes", type=int, default=3 << 20)
    gen.add_argument("--gqa-kv-bytes", type=int, default=None)
    gen.add_argument("--embed-bytes", type=int, default=0)
    gen.add_argument("--align", type=int, default=DEFAULT_ALIGNMENT)
    gen.add_argument("--seed", type=int, default=0)
    gen.add_argument("--out", help="output directory (default: scratch dir)")
    gen.set_defaults(func=cmd_generate)

    def add_model_and_budget(p):
        p.add_argument("--model", help="model directory or manifest path (default: scratch dir)")
        p.add_argument("--budget-bytes", help="absolute budget(s), comma separated")
        p.add_argument("--budget-frac", "--budgets", dest="budget_frac", help="budget fraction(s) of total model bytes")

    pl = sub.add_parser("plan", help="compute a preservation plan")
    add_model_and_budget(pl)
    pl.add_argument("--strategy", default="flex", choices=[s.value for s in PlanStrategy])
    pl.add_argument("--out", help="plan file to write")
    pl.set_defaults(func=cmd_plan)

    rn = sub.add_parser("run", help="run, simulate or predict a strategy x budget grid")
    add_model_and_budget(rn)
    rn.add_argument("--strategy", default="flex", help=f"comma list from: {', '.join(SCENARIOS)}")
    rn.add_argument("--mode", choices=["real", "simulate", "analytic"], default="simulate")
    rn.add_argument("--window", type=int, default=None, help=f"prefetch window in layers (default {DEFAULT_WINDOW})")
    rn.add_argument("--io-threads", type=int, default=4)
    rn.add_argument("--compute-threads", type=int, default=1)
    rn.add_argument("--read-mode", choices=[m.value for m in ReadMode], default=ReadMode.CACHED.value)
    rn.add_argument("--tokens", type=int, default=4)
    rn.add_argument("--compute-ns-per-byte", type=float, default=0.0)
    rn.add_argument("--bandwidth", type=float, default=None, help="bytes/s for simulate/analytic (default 2e9)")
    rn.add_argument("--io-overhead-ns", type=float, default=0.0, help="per-request overhead in simulation")
    rn.add_argument("--page-bytes", type=int, default=4096, help="request size of the mmap baseline")
    rn.add_argument("--seed", type=int, default=0, help="blob seed, needed by --verify")
    rn.add_argument("--verify", action="store_true", help="check every payload against its seed pattern")
    rn.add_argument("--out", help="CSV file to append to (default: stdout)")
    rn.add_argument("--plot", action="store_true", help="also render PNG figures next to the CSV")
    rn.set_defaults(func=cmd_run)

    cal = sub.add_parser("calibrate", help="measure read bandwidth")
    cal.add_argument("--model")
    cal.add_argument("--threads", default="1,4")
    cal.add_argument("--sample-bytes", type=int, default=None)
    cal.add_argument("--read-mode", choices=[m.value for m in ReadMode], default=ReadMode.CACHED.value)
    cal.set_defaults(func=cmd_calibrate)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except FlexOffloadError as exc:
        print(f"flexoffload: error: {exc}", file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
