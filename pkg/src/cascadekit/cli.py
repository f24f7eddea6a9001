"""Command-line entry points.

Subcommands:
    cascade run        populate a trace by querying configured endpoints
    cascade calibrate  fit token-confidence calibration stats from a trace
    cascade eval       build deferral curves, reports, and figures
    cascade threshold  pick a score threshold for a desired deferral rate
    cascade serve      run the live routing gateway
"""

from __future__ import annotations

import argparse
import functools
import json
import sys
from pathlib import Path

from .clients import complete, embed
from .confidence import CalibrationStats, ChowVariant
from .errors import CascadeError
from .evaluation import (
    CostModel,
    deferral_curve,
    emit_report,
    fit_stats_from_trace,
    summarize,
)
from .gateway import CascadeConfig, CascadeGateway, build_app, calibrate_threshold
from .policy import PolicySpec
from .trace import (
    GenerationRecord,
    TraceManifest,
    append_generation,
    load_dataset,
    read_generations,
)


def _load_policies(path: Path) -> list[PolicySpec]:
    data = json.loads(path.read_text(encoding="utf-8"))
    if isinstance(data, dict):
        data = [data]
    return [PolicySpec.from_dict(entry) for entry in data]


def _make_embedder(config: CascadeConfig | None):
    if config is None or config.embedding is None:
        return None
    return functools.partial(embed, config.embedding)


def _stats_for(policy: PolicySpec, trace, base_dir: Path, limit: int | None):
    if policy.policy != "token" or not policy.normalize:
        return None
    if policy.stats_path:
        return CalibrationStats.load(base_dir / policy.stats_path)
    return fit_stats_from_trace(trace, policy.variant, policy.models, limit)


def cmd_run(args: argparse.Namespace) -> int:
    config = CascadeConfig.from_file(args.config)
    examples = load_dataset(args.dataset)
    if args.limit is not None:
        examples = examples[: args.limit]
    out = Path(args.out)

    done: set[tuple[str, str]] = set()
    if out.exists():
        done = {(r.example_id, r.model_id) for r in read_generations(out)}
        if done:
            print(f"resuming: {len(done)} generations already recorded")

    endpoints = list(config.ensemble) + [config.target]
    pending = sum(
        1 for ex in examples for ep in endpoints if (ex.id, ep.id) not in done
    )
    finished = 0
    for ex in examples:
        for ep in endpoints:
            if (ex.id, ep.id) in done:
                continue
            gen = complete(ep, ex.prompt, config.decoding)
            append_generation(out, GenerationRecord.from_generation(ex.id, gen))
            finished += 1
            if finished % 25 == 0 or finished == pending:
                print(f"  {finished}/{pending} generations")

    manifest = TraceManifest(
        dataset_path=Path(args.dataset).resolve(),
        generations_path=out.resolve(),
        ensemble_ids=tuple(ep.id for ep in config.ensemble),
        target_id=config.target.id,
    )
    manifest_path = out.with_suffix(out.suffix + ".manifest.json")
    manifest.save(manifest_path)
    print(f"wrote {finished} new generations to {out}")
    print(f"trace manifest: {manifest_path}")
    return 0


def cmd_calibrate(args: argparse.Namespace) -> int:
    trace = TraceManifest.load(args.trace).load_trace()
    variant = ChowVariant(args.variant, args.quantile if args.variant == "quantile" else None)
    models = args.models.split(",") if args.models else None
    stats = fit_stats_from_trace(trace, variant, models, args.limit)
    stats.save(args.out)
    print(f"fit {variant.label()} stats for {len(stats.models)} models -> {args.out}")
    return 0


def cmd_eval(args: argparse.Namespace) -> int:
    manifest = TraceManifest.load(args.trace)
    trace = manifest.load_trace()
    policies = _load_policies(Path(args.policies))
    config = CascadeConfig.from_file(args.config) if args.config else None
    cost_model = (
        CostModel.from_dict(json.loads(Path(args.cost_model).read_text(encoding="utf-8")))
        if args.cost_model
        else (config.cost_model if config else CostModel(default_unit_cost=1.0))
    )
    embedder = _make_embedder(config)
    base_dir = Path(args.policies).parent

    curves, summaries = [], []
    for policy in policies:
        stats = _stats_for(policy, trace, base_dir, args.calibration_limit)
        curve = deferral_curve(trace, policy, cost_model, stats=stats, embedder=embedder)
        curves.append(curve)
        summaries.append(summarize(curve, args.budget_fraction, args.quality_theta))

    report_dir = Path(args.report)
    curves_path, summary_path = emit_report(curves, summaries, report_dir)
    print(f"curves:  {curves_path}")
    print(f"summary: {summary_path}")
    if not args.no_figures:
        from .plotting import render_curves

        figure = render_curves(curves, report_dir / "deferral_curves.png")
        print(f"figure:  {figure}")

    header = f"{'policy':<34} {'AUC-DF':>10} {'q@budget':>10} {'lat@theta':>12} {'random':>10}"
    print("\n" + header)
    print("-" * len(header))
    for s in summaries:
        q = f"{s.quality_at_budget:.4f}" if s.quality_at_budget is not None else "-"
        lat = f"{s.latency_at_quality:.1f}" if s.latency_at_quality is not None else "-"
        print(f"{s.policy_id:<34} {s.auc_df:>10.4f} {q:>10} {lat:>12} {s.random_auc:>10.4f}")
    return 0


def cmd_threshold(args: argparse.Namespace) -> int:
    trace = TraceManifest.load(args.trace).load_trace()
    policies = _load_policies(Path(args.policy))
    if len(policies) != 1:
        print("threshold needs exactly one policy", file=sys.stderr)
        return 2
    policy = policies[0]
    config = CascadeConfig.from_file(args.config) if args.config else None
    stats = _stats_for(policy, trace, Path(args.policy).parent, None)
    tau = calibrate_threshold(
        trace, policy, args.rate, stats=stats, embedder=_make_embedder(config)
    )
    print(f"{tau!r}")
    return 0


def cmd_serve(args: argparse.Namespace) -> int:
    import uvicorn

    config = CascadeConfig.from_file(args.config)
    host, _, port = args.bind.rpartition(":")
    app = build_app(CascadeGateway(config))
    uvicorn.run(app, host=host or "127.0.0.1", port=int(port))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="cascade",
        description="Route queries through a small-model ensemble, defer to a target model on low agreement.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="populate a trace by querying endpoints")
    run.add_argument("--config", required=True, help="cascade config JSON")
    run.add_argument("--dataset", required=True, help="dataset JSONL")
    run.add_argument("--out", required=True, help="generations JSONL to append to")
    run.add_argument("--limit", type=int, default=None, help="only the first N examples")
    run.set_defaults(func=cmd_run)

    cal = sub.add_parser("calibrate", help="fit confidence calibration stats")
    cal.add_argument("--trace", required=True, help="trace manifest JSON")
    cal.add_argument("--variant", required=True, choices=["sum", "avg", "quantile"])
    cal.add_argument("--quantile", type=float, default=0.5, help="q for the quantile variant")
    cal.add_argument("--models", default=None, help="comma-separated model ids (default: ensemble)")
    cal.add_argument("--limit", type=int, default=None, help="calibrate on the first N examples")
    cal.add_argument("--out", required=True, help="stats JSON output path")
    cal.set_defaults(func=cmd_calibrate)

    ev = sub.add_parser("eval", help="deferral curves, AUC-DF, budget/latency tables")
    ev.add_argument("--trace", required=True, help="trace manifest JSON")
    ev.add_argument("--policies", required=True, help="JSON list of policy configs")
    ev.add_argument("--report", required=True, help="output directory")
    ev.add_argument("--config", default=None, help="cascade config (cost model, embeddings)")
    ev.add_argument("--cost-model", default=None, help="cost model JSON (overrides config)")
    ev.add_argument("--budget-fraction", type=float, default=0.4)
    ev.add_argument("--quality-theta", type=float, default=0.98)
    ev.add_argument("--calibration-limit", type=int, default=None,
                    help="fit token stats on the first N examples (default: all)")
    ev.add_argument("--no-figures", action="store_true", help="skip the PNG rendering")
    ev.set_defaults(func=cmd_eval)

    thr = sub.add_parser("threshold", help="calibrate an operating threshold")
    thr.add_argument("--trace", required=True, help="trace manifest JSON")
    thr.add_argument("--policy", required=True, help="JSON file with one policy config")
    thr.add_argument("--rate", type=float, required=True, help="desired deferral rate in [0, 1]")
    thr.add_argument("--config", default=None, help="cascade config (embeddings)")
    thr.set_defaults(func=cmd_threshold)

    srv = sub.add_parser("serve", help="run the live gateway")
    srv.add_argument("--config", required=True, help="cascade config JSON")
    srv.add_argument("--bind", default="127.0.0.1:8080", help="host:port")
    srv.set_defaults(func=cmd_serve)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except CascadeError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
