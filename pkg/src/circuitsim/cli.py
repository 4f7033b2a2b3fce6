"""Command-line entry points: run, sweep, adversary, report.

Exit codes: 0 success, 1 configuration error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from pathlib import Path

from .adversary import (
    AdversaryConfig,
    AnalysisError,
    boxplot_stats,
    generate_as_topology,
    load_as_topology,
    network_compromise_rate,
    relay_adversary_runs,
    save_as_topology,
)
from .config import ConfigError, load_config, resolve
from .engine import RngStream
from .harness import (
    RunError,
    build_topology,
    load_manifest,
    load_streams,
    run_sweep,
    run_to_dir,
)
from .network import load_topology
from .reports import write_comparison, write_report
from .traffic import cdf_points


def _parse_int_list(text: str) -> list:
    return [int(x) for x in text.split(",") if x.strip()]


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="circuitsim")
    sub = parser.add_subparsers(dest="command", required=True)

    run_p = sub.add_parser("run", help="run one configuration, one or more seeds")
    run_p.add_argument("--config", help="experiment config YAML (overlays packaged defaults)")
    run_p.add_argument("--seed", type=int, help="single seed (overrides config)")
    run_p.add_argument("--seeds", type=_parse_int_list, help="comma-separated seeds")
    run_p.add_argument("--strategy", help="selection strategy id")
    run_p.add_argument("--circuits", type=int, help="pool target N (omit for baseline behavior)")
    run_p.add_argument("--duration", type=float, help="simulated seconds")
    run_p.add_argument("--out", default="runs", help="output directory")

    sweep_p = sub.add_parser("sweep", help="strategy x N grid of runs plus comparison table")
    sweep_p.add_argument("--config", help="base experiment config YAML")
    sweep_p.add_argument("--strategies", required=True, help="comma-separated strategy ids")
    sweep_p.add_argument("--circuits", type=_parse_int_list, default=[3], help="N values")
    sweep_p.add_argument("--seeds", type=_parse_int_list, help="comma-separated seeds")
    sweep_p.add_argument("--duration", type=float, help="simulated seconds")
    sweep_p.add_argument("--out", default="sweep", help="output directory")

    adv_p = sub.add_parser("adversary", help="offline compromise analysis over run artifacts")
    adv_p.add_argument("--artifacts", nargs="+", required=True, help="run directories")
    adv_p.add_argument("--mode", choices=("relay", "as"), default="relay")
    adv_p.add_argument("--fraction-guard", type=float, default=0.10)
    adv_p.add_argument("--fraction-exit", type=float, default=0.10)
    adv_p.add_argument("--runs", type=int, default=10, help="marking repetitions (relay mode)")
    adv_p.add_argument("--seed", type=int, default=1)
    adv_p.add_argument("--as-topology", help="AS topology YAML; generated when omitted")
    adv_p.add_argument("--as-count", type=int, default=50, help="ASes when generating")
    adv_p.add_argument("--out", default="adversary", help="output directory")

    rep_p = sub.add_parser("report", help="summary text and CDF column files")
    rep_p.add_argument("--artifacts", nargs="+", required=True, help="run or adversary directories")
    rep_p.add_argument("--out", default="report", help="output directory")
    return parser


def _run_overrides(args) -> dict:
    overrides: dict = {}
    if args.strategy is not None:
        overrides["strategy"] = args.strategy
    if getattr(args, "circuits", None) is not None and isinstance(args.circuits, int):
        overrides["circuits"] = args.circuits
    if args.duration is not None:
        overrides["duration_s"] = args.duration
    if getattr(args, "seed", None) is not None:
        overrides["seeds"] = [args.seed]
    if getattr(args, "seeds", None):
        overrides["seeds"] = args.seeds
    return overrides


def _cmd_run(args) -> int:
    doc = load_config(args.config, _run_overrides(args))
    cfg = resolve(doc)
    topology = build_topology(cfg)
    out_root = Path(args.out)
    for seed in cfg.seeds:
        run_dir = out_root / f"seed{seed}" if len(cfg.seeds) > 1 else out_root
        run_to_dir(cfg, seed, run_dir, topology=topology)
        print(f"seed {seed}: artifacts in {run_dir}")
    return 0


def _cmd_sweep(args) -> int:
    overrides: dict = {}
    if args.duration is not None:
        overrides["duration_s"] = args.duration
    if args.seeds:
        overrides["seeds"] = args.seeds
    doc = load_config(args.config, overrides)
    base_cfg = resolve(doc)  # validates strategy-independent parts early
    strategies = [s.strip() for s in args.strategies.split(",") if s.strip()]
    results = run_sweep(doc, strategies, args.circuits, base_cfg.seeds, args.out)
    write_comparison(results, args.out)
    failures = [(label, err) for label, res in results.items() for err in res["errors"]]
    print((Path(args.out) / "comparison.txt").read_text())
    if failures:
        print(f"{len(failures)} cell run(s) failed; see failure markers", file=sys.stderr)
        return 2
    return 0


def _post_warmup_streams(run_dir):
    manifest = load_manifest(run_dir)
    cfg = manifest["config"]
    warmup = float(cfg.get("duration_s", 0)) * float(cfg.get("warmup_fraction", 1 / 3))
    return [
        s for s in load_streams(run_dir) if s.guard_id is not None and s.requested_at_s >= warmup
    ]


def _cmd_adversary(args) -> int:
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    streams = []
    for d in args.artifacts:
        streams.extend(_post_warmup_streams(d))
    if not streams:
        raise RunError("no attached streams in the given artifacts")
    first = Path(args.artifacts[0])

    if args.mode == "relay":
        topology = load_topology(first / "topology.yaml")
        adv_cfg = AdversaryConfig(
            guard_bw_fraction=args.fraction_guard,
            exit_bw_fraction=args.fraction_exit,
            runs=args.runs,
            seed=args.seed,
        )
        runs = relay_adversary_runs(topology.relays, streams, adv_cfg)
        with open(out_dir / "relay_compromise.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["run", "client_id", "rate"])
            for i, (_marked, result) in enumerate(runs):
                for client, rate in result.per_client.items():
                    w.writerow([i, client, f"{rate:.6f}"])
        per_run = [
            {
                "run": i,
                "stream_rate": result.stream_rate,
                "client_mean": result.client_mean,
                "client_median": result.client_median,
                "marked_guards": sorted(marked.guards),
                "marked_exits": sorted(marked.exits),
            }
            for i, (marked, result) in enumerate(runs)
        ]
        summary = {
            "mode": "relay",
            "streams": len(streams),
            "runs": len(runs),
            "per_run": per_run,
            "boxplot_stream_rate": boxplot_stats([r["stream_rate"] for r in per_run]),
            "boxplot_client_mean": boxplot_stats([r["client_mean"] for r in per_run]),
        }
        with open(out_dir / "relay_summary.json", "w") as fh:
            json.dump(summary, fh, sort_keys=True, indent=2)
            fh.write("\n")
        print(
            f"relay adversary: {len(streams)} streams, {len(runs)} marking runs, "
            f"median stream rate {summary['boxplot_stream_rate']['median']:.4f}"
        )
        return 0

    if args.as_topology:
        as_topo = load_as_topology(args.as_topology)
    else:
        topology = load_topology(first / "topology.yaml")
        hosts = [n.key for n in topology.all_nodes()]
        as_topo = generate_as_topology(
            hosts, args.as_count, RngStream(args.seed, "adversary.as-topology")
        )
        save_as_topology(as_topo, out_dir / "as_topology.yaml")
    result = network_compromise_rate(streams, as_topo)
    with open(out_dir / "as_compromise.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["client_id", "rate"])
        for client, rate in result.per_client.items():
            w.writerow([client, f"{rate:.6f}"])
    cdf = cdf_points(list(result.per_client.values()))
    summary = {
        "mode": "as",
        "streams": result.total,
        "stream_rate": result.stream_rate,
        "client_median": result.client_median,
        "cdf": [[round(v, 6), round(p, 6)] for v, p in cdf],
    }
    with open(out_dir / "as_summary.json", "w") as fh:
        json.dump(summary, fh, sort_keys=True, indent=2)
        fh.write("\n")
    print(
        f"as adversary: {result.total} streams, stream rate {result.stream_rate:.4f}, "
        f"client median {result.client_median:.4f}"
    )
    return 0


def _cmd_report(args) -> int:
    reported = write_report(args.artifacts, args.out)
    if not reported:
        raise RunError("no usable artifacts found")
    print((Path(args.out) / "summary.txt").read_text())
    return 0


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    handlers = {
        "run": _cmd_run,
        "sweep": _cmd_sweep,
        "adversary": _cmd_adversary,
        "report": _cmd_report,
    }
    try:
        return handlers[args.command](args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    except (RunError, AnalysisError) as exc:
        print(f"run failed: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"run failed: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
