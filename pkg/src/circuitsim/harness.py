"""Run orchestration and on-disk artifacts: one directory per (config, seed).

Artifacts are plain CSV/JSON/YAML so downstream analysis never needs the
simulator: streams.csv (one row per stream), circuits.csv, rtt_samples.csv,
pool.csv (snapshot counts), summary.json, topology.yaml, and manifest.json
holding the fully resolved config + hash for bit-exact reruns.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

from . import __version__
from .config import ExperimentConfig, config_hash, resolve
from .engine import RngStream, ticks_to_s
from .network import Topology, generate_topology, load_topology, save_topology
from .simulation import SimOutput, Simulation
from .strategies import BASELINE_IDS

FAIL_MARKER = "FAILED"


class RunError(Exception):
    """Simulation failed at runtime (CLI exit code 2)."""


def build_topology(cfg: ExperimentConfig) -> Topology:
    """Topology comes from the file or from the generator under its own seed,
    so every run seed of one experiment sees the same network."""
    if cfg.topology_source == "file":
        return load_topology(cfg.topology_file)
    gen_seed = int(cfg.raw.get("topology", {}).get("generation_seed", 42))
    return generate_topology(cfg.topo_gen, RngStream(gen_seed, "topology"))


def run_once(cfg: ExperimentConfig, seed: int, topology: Optional[Topology] = None) -> SimOutput:
    topology = topology or build_topology(cfg)
    sim = Simulation(cfg, topology, seed)
    return sim.run()


def _t(ticks: Optional[int]) -> str:
    return "" if ticks is None else f"{ticks_to_s(ticks):.6f}"


def write_artifacts(out: SimOutput, cfg: ExperimentConfig, out_dir) -> Path:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    with open(out_dir / "streams.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(
            [
                "stream_id", "client_id", "kind", "server_id", "port",
                "requested_at_s", "attached_at_s", "first_byte_at_s", "last_byte_at_s",
                "circuit_id", "guard_id", "middle_id", "exit_id", "outcome",
            ]
        )
        for r in out.records:
            w.writerow(
                [
                    r.stream_id, r.client_id, r.kind, r.server_id, r.port,
                    _t(r.requested_at), _t(r.circuit_attached_at), _t(r.first_byte_at),
                    _t(r.last_byte_at),
                    "" if r.circuit_id is None else r.circuit_id,
                    "" if r.guard_id is None else r.guard_id,
                    "" if r.middle_id is None else r.middle_id,
                    "" if r.exit_id is None else r.exit_id,
                    r.outcome,
                ]
            )

    with open(out_dir / "circuits.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(
            [
                "circuit_id", "client_id", "guard_id", "middle_id", "exit_id",
                "requested_at_s", "built_at_s", "first_used_at_s", "closed_at_s",
                "state", "close_reason", "streams", "rtt_min_ms", "length_km",
            ]
        )
        for c in out.circuits:
            w.writerow(
                [
                    c.circuit_id, int(c.client_key[1:]), c.guard.relay_id,
                    c.middle.relay_id, c.exit.relay_id,
                    _t(c.requested_at), _t(c.built_at), _t(c.first_used_at), _t(c.closed_at),
                    c.state, c.close_reason or "", c.stream_count,
                    "" if c.rtt_min is None else f"{c.rtt_min:.6f}",
                    f"{c.static_length_km:.3f}",
                ]
            )

    with open(out_dir / "rtt_samples.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["circuit_id", "t_s", "rtt_ms", "source", "tc_ms"])
        for c in out.circuits:
            for measured_at, value, source, tc in c.sample_log:
                w.writerow([c.circuit_id, _t(measured_at), f"{value:.6f}", source, f"{tc:.6f}"])

    ports = list(cfg.pool.seed_ports)
    with open(out_dir / "pool.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t_s", "building", "open", "dirty", "closed_total", *[f"clean_p{p}" for p in ports]])
        for row in out.pool_rows:
            w.writerow([f"{row[0]:.1f}", *row[1:]])

    save_topology(out.topology, out_dir / "topology.yaml")

    with open(out_dir / "summary.json", "w") as fh:
        json.dump(out.summary, fh, sort_keys=True, indent=2)
        fh.write("\n")

    manifest = {
        "config": cfg.raw,
        "config_hash": cfg.hash,
        "seed": out.seed,
        "version": __version__,
        "files": [
            "streams.csv", "circuits.csv", "rtt_samples.csv", "pool.csv",
            "topology.yaml", "summary.json",
        ],
    }
    with open(out_dir / "manifest.json", "w") as fh:
        json.dump(manifest, fh, sort_keys=True, indent=2)
        fh.write("\n")
    return out_dir


def run_to_dir(cfg: ExperimentConfig, seed: int, out_dir, topology: Optional[Topology] = None) -> Path:
    """Run one seed and persist artifacts; leaves a failure marker on error."""
    out_dir = Path(out_dir)
    try:
        output = run_once(cfg, seed, topology)
        return write_artifacts(output, cfg, out_dir)
    except Exception as exc:
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / FAIL_MARKER).write_text(f"{type(exc).__name__}: {exc}\n")
        raise RunError(str(exc)) from exc


def run_from_manifest(manifest_path, out_dir) -> Path:
    """Reproduce a run bit-exactly from its manifest."""
    with open(manifest_path) as fh:
        manifest = json.load(fh)
    cfg = resolve(manifest["config"])
    if config_hash(manifest["config"]) != manifest["config_hash"]:
        raise RunError("manifest config hash mismatch")
    return run_to_dir(cfg, int(manifest["seed"]), out_dir)


# --- sweep -------------------------------------------------------------------


def sweep_cells(strategies: Sequence[str], n_values: Sequence[int]) -> list:
    """(strategy, N) grid; baselines ignore N and appear once."""
    cells = []
    for s in strategies:
        if s in BASELINE_IDS:
            cells.append((s, None))
        else:
            cells.extend((s, n) for n in n_values)
    return cells


def cell_label(strategy: str, n: Optional[int]) -> str:
    return strategy if n is None else f"{strategy}_n{n}"


def run_sweep(base_doc: dict, strategies, n_values, seeds, out_root) -> dict:
    """Cross-product of cells x seeds; per-cell failures are recorded, the rest
    of the grid still runs."""
    out_root = Path(out_root)
    results: dict = {}
    topo_cache: dict = {}
    for strategy, n in sweep_cells(strategies, n_values):
        label = cell_label(strategy, n)
        doc = dict(base_doc)
        doc = {**doc, "strategy": strategy, "circuits": n}
        cfg = resolve(doc)
        topo_key = cfg.topology_file or "generated"
        if topo_key not in topo_cache:
            topo_cache[topo_key] = build_topology(cfg)
        cell_result = {"dirs": [], "errors": []}
        for seed in seeds:
            run_dir = out_root / label / f"seed{seed}"
            try:
                run_to_dir(cfg, seed, run_dir, topology=topo_cache[topo_key])
                cell_result["dirs"].append(run_dir)
            except RunError as exc:
                cell_result["errors"].append((seed, str(exc)))
        results[(strategy, n)] = cell_result
    return results


# --- reading artifacts back ----------------------------------------------------


@dataclass
class StreamRow:
    """streams.csv row, parsed for offline analysis."""

    stream_id: int
    client_id: int
    kind: str
    server_id: int
    port: int
    requested_at_s: float
    circuit_id: Optional[int]
    guard_id: Optional[int]
    middle_id: Optional[int]
    exit_id: Optional[int]
    outcome: str
    ttfb_s: Optional[float] = None
    ttlb_s: Optional[float] = None


def load_streams(run_dir) -> list:
    rows = []
    with open(Path(run_dir) / "streams.csv", newline="") as fh:
        for r in csv.DictReader(fh):
            requested = float(r["requested_at_s"])
            first = float(r["first_byte_at_s"]) if r["first_byte_at_s"] else None
            last = float(r["last_byte_at_s"]) if r["last_byte_at_s"] else None
            rows.append(
                StreamRow(
                    stream_id=int(r["stream_id"]),
                    client_id=int(r["client_id"]),
                    kind=r["kind"],
                    server_id=int(r["server_id"]),
                    port=int(r["port"]),
                    requested_at_s=requested,
                    circuit_id=int(r["circuit_id"]) if r["circuit_id"] else None,
                    guard_id=int(r["guard_id"]) if r["guard_id"] else None,
                    middle_id=int(r["middle_id"]) if r["middle_id"] else None,
                    exit_id=int(r["exit_id"]) if r["exit_id"] else None,
                    outcome=r["outcome"],
                    ttfb_s=(first - requested) if first is not None else None,
                    ttlb_s=(last - requested) if last is not None else None,
                )
            )
    return rows


def load_summary(run_dir) -> dict:
    with open(Path(run_dir) / "summary.json") as fh:
        return json.load(fh)


def load_manifest(run_dir) -> dict:
    with open(Path(run_dir) / "manifest.json") as fh:
        return json.load(fh)
