"""Experiment configuration: packaged defaults, user overlays, validation.

Config files are nested key-value YAML.  Every tunable default lives in
data/defaults.yaml so a run's manifest is self-describing; a user file (and
CLI flags on top of it) only overrides what it mentions.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Optional

import yaml

from .network import NetworkParams, RegionCluster, TopologyGenConfig
from .strategies import STRATEGY_IDS


class ConfigError(Exception):
    """Invalid experiment configuration (CLI exit code 1)."""


def _deep_merge(base: dict, overlay: dict) -> dict:
    merged = dict(base)
    for key, value in overlay.items():
        if isinstance(value, dict) and isinstance(merged.get(key), dict):
            merged[key] = _deep_merge(merged[key], value)
        else:
            merged[key] = value
    return merged


def load_defaults() -> dict:
    text = resources.files("circuitsim.data").joinpath("defaults.yaml").read_text()
    return yaml.safe_load(text)


def load_config(path: Optional[str] = None, overrides: Optional[dict] = None) -> dict:
    """Resolved config dict: packaged defaults <- user file <- explicit overrides."""
    doc = load_defaults()
    if path is not None:
        try:
            with open(path) as fh:
                user = yaml.safe_load(fh) or {}
        except FileNotFoundError as exc:
            raise ConfigError(f"config file not found: {path}") from exc
        except yaml.YAMLError as exc:
            raise ConfigError(f"cannot parse config {path}: {exc}") from exc
        if not isinstance(user, dict):
            raise ConfigError(f"config {path} must be a key-value tree")
        doc = _deep_merge(doc, user)
    if overrides:
        doc = _deep_merge(doc, overrides)
    return doc


def config_hash(doc: dict) -> str:
    return hashlib.sha256(json.dumps(doc, sort_keys=True).encode()).hexdigest()


@dataclass
class PoolSettings:
    dirty_after_s: float
    reap_unused_after_s: float
    replenish_interval_s: float
    port_memory_s: float
    seed_ports: tuple
    unused_open_cap: int = 14


@dataclass
class ExperimentConfig:
    """Validated view over the resolved config dict (kept in .raw for manifests)."""

    raw: dict
    strategy: str
    circuits: Optional[int]
    duration_s: float
    warmup_fraction: float
    seeds: tuple
    topology_source: str
    topology_file: Optional[str]
    topo_gen: TopologyGenConfig
    net: NetworkParams
    pool: PoolSettings
    probes_enabled: object  # "auto" | bool
    probe_interval_s: float
    probe_timeout_s: float
    handshake_timeout_s: float
    attach_timeout_s: float
    web_clients: int
    bulk_clients: int
    web_download_kib: int
    bulk_download_kib: int
    web_think_s: tuple
    request_port: int
    length_uses_destination: bool
    car_sample_size: int
    car_abandon_ms: float
    client_start_spread_s: float
    pool_snapshot_interval_s: float

    def probes_enabled_for(self, strategy: str) -> bool:
        if self.probes_enabled == "auto":
            return strategy != "vanilla"
        return bool(self.probes_enabled)

    @property
    def hash(self) -> str:
        return config_hash(self.raw)


def _require(cond: bool, message: str) -> None:
    if not cond:
        raise ConfigError(message)


def resolve(doc: dict) -> ExperimentConfig:
    """Validate the resolved dict and build the typed config."""
    strategy = doc.get("strategy", "vanilla")
    _require(strategy in STRATEGY_IDS, f"unknown strategy {strategy!r}")

    circuits = doc.get("circuits")
    if circuits is not None:
        circuits = int(circuits)
        _require(circuits >= 1, "circuits must be >= 1 when set")

    duration = float(doc.get("duration_s", 0))
    _require(duration > 0, "duration_s must be > 0")
    warmup_fraction = float(doc.get("warmup_fraction", 1.0 / 3.0))
    _require(0 <= warmup_fraction < 1, "warmup_fraction must be in [0, 1)")

    seeds = doc.get("seeds") or [doc.get("seed", 1)]
    seeds = tuple(int(s) for s in seeds)
    _require(len(seeds) > 0, "at least one seed required")

    topo = doc.get("topology", {})
    source = topo.get("source", "generate")
    _require(source in ("generate", "file"), "topology.source must be generate|file")
    topology_file = topo.get("file")
    if source == "file":
        _require(bool(topology_file), "topology.source=file needs topology.file")
        _require(Path(topology_file).exists(), f"topology file not found: {topology_file}")

    relays = topo.get("relays", {})
    clients = topo.get("clients", {})
    web = int(clients.get("web", 0))
    bulk = int(clients.get("bulk", 0))
    _require(web + bulk > 0, "need at least one client")
    servers = int(topo.get("servers", 0))
    _require(servers > 0 or source == "file", "need at least one server")

    clusters = tuple(
        RegionCluster(
            name=c["name"],
            lat=float(c["lat"]),
            lon=float(c["lon"]),
            weight=float(c["weight"]),
            spread_deg=float(c.get("spread_deg", 3.0)),
        )
        for c in topo.get("clusters", [])
    )
    bw = topo.get("bandwidth_kib", {})
    topo_gen = TopologyGenConfig(
        guards=int(relays.get("guards", 0)),
        exits=int(relays.get("exits", 0)),
        exit_guards=int(relays.get("exit_guards", 0)),
        middles=int(relays.get("middles", 0)),
        clients=web + bulk,
        servers=servers,
        exit_policy_ports=tuple(topo.get("exit_policy_ports", (80, 443))),
        relay_bw_lognorm_mu=float(bw.get("relay_lognorm_mu", 9.0)),
        relay_bw_lognorm_sigma=float(bw.get("relay_lognorm_sigma", 1.0)),
        relay_bw_min_kib=float(bw.get("relay_min", 200.0)),
        relay_bw_max_kib=float(bw.get("relay_max", 200_000.0)),
        client_bw_kib=float(bw.get("client", 6250.0)),
        server_bw_kib=float(bw.get("server", 62500.0)),
        clusters=clusters,
    )
    if source == "generate":
        _require(topo_gen.exits > 0 and topo_gen.guards + topo_gen.exit_guards > 0,
                 "generator needs exits and guards")
        _require(topo_gen.exit_guards <= topo_gen.exits, "exit_guards cannot exceed exits")
        _require(topo_gen.guards + topo_gen.exits + topo_gen.middles >= 3,
                 "need at least three relays")

    net_doc = doc.get("network", {})
    net = NetworkParams(
        processing_floor_ms=float(net_doc.get("processing_floor_ms", 2.0)),
        km_per_ms=float(net_doc.get("km_per_ms", 200.0)),
        jitter_mean_ms=float(net_doc.get("jitter_mean_ms", 0.5)),
        packet_loss=float(net_doc.get("packet_loss", 0.000025)),
        loss_retransmit_factor=float(net_doc.get("loss_retransmit_factor", 1.5)),
        cell_bytes=int(net_doc.get("cell_bytes", 512)),
        cell_payload_bytes=int(net_doc.get("cell_payload_bytes", 498)),
        burst_cells=int(net_doc.get("burst_cells", 250)),
        circuit_window_cells=int(net_doc.get("circuit_window_cells", 500)),
    )
    _require(0 <= net.packet_loss < 1, "packet_loss must be in [0, 1)")
    _require(net.cell_payload_bytes > 0 and net.burst_cells > 0, "cell sizes must be positive")
    _require(net.circuit_window_cells > 0, "circuit_window_cells must be positive")

    pool_doc = doc.get("pool", {})
    pool = PoolSettings(
        dirty_after_s=float(pool_doc.get("dirty_after_s", 600.0)),
        reap_unused_after_s=float(pool_doc.get("reap_unused_after_s", 300.0)),
        replenish_interval_s=float(pool_doc.get("replenish_interval_s", 1.0)),
        port_memory_s=float(pool_doc.get("port_memory_s", 3600.0)),
        seed_ports=tuple(int(p) for p in pool_doc.get("seed_ports", (80, 443))),
        unused_open_cap=int(pool_doc.get("unused_open_cap", 14)),
    )

    probes_doc = doc.get("probes", {})
    probes_enabled = probes_doc.get("enabled", "auto")
    _require(probes_enabled in ("auto", True, False), "probes.enabled must be auto|true|false")

    traffic_doc = doc.get("traffic", {})
    web_doc = traffic_doc.get("web", {})
    bulk_doc = traffic_doc.get("bulk", {})

    return ExperimentConfig(
        raw=doc,
        strategy=strategy,
        circuits=circuits,
        duration_s=duration,
        warmup_fraction=warmup_fraction,
        seeds=seeds,
        topology_source=source,
        topology_file=topology_file,
        topo_gen=topo_gen,
        net=net,
        pool=pool,
        probes_enabled=probes_enabled,
        probe_interval_s=float(probes_doc.get("interval_s", 30.0)),
        probe_timeout_s=float(probes_doc.get("timeout_s", 60.0)),
        handshake_timeout_s=float(doc.get("build", {}).get("handshake_timeout_s", 60.0)),
        attach_timeout_s=float(traffic_doc.get("attach_timeout_s", 120.0)),
        web_clients=web,
        bulk_clients=bulk,
        web_download_kib=int(web_doc.get("download_kib", 320)),
        bulk_download_kib=int(bulk_doc.get("download_kib", 5120)),
        web_think_s=(float(web_doc.get("think_min_s", 1.0)), float(web_doc.get("think_max_s", 20.0))),
        request_port=int(traffic_doc.get("port", 80)),
        length_uses_destination=bool(traffic_doc.get("length_uses_destination", True)),
        car_sample_size=int(doc.get("car", {}).get("sample_size", 3)),
        car_abandon_ms=float(doc.get("car", {}).get("abandon_threshold_ms", 500.0)),
        client_start_spread_s=float(traffic_doc.get("client_start_spread_s", 300.0)),
        pool_snapshot_interval_s=float(doc.get("logs", {}).get("pool_snapshot_interval_s", 10.0)),
    )
