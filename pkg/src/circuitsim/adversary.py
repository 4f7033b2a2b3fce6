"""Offline relay-level and AS-level compromise analysis over stream logs.

Relay level: mark a bandwidth fraction of guards and exits, count streams
whose guard and exit are both marked.  AS level: a deterministic routing
oracle yields per-direction AS paths for the entry side (client-guard) and
exit side (exit-server); a stream is compromised when any AS, endpoints
included, sees both sides, covering the asymmetric data/ack correlation case.
"""

from __future__ import annotations

import heapq
import logging
from dataclasses import dataclass, field
from statistics import median
from typing import Iterable, Optional, Sequence

import yaml

from .engine import RngStream
from .network import RelayDescriptor

logger = logging.getLogger(__name__)

MODE_SHORTEST = "shortest"
MODE_VALLEY_FREE = "valley_free"


class AnalysisError(Exception):
    pass


@dataclass
class AdversaryConfig:
    guard_bw_fraction: float = 0.10
    exit_bw_fraction: float = 0.10
    runs: int = 10
    seed: int = 1

    def __post_init__(self):
        for name in ("guard_bw_fraction", "exit_bw_fraction"):
            value = getattr(self, name)
            if not 0.0 <= value <= 1.0:
                raise ValueError(f"{name} must be in [0, 1]")


@dataclass
class MarkedRelays:
    guards: frozenset
    exits: frozenset
    guard_bw_marked: float = 0.0
    exit_bw_marked: float = 0.0
    guard_bw_target: float = 0.0
    exit_bw_target: float = 0.0


def _mark_pool(pool: Sequence[RelayDescriptor], fraction: float, rng: RngStream):
    """Uniform draws without replacement until marked bandwidth first crosses target."""
    total = sum(r.bandwidth for r in pool)
    target = fraction * total
    if target <= 0:
        return frozenset(), 0.0, target
    order = rng.sample(list(pool), len(pool))
    marked = set()
    cum = 0.0
    for relay in order:
        marked.add(relay.relay_id)
        cum += relay.bandwidth
        if cum >= target:
            break
    if marked and cum > 1.5 * target:
        logger.debug("marking overshoot: %.0f KiB/s marked for target %.0f", cum, target)
    return frozenset(marked), cum, target


def mark_malicious(relays: Sequence[RelayDescriptor], cfg: AdversaryConfig, rng: RngStream) -> MarkedRelays:
    """Mark guards and exits by bandwidth fraction; dual-flag relays count in
    whichever pool they were drawn from (possibly both)."""
    guards = [r for r in relays if r.is_guard]
    exits = [r for r in relays if r.is_exit]
    if not guards or not exits:
        raise AnalysisError("marking needs at least one guard and one exit")
    g_set, g_bw, g_target = _mark_pool(guards, cfg.guard_bw_fraction, rng)
    e_set, e_bw, e_target = _mark_pool(exits, cfg.exit_bw_fraction, rng)
    return MarkedRelays(
        guards=g_set,
        exits=e_set,
        guard_bw_marked=g_bw,
        exit_bw_marked=e_bw,
        guard_bw_target=g_target,
        exit_bw_target=e_target,
    )


@dataclass
class CompromiseResult:
    per_client: dict  # client_id -> compromised fraction
    stream_rate: float  # compromised / total over all streams
    compromised: int
    total: int

    @property
    def client_median(self) -> float:
        return median(self.per_client.values()) if self.per_client else 0.0

    @property
    def client_mean(self) -> float:
        if not self.per_client:
            return 0.0
        return sum(self.per_client.values()) / len(self.per_client)


def relay_compromise_rate(streams: Iterable, marked: MarkedRelays) -> CompromiseResult:
    """A stream is compromised iff its guard and its exit are both marked."""
    per_client_total: dict = {}
    per_client_bad: dict = {}
    total = 0
    bad = 0
    for s in streams:
        if s.guard_id is None or s.exit_id is None:
            continue
        total += 1
        per_client_total[s.client_id] = per_client_total.get(s.client_id, 0) + 1
        if s.guard_id in marked.guards and s.exit_id in marked.exits:
            bad += 1
            per_client_bad[s.client_id] = per_client_bad.get(s.client_id, 0) + 1
    per_client = {
        c: per_client_bad.get(c, 0) / n for c, n in sorted(per_client_total.items())
    }
    return CompromiseResult(per_client, bad / total if total else 0.0, bad, total)


def relay_adversary_runs(
    relays: Sequence[RelayDescriptor], streams: Sequence, cfg: AdversaryConfig
) -> list:
    """The repeated-marking protocol: fresh marks per run over the same streams."""
    out = []
    for i in range(cfg.runs):
        rng = RngStream(cfg.seed, f"adversary.marking.{i}")
        marked = mark_malicious(relays, cfg, rng)
        out.append((marked, relay_compromise_rate(streams, marked)))
    return out


def boxplot_stats(values: Sequence[float]) -> dict:
    if not values:
        return {"min": 0.0, "q1": 0.0, "median": 0.0, "q3": 0.0, "max": 0.0}
    ordered = sorted(values)
    from .traffic import percentile

    return {
        "min": ordered[0],
        "q1": percentile(ordered, 25),
        "median": percentile(ordered, 50),
        "q3": percentile(ordered, 75),
        "max": ordered[-1],
    }


# --- AS-level analysis -------------------------------------------------------

_REL_RANK = {"customer": 0, "peer": 1, "provider": 2}


@dataclass
class AsTopology:
    """AS graph plus a host-to-AS mapping and a deterministic routing oracle.

    Edges are directed with independent per-direction weights; `relationships`
    maps (u, v) to what v is from u's standpoint (customer/peer/provider) and
    is only consulted in valley-free mode.
    """

    ases: list
    edges: dict  # (u, v) -> weight, both directions present
    relationships: dict = field(default_factory=dict)
    host_as: dict = field(default_factory=dict)
    mode: str = MODE_SHORTEST
    symmetric: bool = False

    def __post_init__(self):
        self._neighbors: dict = {}
        for (u, v) in self.edges:
            self._neighbors.setdefault(u, []).append(v)
        for u in self._neighbors:
            self._neighbors[u].sort()
        self._from_cache: dict = {}
        self._to_cache: dict = {}

    def as_of(self, host: str) -> int:
        try:
            return self.host_as[host]
        except KeyError as exc:
            raise AnalysisError(f"host {host!r} has no AS mapping") from exc

    def as_path(self, a: str, b: str, direction: str = "forward") -> list:
        """AS path for traffic a->b (forward) or the return path b->a (reverse)."""
        src, dst = self.as_of(a), self.as_of(b)
        if direction == "forward":
            return self._route(src, dst)
        if direction != "reverse":
            raise ValueError(f"direction must be forward|reverse, got {direction!r}")
        if self.symmetric:
            return list(reversed(self._route(src, dst)))
        return self._route(dst, src)

    def _route(self, src: int, dst: int) -> list:
        if src == dst:
            return [src]
        if self.mode == MODE_SHORTEST:
            table = self._from_cache.get(src)
            if table is None:
                table = self._dijkstra_from(src)
                self._from_cache[src] = table
            path = table.get(dst)
        else:
            table = self._to_cache.get(dst)
            if table is None:
                table = self._valley_free_to(dst)
                self._to_cache[dst] = table
            path = table.get(src)
        if path is None:
            raise AnalysisError(f"no AS route {src} -> {dst}")
        return list(path)

    def _dijkstra_from(self, src: int) -> dict:
        """Single-source shortest paths; equal costs break to the
        lexicographically smallest AS-id path."""
        best: dict = {}
        heap = [(0.0, (src,))]
        while heap:
            dist, path = heapq.heappop(heap)
            node = path[-1]
            if node in best:
                continue
            best[node] = path
            for nxt in self._neighbors.get(node, ()):
                if nxt in best:
                    continue
                heapq.heappush(heap, (dist + self.edges[(node, nxt)], path + (nxt,)))
        return best

    def _valley_free_to(self, dst: int) -> dict:
        """Routes from every AS toward dst under customer > peer > provider
        preference with valley-free export rules, hop count second, smallest
        path third.  Returns src -> path(src..dst)."""
        best: dict = {}
        # state: (class_rank, hops, path-from-node-to-dst, node)
        heap = [(0, 0, (dst,), dst)]
        while heap:
            rank, hops, path, node = heapq.heappop(heap)
            if node in best:
                continue
            best[node] = (rank, path)
            for nxt in self._neighbors.get(node, ()):
                if nxt in best:
                    continue
                # node announces its route to nxt: allowed for customer-learned
                # (or originated) routes, or when nxt is node's customer.
                if rank != 0 and self.relationships.get((node, nxt)) != "customer":
                    continue
                nxt_rank = _REL_RANK[self.relationships[(nxt, node)]]
                heapq.heappush(heap, (nxt_rank, hops + 1, (nxt,) + path, nxt))
        return {node: path for node, (rank, path) in best.items()}


def network_compromise_rate(streams: Iterable, topo: AsTopology) -> CompromiseResult:
    """Streams whose entry-side and exit-side AS sets (both directions,
    endpoints included) intersect."""
    per_client_total: dict = {}
    per_client_bad: dict = {}
    total = 0
    bad = 0
    side_cache: dict = {}

    def side(a: str, b: str) -> frozenset:
        key = (a, b)
        cached = side_cache.get(key)
        if cached is None:
            cached = frozenset(topo.as_path(a, b, "forward")) | frozenset(
                topo.as_path(a, b, "reverse")
            )
            side_cache[key] = cached
        return cached

    for s in streams:
        if s.guard_id is None or s.exit_id is None:
            continue
        total += 1
        per_client_total[s.client_id] = per_client_total.get(s.client_id, 0) + 1
        entry = side(f"C{s.client_id}", f"R{s.guard_id}")
        exit_side = side(f"R{s.exit_id}", f"S{s.server_id}")
        if entry & exit_side:
            bad += 1
            per_client_bad[s.client_id] = per_client_bad.get(s.client_id, 0) + 1
    per_client = {
        c: per_client_bad.get(c, 0) / n for c, n in sorted(per_client_total.items())
    }
    return CompromiseResult(per_client, bad / total if total else 0.0, bad, total)


# --- synthetic AS topologies ---------------------------------------------------


def generate_as_topology(
    hosts: Sequence[str],
    n_ases: int,
    rng: RngStream,
    mode: str = MODE_SHORTEST,
    symmetric: bool = False,
    asymmetric_weights: bool = False,
) -> AsTopology:
    """Tiered synthetic AS graph: a top clique of peers, a provider hierarchy
    below it, occasional lateral peering; every host mapped to one AS."""
    if n_ases < 2:
        raise ValueError("need at least two ASes")
    ases = list(range(1, n_ases + 1))
    n_top = max(1, n_ases // 10)
    n_mid = max(1, (3 * n_ases) // 10)
    top = ases[:n_top]
    mid = ases[n_top : n_top + n_mid]
    stub = ases[n_top + n_mid :]

    edges: dict = {}
    relationships: dict = {}

    def weight() -> float:
        return round(rng.uniform(1.0, 10.0), 6)

    def add_edge(u: int, v: int, rel_uv: str, rel_vu: str) -> None:
        if (u, v) in edges:
            return
        w = weight()
        edges[(u, v)] = w
        edges[(v, u)] = weight() if asymmetric_weights else w
        relationships[(u, v)] = rel_uv
        relationships[(v, u)] = rel_vu

    for i, u in enumerate(top):
        for v in top[i + 1 :]:
            add_edge(u, v, "peer", "peer")
    for m in mid:
        n_prov = 1 + rng.randrange(min(2, len(top)))
        for p in rng.sample(top, n_prov):
            add_edge(m, p, "provider", "customer")  # p is m's provider
    for i, m in enumerate(mid):
        for other in mid[i + 1 :]:
            if rng.random() < 0.15:
                add_edge(m, other, "peer", "peer")
    providers_for_stubs = mid if mid else top
    for s in stub:
        n_prov = 1 + rng.randrange(min(2, len(providers_for_stubs)))
        for p in rng.sample(providers_for_stubs, n_prov):
            add_edge(s, p, "provider", "customer")

    host_as = {h: ases[rng.randrange(n_ases)] for h in hosts}
    return AsTopology(
        ases=ases,
        edges=edges,
        relationships=relationships,
        host_as=host_as,
        mode=mode,
        symmetric=symmetric,
    )


def save_as_topology(topo: AsTopology, path) -> None:
    seen = set()
    edge_docs = []
    for (u, v), w in sorted(topo.edges.items()):
        if (v, u) in seen:
            continue
        seen.add((u, v))
        rel = topo.relationships.get((u, v))
        doc = {"a": u, "b": v, "w_ab": w, "w_ba": topo.edges[(v, u)]}
        if rel == "provider":
            doc["rel"] = "c2p"  # a is customer of b
        elif rel == "customer":
            doc["rel"] = "p2c"
        elif rel == "peer":
            doc["rel"] = "p2p"
        edge_docs.append(doc)
    doc = {
        "mode": topo.mode,
        "symmetric": topo.symmetric,
        "ases": list(topo.ases),
        "edges": edge_docs,
        "hosts": dict(sorted(topo.host_as.items())),
    }
    with open(path, "w") as fh:
        yaml.safe_dump(doc, fh, sort_keys=False)


def load_as_topology(path) -> AsTopology:
    with open(path) as fh:
        doc = yaml.safe_load(fh)
    edges: dict = {}
    relationships: dict = {}
    for e in doc.get("edges", []):
        u, v = int(e["a"]), int(e["b"])
        w_ab = float(e.get("w_ab", 1.0))
        w_ba = float(e.get("w_ba", w_ab))
        edges[(u, v)] = w_ab
        edges[(v, u)] = w_ba
        rel = e.get("rel", "p2p")
        if rel == "c2p":
            relationships[(u, v)] = "provider"
            relationships[(v, u)] = "customer"
        elif rel == "p2c":
            relationships[(u, v)] = "customer"
            relationships[(v, u)] = "provider"
        else:
            relationships[(u, v)] = "peer"
            relationships[(v, u)] = "peer"
    return AsTopology(
        ases=[int(a) for a in doc["ases"]],
        edges=edges,
        relationships=relationships,
        host_as={str(h): int(a) for h, a in doc.get("hosts", {}).items()},
        mode=doc.get("mode", MODE_SHORTEST),
        symmetric=bool(doc.get("symmetric", False)),
    )
