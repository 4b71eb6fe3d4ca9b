"""Convergence measurement, theoretical bounds and detection latency.

Everything here works from trace records alone: node states are rebuilt by
replaying ``rx``/``beacon_rx`` rows through the consensus functions, with the
proximity of each reception taken from the latest ``level_change`` row.
"""

from __future__ import annotations

import math
from collections import deque
from dataclasses import asdict, dataclass, field
from typing import Dict, FrozenSet, Iterable, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from .consensus import (
    BeaconPacket,
    DataPacket,
    NodeState,
    ProximityScale,
    handle_beacon,
    handle_data_packet,
    mates_of,
    mgmc_init,
)
from .scenario import GroundTruthGroups, Partition, classify_event, component_map
from .trace import TraceRecord


@dataclass(frozen=True)
class BoundParams:
    N: int
    Delta: int
    epsilon: float = 0.1

    def __post_init__(self):
        if self.N < 1 or self.Delta < 1:
            raise ValueError("N and Delta must be >= 1")
        if not 0.0 < self.epsilon < 1.0:
            raise ValueError(f"epsilon must lie in (0, 1), got {self.epsilon}")


def bound_expected_tau(p: BoundParams, log=math.log) -> float:
    """Upper bound on the mean number of messages to convergence: N*Delta*(1 + log N)."""
    return p.N * p.Delta * (1.0 + log(p.N))


def bound_tau_with_confidence(p: BoundParams, log=math.log) -> float:
    """Bound holding with probability ``1 - epsilon``: N*Delta*(log N + log(Delta/epsilon))."""
    return p.N * p.Delta * (log(p.N) + log(p.Delta / p.epsilon))


@dataclass
class ConvergenceRecord:
    epoch: int
    start_ms: float
    tau: int = 0
    converged: bool = False
    convergence_ms: Optional[float] = None  # time from epoch start to convergence
    complete: bool = True  # False when the trace ends before the epoch does


@dataclass
class DetectionEvent:
    kind: str
    event_ms: float
    detected_ms: Optional[float]
    latency_s: Optional[float]
    groups: List[List[int]]

    @property
    def missed(self) -> bool:
        return self.detected_ms is None


@dataclass
class DetectionReport:
    events: List[DetectionEvent] = field(default_factory=list)


@dataclass
class ReplayResult:
    epochs: List[ConvergenceRecord]
    detection: DetectionReport
    final_states: List[NodeState]
    final_levels: List[Dict[int, int]]
    rejected: int


def replay(
    records: Iterable[TraceRecord],
    n: int,
    scale: ProximityScale,
    truth: GroundTruthGroups,
    end_ms: float,
    epoch_period_ms: float,
) -> ReplayResult:
    """Rebuild node states from the trace and score them against ``truth``.

    An epoch converges at the first instant every node holds the current
    epoch and a mate set equal to its true group; ``tau`` counts the data
    broadcasts from the epoch's first beacon up to that instant. Detection
    of a truth change is the first instant at or after it where all mate
    sets match the new partition, regardless of epoch.
    """
    states = [mgmc_init(v, n, scale) for v in range(n)]
    levels: List[Dict[int, int]] = [dict() for _ in range(n)]
    changes = truth.changes
    ci = 0
    comp = component_map(changes[0][1])
    epoch = 0
    cur = ConvergenceRecord(epoch=0, start_ms=0.0)
    epochs = [cur]
    match = [False] * n
    good = [False] * n
    n_match = n_good = 0
    pending: Optional[DetectionEvent] = None
    events: List[DetectionEvent] = []

    def score(v):
        nonlocal n_match, n_good
        st = states[v]
        m = mates_of(st) == comp[v]
        g = m and st.epoch == epoch
        n_match += m - match[v]
        n_good += g - good[v]
        match[v], good[v] = m, g

    def check(t):
        nonlocal pending
        if not cur.converged and n_good == n:
            cur.converged = True
            cur.convergence_ms = t - cur.start_ms
        if pending is not None and n_match == n:
            pending.detected_ms = t
            pending.latency_s = (t - pending.event_ms) / 1000.0
            pending = None

    def advance_truth(t):
        nonlocal ci, comp, pending
        while ci + 1 < len(changes) and changes[ci + 1][0] <= t:
            ci += 1
            te, new = changes[ci]
            comp = component_map(new)
            old = changes[ci - 1][1]
            pending = DetectionEvent(
                kind=classify_event(old, new), event_ms=te, detected_ms=None,
                latency_s=None, groups=[sorted(g) for g in new],
            )
            events.append(pending)
            for v in range(n):
                score(v)
            check(te)

    for v in range(n):
        score(v)
    check(0.0)
    next_change = changes[1][0] if len(changes) > 1 else math.inf

    for r in records:
        t = r.time_ms
        if t >= next_change:
            advance_truth(t)
            next_change = changes[ci + 1][0] if ci + 1 < len(changes) else math.inf
        kind = r.kind
        if kind == "rx":
            v = r.node
            old = states[v]
            new = handle_data_packet(old, DataPacket(r.peer, r.epoch, r.vector), levels[v].get(r.peer, 0))
            if new is not old:
                states[v] = new
                score(v)
                check(t)
        elif kind == "tx":
            if not cur.converged:
                cur.tau += 1
        elif kind == "level_change":
            levels[r.node][r.peer] = r.level
        elif kind == "beacon_rx":
            v = r.node
            old = states[v]
            new = handle_beacon(old, BeaconPacket(r.epoch))
            if new is not old:
                states[v] = new
                score(v)
                check(t)
        elif kind == "beacon_tx" and r.epoch > epoch:
            epoch = r.epoch
            cur = ConvergenceRecord(epoch=epoch, start_ms=t)
            epochs.append(cur)
            for v in range(n):
                score(v)
            check(t)
    advance_truth(end_ms)
    if not cur.converged and cur.start_ms + epoch_period_ms > end_ms + 1e-9:
        cur.complete = False
    return ReplayResult(
        epochs=epochs,
        detection=DetectionReport(events),
        final_states=states,
        final_levels=levels,
        rejected=sum(s.rejected for s in states),
    )


def measure_tau(trace, truth: Optional[GroundTruthGroups] = None) -> List[ConvergenceRecord]:
    """Per-epoch convergence records for a ``SimTrace``."""
    return _replay_trace(trace, truth).epochs


def detection_latency(trace, truth: Optional[GroundTruthGroups] = None) -> DetectionReport:
    return _replay_trace(trace, truth).detection


def _replay_trace(trace, truth):
    truth = truth or trace.scenario.truth()
    return replay(
        trace.records, trace.n_nodes, trace.scenario.scale, truth,
        trace.duration_ms, trace.config.epoch_period_ms,
    )


# -- mate graph -------------------------------------------------------------


def mate_adjacency(levels: Sequence[Mapping[int, int]], mate_threshold: int) -> List[set]:
    """Undirected mate graph: an edge wherever either end rates the other a mate."""
    n = len(levels)
    adj = [set() for _ in range(n)]
    for v, row in enumerate(levels):
        for j, lvl in row.items():
            if lvl > mate_threshold and 0 <= j < n and j != v:
                adj[v].add(j)
                adj[j].add(v)
    return adj


def bfs_distances(adj: Sequence[Iterable[int]], src: int) -> Dict[int, int]:
    dist = {src: 0}
    q = deque([src])
    while q:
        u = q.popleft()
        for w in adj[u]:
            if w not in dist:
                dist[w] = dist[u] + 1
                q.append(w)
    return dist


def graph_diameter(adj: Sequence[Iterable[int]]) -> int:
    """Largest finite BFS eccentricity, i.e. the max diameter over components."""
    return max((max(bfs_distances(adj, v).values()) for v in range(len(adj))), default=0)


def mate_graph_diameter(levels: Sequence[Mapping[int, int]], mate_threshold: int) -> int:
    return graph_diameter(mate_adjacency(levels, mate_threshold))


def components(adj: Sequence[Iterable[int]]) -> Partition:
    seen: Dict[int, FrozenSet[int]] = {}
    out = []
    for v in range(len(adj)):
        if v not in seen:
            comp = frozenset(bfs_distances(adj, v))
            for u in comp:
                seen[u] = comp
            out.append(comp)
    return tuple(sorted(out, key=min))


# -- summaries --------------------------------------------------------------


def channel_stats(records: Iterable[TraceRecord], n: int, duration_ms: float) -> dict:
    """Delivery accounting over data packets plus send/receive rates."""
    tx = [0] * n
    rx = lost = collided = 0
    for r in records:
        k = r.kind
        if k == "tx":
            tx[r.node] += 1
        elif k == "rx":
            rx += 1
        elif k == "loss" and r.peer is not None and r.peer < n:
            lost += 1
        elif k == "collision" and r.peer is not None and r.peer < n:
            collided += 1
    attempts = rx + lost + collided
    secs = duration_ms / 1000.0
    pairs = n * (n - 1)
    return {
        "tx_total": sum(tx),
        "rx_total": rx,
        "lost_total": lost,
        "collided_total": collided,
        "loss_rate": (lost + collided) / attempts if attempts else 0.0,
        "tx_rate_per_node": sum(tx) / n / secs if secs else 0.0,
        "tx_rate_min": min(tx) / secs if secs else 0.0,
        "tx_rate_max": max(tx) / secs if secs else 0.0,
        "rx_rate_per_pair": rx / pairs / secs if pairs and secs else 0.0,
        "rx_rate_per_node": rx / n / secs if secs else 0.0,
    }


def tau_values(epochs: Sequence[ConvergenceRecord], start_ms: float = 0.0) -> List[int]:
    return [e.tau for e in epochs if e.converged and e.start_ms >= start_ms]


def tau_histogram(taus: Sequence[int]) -> List[Tuple[int, int]]:
    if not taus:
        return []
    counts = np.bincount(np.asarray(taus, dtype=int))
    return [(i, int(c)) for i, c in enumerate(counts)]


def summarize(result: ReplayResult, records: Sequence[TraceRecord], n: int, duration_ms: float,
              mate_threshold: int, epsilon: float = 0.1) -> dict:
    taus = tau_values(result.epochs)
    delta = max(1, mate_graph_diameter(result.final_levels, mate_threshold))
    p = BoundParams(n, delta, epsilon)
    counted = [e for e in result.epochs if e.complete]
    out = {
        "n_nodes": n,
        "epochs": len(counted),
        "epochs_converged": sum(e.converged for e in counted),
        "tau_mean": float(np.mean(taus)) if taus else None,
        "tau_quantiles": (
            {str(q): float(np.quantile(taus, q)) for q in (0.5, 0.9, 0.99)} if taus else {}
        ),
        "delta_c_final": delta,
        "bounds": {
            "epsilon": epsilon,
            "expected_tau_ln": bound_expected_tau(p),
            "tau_with_confidence_ln": bound_tau_with_confidence(p),
            "expected_tau_log10": bound_expected_tau(p, math.log10),
            "tau_with_confidence_log10": bound_tau_with_confidence(p, math.log10),
        },
        "channel": channel_stats(records, n, duration_ms),
        "protocol_rejected": result.rejected,
        "detection": [asdict(e) for e in result.detection.events],
    }
    return out
