"""Group consensus state machines (static, mate-gated and epoch-reset variants).

Every node keeps a proximity vector with one integer entry per node id. The
node's own entry holds the top level ``M``; merging is a component-wise max.
All functions here are pure: they take a state and return a new one.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Dict, FrozenSet, Sequence, Tuple

Vector = Tuple[int, ...]


class ProtocolError(ValueError):
    """A packet or vector that does not fit the node's configuration."""


@dataclass(frozen=True)
class ProximityScale:
    M: int = 3
    mate_threshold: int = 2

    def __post_init__(self):
        if self.M < 1:
            raise ValueError(f"M must be positive, got {self.M}")
        if self.M > 1 and not 0 < self.mate_threshold < self.M:
            raise ValueError(
                f"mate_threshold must lie in (0, M), got {self.mate_threshold} for M={self.M}"
            )


@dataclass(frozen=True)
class DataPacket:
    sender: int
    epoch: int
    vector: Vector


@dataclass(frozen=True)
class BeaconPacket:
    epoch: int


@dataclass(frozen=True)
class NodeState:
    node: int
    vector: Vector
    epoch: int = 0
    scale: ProximityScale = field(default_factory=ProximityScale)
    rejected: int = 0  # packets dropped for a length mismatch

    @property
    def n(self) -> int:
        return len(self.vector)


@dataclass(frozen=True)
class Groups:
    mates: FrozenSet[int]
    observed: Dict[int, int]


def sgc_init(node: int, n: int, M: int = 1) -> Vector:
    """Initial vector: ``M`` at the node's own index, 0 elsewhere."""
    if not 0 <= node < n:
        raise ValueError(f"node {node} out of range for n={n}")
    return tuple(M if i == node else 0 for i in range(n))


def merge_max(a: Sequence[int], b: Sequence[int]) -> Vector:
    if len(a) != len(b):
        raise ValueError(f"vector length mismatch: {len(a)} != {len(b)}")
    return tuple(map(max, a, b))


def mgmc_init(node: int, n: int, scale: ProximityScale | None = None) -> NodeState:
    scale = scale or ProximityScale()
    return NodeState(node=node, vector=sgc_init(node, n, scale.M), epoch=0, scale=scale)


def epoch_reset(state: NodeState, epoch: int) -> NodeState:
    """Advance to ``epoch`` and restore the initial vector if it is newer.

    Shared by data packets and beacons so both paths reset identically.
    """
    if epoch <= state.epoch:
        return state
    return replace(state, epoch=epoch, vector=sgc_init(state.node, state.n, state.scale.M))


def handle_data_packet(state: NodeState, pkt: DataPacket, proxim: int) -> NodeState:
    if len(pkt.vector) != state.n or not 0 <= pkt.sender < state.n:
        return replace(state, rejected=state.rejected + 1)
    if pkt.epoch < state.epoch:
        # stale epoch: merging would resurrect membership from before the reset
        return state
    state = epoch_reset(state, pkt.epoch)
    if proxim > state.scale.mate_threshold:
        merged = tuple(map(max, state.vector, pkt.vector))
        if merged == state.vector:
            return state
        return replace(state, vector=merged)
    j = pkt.sender
    if proxim <= state.vector[j]:
        return state
    vec = list(state.vector)
    vec[j] = proxim
    return replace(state, vector=tuple(vec))


def handle_beacon(state: NodeState, beacon: BeaconPacket) -> NodeState:
    return epoch_reset(state, beacon.epoch)


def extract_groups(vector: Sequence[int], node: int, M: int) -> Groups:
    """Decode a vector into the mate set and the weaker observed proximities."""
    mates = {i for i, x in enumerate(vector) if x >= M}
    mates.add(node)
    observed = {i: x for i, x in enumerate(vector) if 0 < x < M and i != node}
    return Groups(frozenset(mates), observed)


def mates_of(state: NodeState) -> FrozenSet[int]:
    return extract_groups(state.vector, state.node, state.scale.M).mates
