"""Position timelines, beacon sinks and ground-truth groups.

Tracks are waypoint lists ``(t_s, x_m, y_m)`` interpolated piecewise
linearly; positions are held constant outside a track's time span. The
generators model a 1-D road along +x with a compact two-abreast pack and a
small deterministic wobble. No randomness is involved.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from typing import Dict, FrozenSet, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from .consensus import ProximityScale
from .estimator import EstimatorConfig

FORMAT_VERSION = "1.0"
GROUP_RADIUS_M = 20.0
PACK_SPEED = 10.0  # m/s
ROW_GAP = 2.0
LANE_HALF_WIDTH = 0.75

Partition = Tuple[FrozenSet[int], ...]
Waypoint = Tuple[float, float, float]


class ScenarioError(ValueError):
    pass


@dataclass(frozen=True)
class SinkSpec:
    """A beacon emitter riding ``behind_m`` behind the centroid of ``attach``."""

    attach: Tuple[int, ...]
    behind_m: float = 10.0
    phase_ms: float = 0.0
    active_from_s: float = 0.0
    active_until_s: Optional[float] = None

    def active(self, t_s: float) -> bool:
        if t_s < self.active_from_s:
            return False
        return self.active_until_s is None or t_s <= self.active_until_s


@dataclass
class Scenario:
    name: str
    duration_s: float
    tracks: List[List[Waypoint]]
    sinks: List[SinkSpec] = field(default_factory=list)
    estimator: EstimatorConfig = field(default_factory=EstimatorConfig)
    scale: ProximityScale = field(default_factory=ProximityScale)
    config: Dict[str, object] = field(default_factory=dict)  # SimConfig overrides
    description: str = ""

    def __post_init__(self):
        self.validate()

    @property
    def n_nodes(self) -> int:
        return len(self.tracks)

    def validate(self) -> None:
        if self.duration_s <= 0:
            raise ScenarioError("duration_s must be positive")
        if not self.tracks:
            raise ScenarioError("scenario needs at least one node")
        for i, tr in enumerate(self.tracks):
            if not tr:
                raise ScenarioError(f"track {i} is empty")
            ts = [w[0] for w in tr]
            if any(b < a for a, b in zip(ts, ts[1:])):
                raise ScenarioError(f"track {i} waypoints are not time-sorted")
            if ts[-1] > self.duration_s + 1e-9:
                raise ScenarioError(f"track {i} extends past duration_s")
        for k, sink in enumerate(self.sinks):
            if not sink.attach or any(not 0 <= a < self.n_nodes for a in sink.attach):
                raise ScenarioError(f"sink {k} attaches to unknown nodes {sink.attach}")

    # -- geometry -----------------------------------------------------------

    def positions(self, t_s: float | np.ndarray) -> np.ndarray:
        """Node positions, shape ``(n, 2)`` for a scalar time or ``(len(t), n, 2)``."""
        t = np.asarray(t_s, dtype=float)
        out = np.empty(t.shape + (self.n_nodes, 2))
        for i, tr in enumerate(self.tracks):
            arr = np.asarray(tr, dtype=float)
            out[..., i, 0] = np.interp(t, arr[:, 0], arr[:, 1])
            out[..., i, 1] = np.interp(t, arr[:, 0], arr[:, 2])
        return out

    def sink_positions(self, t_s: float | np.ndarray) -> np.ndarray:
        pos = self.positions(t_s)
        t = np.asarray(t_s, dtype=float)
        out = np.empty(t.shape + (len(self.sinks), 2))
        for k, sink in enumerate(self.sinks):
            c = pos[..., list(sink.attach), :].mean(axis=-2)
            out[..., k, 0] = c[..., 0] - sink.behind_m
            out[..., k, 1] = c[..., 1]
        return out

    def is_static(self) -> bool:
        return all(len({(w[1], w[2]) for w in tr}) == 1 for tr in self.tracks)

    def ground_truth(self, t_s: float) -> Partition:
        return partition_within(self.positions(t_s), GROUP_RADIUS_M)

    def truth(self, step_ms: float = 10.0) -> "GroundTruthGroups":
        return GroundTruthGroups.from_scenario(self, step_ms)

    # -- serialization ------------------------------------------------------

    def to_dict(self) -> dict:
        return {
            "format_version": FORMAT_VERSION,
            "name": self.name,
            "description": self.description,
            "duration_s": self.duration_s,
            "n_nodes": self.n_nodes,
            "tracks": [[list(w) for w in tr] for tr in self.tracks],
            "sinks": [
                {**asdict(s), "attach": list(s.attach)} for s in self.sinks
            ],
            "estimator": asdict(self.estimator),
            "consensus": asdict(self.scale),
            "config": dict(self.config),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "Scenario":
        problems = _schema_problems(d)
        if problems:
            raise ScenarioError("; ".join(problems))
        try:
            sinks = [
                SinkSpec(
                    attach=tuple(int(a) for a in s["attach"]),
                    behind_m=float(s.get("behind_m", 10.0)),
                    phase_ms=float(s.get("phase_ms", 0.0)),
                    active_from_s=float(s.get("active_from_s", 0.0)),
                    active_until_s=None if s.get("active_until_s") is None else float(s["active_until_s"]),
                )
                for s in d.get("sinks", [])
            ]
            sc = cls(
                name=str(d.get("name", "unnamed")),
                description=str(d.get("description", "")),
                duration_s=float(d["duration_s"]),
                tracks=[[tuple(float(v) for v in w) for w in tr] for tr in d["tracks"]],
                sinks=sinks,
                estimator=EstimatorConfig(**d.get("estimator", {})),
                scale=ProximityScale(**d.get("consensus", {})),
                config=dict(d.get("config", {})),
            )
        except (TypeError, KeyError, ValueError) as exc:
            raise ScenarioError(str(exc)) from exc
        if "n_nodes" in d and int(d["n_nodes"]) != sc.n_nodes:
            raise ScenarioError(f"n_nodes={d['n_nodes']} but {sc.n_nodes} tracks given")
        return sc

    @classmethod
    def from_json(cls, text: str) -> "Scenario":
        try:
            d = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ScenarioError(f"not valid JSON: {exc}") from exc
        return cls.from_dict(d)

    @classmethod
    def load(cls, path) -> "Scenario":
        with open(path) as fh:
            return cls.from_json(fh.read())


def _schema_problems(d) -> List[str]:
    if not isinstance(d, dict):
        return ["top level must be an object"]
    out = []
    ver = str(d.get("format_version", ""))
    if not ver:
        out.append("missing format_version")
    elif ver.split(".")[0] != FORMAT_VERSION.split(".")[0]:
        out.append(f"unsupported format_version {ver} (reader supports {FORMAT_VERSION})")
    if "duration_s" not in d:
        out.append("missing duration_s")
    tracks = d.get("tracks")
    if not isinstance(tracks, list):
        out.append("tracks must be a list of waypoint lists")
    else:
        for i, tr in enumerate(tracks):
            if not isinstance(tr, list) or not all(isinstance(w, list) and len(w) == 3 for w in tr):
                out.append(f"tracks[{i}] must be a list of [t_s, x_m, y_m]")
    if not isinstance(d.get("sinks", []), list):
        out.append("sinks must be a list")
    return out


# -- ground truth -------------------------------------------------------------


def partition_within(pos: np.ndarray, radius: float) -> Partition:
    """Transitive closure of the pairwise ``distance <= radius`` relation."""
    n = len(pos)
    parent = list(range(n))

    def find(a):
        while parent[a] != a:
            parent[a] = parent[parent[a]]
            a = parent[a]
        return a

    d = np.hypot(*(pos[:, None, :] - pos[None, :, :]).transpose(2, 0, 1))
    for i, j in zip(*np.nonzero(np.triu(d <= radius, 1))):
        ri, rj = find(int(i)), find(int(j))
        if ri != rj:
            parent[max(ri, rj)] = min(ri, rj)
    groups: Dict[int, set] = {}
    for i in range(n):
        groups.setdefault(find(i), set()).add(i)
    return canonical(groups.values())


def canonical(groups: Iterable[Iterable[int]]) -> Partition:
    return tuple(sorted((frozenset(g) for g in groups), key=min))


@dataclass
class GroundTruthGroups:
    """Piecewise-constant partition over time: ``changes[k] = (t_ms, partition)``."""

    changes: List[Tuple[float, Partition]]

    @classmethod
    def static(cls, partition: Iterable[Iterable[int]]) -> "GroundTruthGroups":
        return cls([(0.0, canonical(partition))])

    @classmethod
    def from_scenario(cls, sc: Scenario, step_ms: float = 10.0) -> "GroundTruthGroups":
        if sc.is_static():
            return cls.static(sc.ground_truth(0.0))
        times = np.arange(0.0, sc.duration_s * 1000.0 + step_ms / 2, step_ms)
        pos = sc.positions(times / 1000.0)
        changes: List[Tuple[float, Partition]] = []
        prev = None
        for t, p in zip(times, pos):
            part = partition_within(p, GROUP_RADIUS_M)
            if part != prev:
                changes.append((float(t), part))
                prev = part
        return cls(changes)

    def at(self, t_ms: float) -> Partition:
        cur = self.changes[0][1]
        for t, part in self.changes:
            if t > t_ms:
                break
            cur = part
        return cur

    def events(self) -> List[Tuple[float, Partition, Partition]]:
        return [
            (t, old, new)
            for (_, old), (t, new) in zip(self.changes, self.changes[1:])
        ]


def component_map(part: Partition) -> Dict[int, FrozenSet[int]]:
    return {v: g for g in part for v in g}


def classify_event(old: Partition, new: Partition) -> str:
    if len(new) > len(old):
        return "breakaway" if any(len(g) == 1 for g in new if g not in old) else "split"
    if len(new) < len(old):
        return "merge"
    return "regroup"


# -- generators ---------------------------------------------------------------


def _slot(i: int) -> Tuple[float, float]:
    """Two-abreast formation slot relative to the pack head."""
    return -ROW_GAP * (i // 2), (LANE_HALF_WIDTH if i % 2 else -LANE_HALF_WIDTH)


def _wobble(i: int, t: float) -> Tuple[float, float]:
    # small deterministic jitter so relative distances vary
    return (
        0.4 * math.sin(0.7 * t + 1.3 * i),
        0.25 * math.sin(0.45 * t + 2.1 * i),
    )


def _pack_track(
    i: int,
    duration: float,
    offset_fn=lambda t: (0.0, 0.0),
    breakpoints: Sequence[float] = (),
    step: float = 1.0,
) -> List[Waypoint]:
    times = sorted(
        {round(k * step, 6) for k in range(int(duration / step) + 1)}
        | {float(b) for b in breakpoints if 0 <= b <= duration}
        | {float(duration)}
    )
    sx, sy = _slot(i)
    out = []
    for t in times:
        wx, wy = _wobble(i, t)
        ox, oy = offset_fn(t)
        out.append((t, PACK_SPEED * t + sx + wx + ox, sy + wy + oy))
    return out


def make_static(
    n: int,
    spacing: float,
    with_sink: bool = True,
    duration_s: float = 60.0,
    loss_floor: Optional[float] = 0.0,
) -> Scenario:
    """Nodes at rest on a line, ``spacing`` metres apart (a bench test).

    A bench has no motion and no bodies in the way, so by default the
    scenario overrides the channel's background loss to ``loss_floor``
    (``None`` keeps the channel default).
    """
    if n < 1:
        raise ScenarioError("n must be >= 1")
    if spacing < 0:
        raise ScenarioError("spacing must be non-negative")
    tracks = [[(0.0, i * spacing, 0.0)] for i in range(n)]
    sinks = [SinkSpec(attach=tuple(range(n)))] if with_sink else []
    config = {} if loss_floor is None else {"channel.loss_floor": loss_floor}
    return Scenario(
        name="static", duration_s=duration_s, tracks=tracks, sinks=sinks, config=config,
        description=f"{n} static nodes on a line, {spacing} m apart",
    )


def make_stable_pack(n: int = 10, duration_s: float = 120.0) -> Scenario:
    if n < 1:
        raise ScenarioError("n must be >= 1")
    tracks = [_pack_track(i, duration_s) for i in range(n)]
    return Scenario(
        name="stable_pack", duration_s=duration_s, tracks=tracks,
        sinks=[SinkSpec(attach=tuple(range(n)))],
        description=f"{n} riders in one pack at {PACK_SPEED} m/s",
    )


def make_breakaway(
    n: int = 10,
    t_leave: float = 10.0,
    t_rejoin: float = 50.0,
    v_gap: float = 4.0,
    duration_s: float = 60.0,
    rider: int = 3,
) -> Scenario:
    """One rider accelerates away by ``v_gap`` m/s, then falls back into the pack.

    The rider's lead over its slot grows linearly until the midpoint of
    ``[t_leave, t_rejoin]`` and shrinks back to zero at ``t_rejoin``.
    """
    if not 0 <= t_leave < t_rejoin < duration_s:
        raise ScenarioError("need 0 <= t_leave < t_rejoin < duration_s")
    if not 0 <= rider < n or n < 2:
        raise ScenarioError(f"rider {rider} invalid for n={n}")
    if v_gap < 0:
        raise ScenarioError("v_gap must be non-negative")
    t_mid = 0.5 * (t_leave + t_rejoin)
    # the rider also moves one lane outward so it can pass the front row
    lateral = 1.5 if rider % 2 else -1.5

    def lead(t):
        if t <= t_leave or t >= t_rejoin:
            return 0.0, 0.0
        if t <= t_mid:
            return v_gap * (t - t_leave), lateral
        return v_gap * (t_rejoin - t), lateral

    tracks = []
    for i in range(n):
        if i == rider:
            tracks.append(_pack_track(i, duration_s, lead, (t_leave, t_mid, t_rejoin), step=1.0))
        else:
            tracks.append(_pack_track(i, duration_s))
    pack = tuple(i for i in range(n) if i != rider)
    return Scenario(
        name="breakaway", duration_s=duration_s, tracks=tracks,
        sinks=[SinkSpec(attach=pack)],
        description=f"rider {rider} breaks away at {t_leave}s (+{v_gap} m/s) and rejoins by {t_rejoin}s",
    )


def make_pack_split(
    n: int = 10,
    t_split: float = 10.0,
    sizes: Tuple[int, int] = (6, 4),
    v_gap: float = 4.0,
    duration_s: float = 40.0,
) -> Scenario:
    """The front ``sizes[0]`` riders pull away from the rear ``sizes[1]``."""
    a, b = sizes
    if a < 1 or b < 1 or a + b != n:
        raise ScenarioError(f"sizes {sizes} must be positive and sum to n={n}")
    if t_split < 0:
        raise ScenarioError("t_split must be non-negative")
    half = v_gap / 2

    def drift(sign):
        return lambda t: (sign * half * max(0.0, t - t_split), 0.0)

    tracks = [
        _pack_track(i, duration_s, drift(+1 if i < a else -1), (t_split,))
        for i in range(n)
    ]
    front, rear = tuple(range(a)), tuple(range(a, n))
    return Scenario(
        name="pack_split", duration_s=duration_s, tracks=tracks,
        sinks=[SinkSpec(attach=front), SinkSpec(attach=rear)],
        description=f"pack of {n} splits into {a}+{b} at {t_split}s",
    )


def make_merge(
    n: int = 10,
    t_merge: float = 20.0,
    sizes: Tuple[int, int] = (6, 4),
    v_gap: float = 4.0,
    duration_s: float = 40.0,
    beacons_after_merge: bool = False,
) -> Scenario:
    """Two groups close a gap at ``v_gap`` m/s and ride together from ``t_merge``.

    With ``beacons_after_merge=False`` both sinks go silent once the gap is
    within ``GROUP_RADIUS_M`` of closing, i.e. before the groups merge, so
    unification has to happen without any reset.
    """
    a, b = sizes
    if a < 1 or b < 1 or a + b != n:
        raise ScenarioError(f"sizes {sizes} must be positive and sum to n={n}")
    if not 0 < t_merge < duration_s:
        raise ScenarioError("need 0 < t_merge < duration_s")
    if v_gap <= 0:
        raise ScenarioError("v_gap must be positive")

    def behind(t):
        return (-v_gap * max(0.0, t_merge - t), 0.0)

    tracks = [
        _pack_track(i, duration_s, behind if i >= a else (lambda t: (0.0, 0.0)), (t_merge,))
        for i in range(n)
    ]
    until = None if beacons_after_merge else max(0.0, t_merge - GROUP_RADIUS_M / v_gap)
    front, rear = tuple(range(a)), tuple(range(a, n))
    return Scenario(
        name="merge", duration_s=duration_s, tracks=tracks,
        sinks=[SinkSpec(attach=front, active_until_s=until), SinkSpec(attach=rear, active_until_s=until)],
        description=f"groups of {a} and {b} merge at {t_merge}s",
    )


def make_random_geometric(n: int, side_m: float, seed: int, duration_s: float = 8.0) -> Scenario:
    """Static nodes placed uniformly in a ``side_m`` square, no sinks."""
    if n < 1:
        raise ScenarioError("n must be >= 1")
    rng = np.random.default_rng(seed)
    xy = rng.uniform(0.0, side_m, size=(n, 2))
    tracks = [[(0.0, float(x), float(y))] for x, y in xy]
    return Scenario(
        name="random_geometric", duration_s=duration_s, tracks=tracks,
        description=f"{n} nodes uniform in a {side_m} m square (seed {seed})",
    )


BUILTIN = {
    "static": lambda: make_static(10, 0.5),
    "stable_pack": make_stable_pack,
    "breakaway": make_breakaway,
    "pack_split": make_pack_split,
    "merge": make_merge,
}
