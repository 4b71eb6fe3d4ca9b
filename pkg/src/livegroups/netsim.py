"""Discrete-event broadcast channel driving the consensus nodes.

Medium access is random backoff with carrier sensing and no
acknowledgements: each node draws ``T_max`` uniform in ``(0, backoff_ms]``,
counts it down only while the channel is sensed idle, processes whatever it
receives meanwhile, and broadcasts ``{k_v, B^v}`` when the countdown hits 0.
Sinks broadcast an epoch beacon every ``epoch_period_ms`` (deferring while
the channel is busy).

Carrier sensing is ideal within ``comm_range_m`` and instantaneous. Two
transmissions overlapping at a receiver destroy each other there; senders
out of each other's range can still collide at a common receiver.
"""

from __future__ import annotations

import heapq
from dataclasses import asdict, dataclass, field, fields, replace
from enum import IntEnum
from typing import Dict, List, Optional, Tuple

import numpy as np

from .channel import ChannelModel, Outcome, resolve
from .consensus import BeaconPacket, DataPacket, NodeState, handle_beacon, handle_data_packet, mgmc_init
from .estimator import LinkSample, LinkState
from .scenario import Scenario, SinkSpec
from .trace import TraceRecord


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class SimConfig:
    seed: int = 0
    backoff_ms: float = 70.0
    epoch_period_ms: float = 400.0
    airtime_ms: float = 4.0
    payload_loss_extra: float = 0.0
    mobility_step_ms: float = 50.0
    channel: ChannelModel = field(default_factory=ChannelModel)
    n_nodes: Optional[int] = None  # checked against the scenario when set

    def __post_init__(self):
        if not 0 <= self.seed < 2**64:
            raise ConfigError("seed must fit in 64 unsigned bits")
        if self.backoff_ms <= 0:
            raise ConfigError("backoff_ms must be positive")
        if self.epoch_period_ms <= self.backoff_ms:
            raise ConfigError("epoch_period_ms must exceed backoff_ms")
        if self.airtime_ms <= 0 or self.mobility_step_ms <= 0:
            raise ConfigError("airtime_ms and mobility_step_ms must be positive")
        if not 0.0 <= self.payload_loss_extra <= 1.0:
            raise ConfigError("payload_loss_extra must be a probability")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SimConfig":
        d = dict(d)
        ch = d.pop("channel", None)
        cfg = cls(**d) if ch is None else cls(channel=ChannelModel(**ch), **d)
        return cfg


def _coerce(old, text):
    if isinstance(old, bool):
        return str(text).lower() in ("1", "true", "yes")
    if isinstance(old, int) and not isinstance(old, bool):
        return int(text)
    if isinstance(old, float):
        return float(text)
    if old is None:
        return None if str(text).lower() in ("", "none", "null") else int(text)
    return text


def apply_overrides(config: SimConfig, scenario: Scenario, overrides: Dict[str, object]) -> Tuple[SimConfig, Scenario]:
    """Apply ``key=value`` overrides.

    Keys are SimConfig field names, ``channel.<field>``, ``estimator.<field>``
    or ``consensus.<field>``.
    """
    cfg_kw: Dict[str, object] = {}
    ch_kw: Dict[str, object] = {}
    est_kw: Dict[str, object] = {}
    con_kw: Dict[str, object] = {}
    targets = {
        "channel": (config.channel, ch_kw),
        "estimator": (scenario.estimator, est_kw),
        "consensus": (scenario.scale, con_kw),
    }
    names = {f.name for f in fields(SimConfig)}
    for key, value in overrides.items():
        if "." in key:
            group, name = key.split(".", 1)
            if group not in targets:
                raise ConfigError(f"unknown override group {group!r}")
            obj, kw = targets[group]
            if name not in {f.name for f in fields(obj)}:
                raise ConfigError(f"unknown override {key!r}")
            kw[name] = _coerce(getattr(obj, name), value)
        elif key in names and key != "channel":
            cfg_kw[key] = _coerce(getattr(config, key), value)
        else:
            raise ConfigError(f"unknown override {key!r}")
    try:
        config = replace(config, channel=replace(config.channel, **ch_kw), **cfg_kw)
        scenario = replace(
            scenario,
            estimator=replace(scenario.estimator, **est_kw),
            scale=replace(scenario.scale, **con_kw),
        )
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc
    return config, scenario


class EventKind(IntEnum):
    """Event kinds; the value is the tie-break order at equal times."""

    DELIVERY = 0
    BEACON = 1
    BACKOFF = 2
    REFRESH = 3


class _Stream:
    """Buffered scalar draws from one numpy generator."""

    __slots__ = ("_draw", "_buf", "_i")

    def __init__(self, draw):
        self._draw = draw
        self._buf = draw(4096).tolist()
        self._i = 0

    def next(self) -> float:
        i = self._i
        if i == len(self._buf):
            self._buf = self._draw(4096).tolist()
            i = 0
        self._i = i + 1
        return self._buf[i]


class _Tx:
    __slots__ = ("sender", "start", "packet", "tick", "receptions", "sensed")

    def __init__(self, sender, start, packet, tick):
        self.sender = sender
        self.start = start
        self.packet = packet
        self.tick = tick
        self.receptions: List[list] = []  # [receiver, corrupted]
        self.sensed: List[int] = []


@dataclass
class SimTrace:
    records: List[TraceRecord]
    scenario: Scenario
    config: SimConfig
    final_states: List[NodeState]
    final_levels: List[Dict[int, int]]

    @property
    def n_nodes(self) -> int:
        return self.scenario.n_nodes

    @property
    def duration_ms(self) -> float:
        return self.scenario.duration_s * 1000.0

    def meta(self) -> Dict[str, object]:
        return {
            "n_nodes": self.n_nodes,
            "n_sinks": len(self.scenario.sinks),
            "M": self.scenario.scale.M,
            "mate_threshold": self.scenario.scale.mate_threshold,
            "epoch_period_ms": self.config.epoch_period_ms,
            "duration_ms": self.duration_ms,
            "seed": self.config.seed,
        }


_IDLE, _BACKOFF, _FROZEN, _TX = range(4)


class Simulator:
    def __init__(self, config: SimConfig, scenario: Scenario):
        if config.n_nodes is not None and config.n_nodes != scenario.n_nodes:
            raise ConfigError(f"config n_nodes={config.n_nodes} but scenario has {scenario.n_nodes}")
        self.cfg = config
        self.sc = scenario
        self.n = scenario.n_nodes
        self.n_radios = self.n + len(scenario.sinks)
        ss = np.random.SeedSequence(config.seed)
        g_backoff, g_loss, g_noise, g_phase = (np.random.Generator(np.random.PCG64(s)) for s in ss.spawn(4))
        self._backoff = _Stream(g_backoff.random)
        self._loss = _Stream(g_loss.random)
        self._noise = _Stream(g_noise.standard_normal)
        self._phases = g_phase.uniform(0.0, scenario.estimator.dt1_ms, size=self.n).tolist()
        self.states = [mgmc_init(v, self.n, scenario.scale) for v in range(self.n)]
        self.links = [LinkState(scenario.estimator) for _ in range(self.n)]
        self._static = scenario.is_static()
        self._ticks: Dict[int, tuple] = {}
        self._tick_positions()

    # -- geometry -------------------------------------------------------------

    def _tick_positions(self):
        step = self.cfg.mobility_step_ms
        if self._static:
            times = np.zeros(1)
        else:
            times = np.arange(0.0, self.sc.duration_s * 1000.0 + step, step)
        pos = self.sc.positions(times / 1000.0)
        if self.sc.sinks:
            pos = np.concatenate([pos, self.sc.sink_positions(times / 1000.0)], axis=1)
        diff = pos[:, :, None, :] - pos[:, None, :, :]
        self._dist = np.hypot(diff[..., 0], diff[..., 1])

    def _tick(self, t: float) -> tuple:
        idx = 0 if self._static else min(int(t // self.cfg.mobility_step_ms), len(self._dist) - 1)
        got = self._ticks.get(idx)
        if got is None:
            ch = self.cfg.channel
            d = self._dist[idx]
            dist = d.tolist()
            nbrs = [
                [r for r in range(self.n_radios) if r != s and dist[s][r] <= ch.comm_range_m]
                for s in range(self.n_radios)
            ]
            extra = self.cfg.payload_loss_extra
            ploss = [[ch.p_loss(x, extra) for x in row] for row in dist]
            ed = [[ch.expected_ed(x) for x in row] for row in dist]
            got = self._ticks[idx] = (dist, nbrs, ploss, ed)
            if not self._static and len(self._ticks) > 64:
                self._ticks.pop(next(iter(self._ticks)))
        return got

    # -- main loop ------------------------------------------------------------

    def run(self) -> SimTrace:
        n, R = self.n, self.n_radios
        cfg, sc = self.cfg, self.sc
        ch = cfg.channel
        end = sc.duration_s * 1000.0
        T = cfg.backoff_ms
        air = cfg.airtime_ms
        dt1 = sc.estimator.dt1_ms
        period = cfg.epoch_period_ms
        records: List[TraceRecord] = []
        rec = records.append
        heap: list = []
        seq = 0

        mode = [_IDLE] * R
        busy = [0] * R
        remaining = [0.0] * R
        deadline = [0.0] * R
        version = [0] * R
        rx_active: List[List[list]] = [[] for _ in range(R)]
        pending_beacon: List[Optional[int]] = [None] * R
        refresh_count = [0] * n
        states = self.states
        links = self.links
        backoff = self._backoff
        loss_u = self._loss
        noise = self._noise

        def push(t, kind, radio, arg=None):
            nonlocal seq
            heapq.heappush(heap, (t, kind, radio, seq, arg))
            seq += 1

        def draw_backoff():
            return T * (1.0 - backoff.next())  # (0, T]

        for v in range(n):
            b = draw_backoff()
            mode[v] = _BACKOFF
            deadline[v] = b
            push(b, EventKind.BACKOFF, v, version[v])
            push(self._phases[v], EventKind.REFRESH, v)
        for k, sink in enumerate(sc.sinks):
            t0 = sink.phase_ms + period
            if t0 <= end:
                push(t0, EventKind.BEACON, n + k, (1, True))

        def start_tx(s, t, packet):
            tick = self._tick(t)
            tx = _Tx(s, t, packet, tick)
            mode[s] = _TX
            if rx_active[s]:
                for r_ in rx_active[s]:
                    r_[1] = True
            for r in tick[1][s]:
                if r < n:
                    corrupted = mode[r] == _TX
                    act = rx_active[r]
                    if act:
                        corrupted = True
                        for other in act:
                            other[1] = True
                    entry = [r, corrupted]
                    act.append(entry)
                    tx.receptions.append(entry)
                tx.sensed.append(r)
                busy[r] += 1
                if busy[r] == 1 and mode[r] == _BACKOFF:
                    remaining[r] = deadline[r] - t
                    mode[r] = _FROZEN
                    version[r] += 1
            push(t + air, EventKind.DELIVERY, s, tx)
            return tx

        while heap:
            t, kind, radio, _, arg = heapq.heappop(heap)
            if t > end:
                break
            tr = round(t, 3)
            if kind == EventKind.BACKOFF:
                if arg != version[radio] or mode[radio] != _BACKOFF:
                    continue
                st = states[radio]
                pkt = DataPacket(radio, st.epoch, st.vector)
                rec(TraceRecord(tr, "tx", radio, None, st.epoch, None, None, st.vector, None))
                start_tx(radio, t, pkt)
            elif kind == EventKind.DELIVERY:
                tx = arg
                s = tx.sender
                _, _, ploss, eds = tx.tick
                pkt = tx.packet
                is_beacon = isinstance(pkt, BeaconPacket)
                for entry in tx.receptions:
                    r, corrupted = entry
                    act = rx_active[r]
                    for i_, e_ in enumerate(act):
                        if e_ is entry:
                            del act[i_]
                            break
                    outcome, ed = resolve(ch, corrupted, ploss[s][r], eds[s][r], loss_u.next(), noise.next())
                    if outcome is not Outcome.RECEIVED:
                        rec(TraceRecord(tr, outcome.value, r, s, pkt.epoch, None, None, None,
                                        False if corrupted else None))
                        continue
                    old = states[r]
                    if is_beacon:
                        rec(TraceRecord(tr, "beacon_rx", r, s, pkt.epoch, ed, None, None, True))
                        new = handle_beacon(old, pkt)
                    else:
                        links[r].ingest_sample(LinkSample(s, ed, t))
                        rec(TraceRecord(tr, "rx", r, s, pkt.epoch, ed, None, pkt.vector, True))
                        new = handle_data_packet(old, pkt, links[r].proxim(s))
                    if new.epoch != old.epoch:
                        rec(TraceRecord(tr, "epoch_change", r, s, new.epoch, None, None, None, None))
                    states[r] = new
                for r in tx.sensed:
                    busy[r] -= 1
                    if busy[r] == 0:
                        if mode[r] == _FROZEN:
                            mode[r] = _BACKOFF
                            deadline[r] = t + remaining[r]
                            push(deadline[r], EventKind.BACKOFF, r, version[r])
                        elif pending_beacon[r] is not None:
                            push(t, EventKind.BEACON, r, (pending_beacon[r], False))
                            pending_beacon[r] = None
                if s < n:
                    b = draw_backoff()
                    if busy[s] == 0:
                        mode[s] = _BACKOFF
                        deadline[s] = t + b
                        version[s] += 1
                        push(deadline[s], EventKind.BACKOFF, s, version[s])
                    else:
                        mode[s] = _FROZEN
                        remaining[s] = b
                        version[s] += 1
                else:
                    mode[s] = _IDLE
                    if pending_beacon[s] is not None and busy[s] == 0:
                        push(t, EventKind.BEACON, s, (pending_beacon[s], False))
                        pending_beacon[s] = None
            elif kind == EventKind.BEACON:
                K, periodic = arg
                sink = sc.sinks[radio - n]
                if periodic:
                    K = emit_beacon(sink, t, period).epoch
                    nxt = sink.phase_ms + (K + 1) * period
                    if nxt <= end:
                        push(nxt, EventKind.BEACON, radio, (K + 1, True))
                if not sink.active(t / 1000.0):
                    continue
                if busy[radio] > 0 or mode[radio] == _TX:
                    pending_beacon[radio] = K
                    continue
                rec(TraceRecord(tr, "beacon_tx", radio, None, K, None, None, None, None))
                start_tx(radio, t, BeaconPacket(K))
            else:  # REFRESH
                for nb, _old, new in links[radio].refresh(t):
                    rec(TraceRecord(tr, "level_change", radio, nb, None, None, new, None, None))
                refresh_count[radio] += 1
                push(self._phases[radio] + refresh_count[radio] * dt1, EventKind.REFRESH, radio)

        return SimTrace(
            records=records,
            scenario=sc,
            config=cfg,
            final_states=list(states),
            final_levels=[lk.levels() for lk in links],
        )


def emit_beacon(sink: SinkSpec, now: float, epoch_period_ms: float) -> BeaconPacket:
    """Beacon a sink sends at ``now``: epoch ``(now - phase) / period``."""
    k = round((now - sink.phase_ms) / epoch_period_ms)
    if k < 0 or abs(sink.phase_ms + k * epoch_period_ms - now) > 1e-6:
        raise ValueError(f"{now} ms is not a beacon instant for phase {sink.phase_ms}, period {epoch_period_ms}")
    return BeaconPacket(k)


def run(config: SimConfig, scenario: Scenario) -> SimTrace:
    return Simulator(config, scenario).run()
