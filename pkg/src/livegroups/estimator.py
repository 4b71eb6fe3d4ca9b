"""Per-neighbour link quality from energy-detection (ED) readings.

Raw ED samples are smoothed by two averages and quantized into a proximity
level:

* short average: mean of the last ``W1`` raw samples, recomputed every ``dt1``;
* long average: mean of the last ``W2`` short averages, recomputed every ``dt2``;
* combined statistic: ``min(short, long)``, so a transient spike never raises
  the level while a real drop shows up as soon as the short average sees it.

Levels, for the default ``M=3``::

    3  combined >= th20      (close: within the 20 m class)
    2  combined >= th30      (within the 30 m class)
    1  heard within the expiry horizon, weaker than th30
    0  never heard, or silent for longer than the expiry horizon
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass
from typing import Deque, Dict, List, NamedTuple, Optional, Tuple

_EPS = 1e-6  # ms; absorbs float drift in host refresh times


@dataclass(frozen=True)
class EstimatorConfig:
    W1: int = 10
    W2: int = 5
    dt1_ms: float = 1000.0
    dt2_ms: float = 1000.0
    th20: float = 8.0
    th30: float = 5.0
    expiry_ms: float = 3000.0
    M: int = 3

    def __post_init__(self):
        if self.W1 < 1 or self.W2 < 1:
            raise ValueError("window lengths must be >= 1")
        if not self.th20 > self.th30 > 0:
            raise ValueError(f"need th20 > th30 > 0, got {self.th20}, {self.th30}")
        if self.dt1_ms <= 0 or self.dt2_ms <= 0 or self.expiry_ms <= 0:
            raise ValueError("refresh periods and expiry must be positive")
        if self.M < 3:
            raise ValueError("the two-threshold quantizer needs M >= 3")

    def quantize(self, combined: float) -> int:
        if combined >= self.th20:
            return self.M
        if combined >= self.th30:
            return self.M - 1
        return 1


class LinkSample(NamedTuple):
    neighbor: int
    ed: int
    timestamp: float  # ms


class _Link:
    __slots__ = ("raw", "shorts", "short_avg", "long_avg", "level", "last_heard")

    def __init__(self, cfg: EstimatorConfig):
        self.raw: Deque[int] = deque(maxlen=cfg.W1)
        self.shorts: Deque[float] = deque(maxlen=cfg.W2)
        self.short_avg: Optional[float] = None
        self.long_avg: Optional[float] = None
        self.level = 0
        self.last_heard: Optional[float] = None


class LinkState:
    """Estimator state of one node over all the neighbours it has heard.

    Owned by a single driver: ``ingest_sample`` and ``refresh`` must be
    called from the same logical timeline.
    """

    def __init__(self, cfg: EstimatorConfig | None = None):
        self.cfg = cfg or EstimatorConfig()
        self.links: Dict[int, _Link] = {}
        self._last_short: Optional[float] = None
        self._last_long: Optional[float] = None

    def ingest_sample(self, s: LinkSample) -> "LinkState":
        link = self.links.get(s.neighbor)
        if link is None:
            link = self.links[s.neighbor] = _Link(self.cfg)
        link.raw.append(s.ed)
        link.last_heard = s.timestamp
        return self

    def refresh(self, now: float) -> List[Tuple[int, int, int]]:
        """Recompute the averages that are due and requantize.

        Returns ``(neighbor, old_level, new_level)`` for every level change.
        """
        cfg = self.cfg
        do_short = self._last_short is None or now - self._last_short >= cfg.dt1_ms - _EPS
        do_long = self._last_long is None or now - self._last_long >= cfg.dt2_ms - _EPS
        if not (do_short or do_long):
            return []
        if do_short:
            self._last_short = now
        if do_long:
            self._last_long = now
        changes = []
        for nb, link in self.links.items():
            if link.last_heard is None or now - link.last_heard > cfg.expiry_ms:
                if link.raw:
                    link.raw.clear()
                    link.shorts.clear()
                    link.short_avg = link.long_avg = None
                new = 0
            else:
                if do_short and link.raw:
                    link.short_avg = sum(link.raw) / len(link.raw)
                    link.shorts.append(link.short_avg)
                if do_long and link.shorts:
                    link.long_avg = sum(link.shorts) / len(link.shorts)
                if link.short_avg is None:
                    new = link.level
                else:
                    combined = link.short_avg
                    if link.long_avg is not None and link.long_avg < combined:
                        combined = link.long_avg
                    new = cfg.quantize(combined)
            if new != link.level:
                changes.append((nb, link.level, new))
                link.level = new
        return changes

    def proxim(self, neighbor: int) -> int:
        link = self.links.get(neighbor)
        return 0 if link is None else link.level

    def levels(self) -> Dict[int, int]:
        return {nb: link.level for nb, link in self.links.items()}


def ingest_sample(state: LinkState, s: LinkSample) -> LinkState:
    return state.ingest_sample(s)


def refresh(state: LinkState, now: float) -> LinkState:
    state.refresh(now)
    return state


def proxim(state: LinkState, neighbor: int) -> int:
    return state.proxim(neighbor)
