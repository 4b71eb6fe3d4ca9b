"""Distance-dependent ED and loss model for the simulated broadcast channel."""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from enum import Enum
from typing import Optional, Tuple


class Outcome(Enum):
    RECEIVED = "rx"
    LOST = "loss"
    COLLIDED = "collision"


@dataclass(frozen=True)
class ChannelModel:
    """Log-distance ED with per-packet Gaussian noise and a logistic loss ramp.

    Expected ED at distance ``d``::

        ref_ed + calibration_offset - 10 * path_loss_exponent * log10(max(d, d0) / d0)

    Loss probability is ``loss_floor`` close in, rising along a logistic ramp
    centred on ``loss_ramp_mid_m`` towards 1; nothing is delivered beyond
    ``comm_range_m``.
    """

    ref_ed: float = 28.0
    d0_m: float = 1.0
    path_loss_exponent: float = 1.7
    shadow_sigma: float = 0.75
    comm_range_m: float = 50.0
    calibration_offset: float = 0.0
    loss_floor: float = 0.22
    loss_ramp_mid_m: float = 42.0
    loss_ramp_width_m: float = 3.0
    ed_max: int = 84

    def __post_init__(self):
        if self.d0_m <= 0 or self.comm_range_m <= 0:
            raise ValueError("d0_m and comm_range_m must be positive")
        if self.path_loss_exponent < 0 or self.shadow_sigma < 0:
            raise ValueError("path_loss_exponent and shadow_sigma must be non-negative")
        if not 0.0 <= self.loss_floor <= 1.0:
            raise ValueError("loss_floor must be a probability")
        if self.loss_ramp_width_m <= 0:
            raise ValueError("loss_ramp_width_m must be positive")

    def expected_ed(self, d: float) -> float:
        d = max(d, self.d0_m)
        return (
            self.ref_ed + self.calibration_offset
            - 10.0 * self.path_loss_exponent * math.log10(d / self.d0_m)
        )

    def distance_for_ed(self, ed: float) -> float:
        """Inverse of ``expected_ed`` (the distance where it equals ``ed``)."""
        if self.path_loss_exponent == 0:
            return math.inf if ed <= self.ref_ed + self.calibration_offset else 0.0
        exponent = (self.ref_ed + self.calibration_offset - ed) / (10.0 * self.path_loss_exponent)
        return self.d0_m * 10.0 ** exponent

    def p_loss(self, d: float, extra: float = 0.0) -> float:
        if d > self.comm_range_m:
            return 1.0
        z = (d - self.loss_ramp_mid_m) / self.loss_ramp_width_m
        ramp = 1.0 / (1.0 + math.exp(-z)) if z > -50 else 0.0
        p = self.loss_floor + (1.0 - self.loss_floor) * ramp + extra
        return min(1.0, p)

    def draw_ed(self, d: float, noise: float) -> int:
        """ED reading for a standard-normal ``noise`` draw, as the radio reports it."""
        return self.ed_from_expected(self.expected_ed(d), noise)

    def ed_from_expected(self, expected: float, noise: float) -> int:
        ed = round(expected + self.shadow_sigma * noise)
        return min(self.ed_max, max(0, ed))

    def anchored(self, distance_m: float, ed: float) -> "ChannelModel":
        """Copy whose expected ED equals ``ed`` at ``distance_m``."""
        off = ed - (self.ref_ed - 10.0 * self.path_loss_exponent * math.log10(max(distance_m, self.d0_m) / self.d0_m))
        return replace(self, calibration_offset=off)

    @classmethod
    def lossless(cls, **kw) -> "ChannelModel":
        """No random loss anywhere inside ``comm_range_m`` (collisions still apply)."""
        kw.setdefault("loss_floor", 0.0)
        kw.setdefault("loss_ramp_mid_m", 1e9)
        return cls(**kw)


def resolve(
    channel: ChannelModel,
    collided: bool,
    p_loss: float,
    expected_ed: float,
    u_loss: float,
    noise: float,
) -> Tuple[Outcome, Optional[int]]:
    """Outcome for a pair whose loss probability and mean ED are already known."""
    if collided:
        return Outcome.COLLIDED, None
    if u_loss < p_loss:
        return Outcome.LOST, None
    return Outcome.RECEIVED, channel.ed_from_expected(expected_ed, noise)


def deliver(
    channel: ChannelModel,
    distance: float,
    collided: bool,
    u_loss: float,
    noise: float,
    extra_loss: float = 0.0,
) -> Tuple[Outcome, Optional[int]]:
    """Outcome of one (transmission, receiver) pair.

    ``u_loss`` is a uniform draw in [0, 1) and ``noise`` a standard normal;
    callers own the random stream so runs replay exactly.
    """
    if distance > channel.comm_range_m:
        return Outcome.LOST, None
    return resolve(
        channel, collided, channel.p_loss(distance, extra_loss),
        channel.expected_ed(distance), u_loss, noise,
    )
