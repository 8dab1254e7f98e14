"""Reactive PD control: turn a localized target bearing into camera commands.

The command is proportional to the current error plus a backward-difference
derivative term; there is no integral term. The derivative acts as
anticipation, trimming the command while the error is already collapsing.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

from .geometry import wrap_angle

logger = logging.getLogger("avbench")


@dataclass(frozen=True)
class ControllerGains:
    lambda_p: float = 1.0
    lambda_d: float = 0.1

    def __post_init__(self):
        if self.lambda_p < 0 or self.lambda_d < 0:
            raise ValueError("gains must be nonnegative")


@dataclass
class ControllerState:
    prev_error: tuple[float, float] = (0.0, 0.0)
    initialized: bool = False


def control_error(q: tuple[float, float], c: tuple[float, float] = (0.0, 0.0)):
    """Componentwise wrap-aware q - c.

    Perception reports bearings relative to the camera center, so c is
    normally (0, 0) and the error is just the localization bearing.
    """
    return (wrap_angle(q[0] - c[0]), wrap_angle(q[1] - c[1]))


def pd_step(e: tuple[float, float], state: ControllerState,
            gains: ControllerGains, dt: float = 1.0):
    """cmd = lambda_p * e + lambda_d * (e - prev_e) / dt.

    The derivative is zero on the first step. A non-finite error yields a
    zero command and is logged.
    """
    if not all(math.isfinite(v) for v in e):
        logger.warning("non-finite control error %s; emitting zero command", e)
        return (0.0, 0.0), state
    if state.initialized:
        de = ((e[0] - state.prev_error[0]) / dt, (e[1] - state.prev_error[1]) / dt)
    else:
        de = (0.0, 0.0)
    cmd = (gains.lambda_p * e[0] + gains.lambda_d * de[0],
           gains.lambda_p * e[1] + gains.lambda_d * de[1])
    return cmd, ControllerState(prev_error=e, initialized=True)


def follower_map(e: tuple[float, float], state: ControllerState,
                 gains: ControllerGains, dt: float = 1.0):
    """Embodied variant: e = (distance error, bearing error) -> (turn, speed).

    Turn is PD on the bearing error, forward speed is PD on the distance
    error (current distance minus standoff distance), clamped nonnegative.
    """
    (d_dist, d_bear), state = pd_step(e, state, gains, dt)
    return (d_bear, max(0.0, d_dist)), state
