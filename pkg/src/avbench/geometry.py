"""Angular and polar arithmetic shared by the simulator, controller and metrics.

All angles are radians internally; helpers taking/returning degrees say so in
their names. Wrapping convention is (-pi, pi].
"""

from __future__ import annotations

import math
from dataclasses import dataclass

TWO_PI = 2.0 * math.pi


def wrap_angle(a: float) -> float:
    """Normalize an angle to (-pi, pi]. Idempotent."""
    a = math.fmod(a, TWO_PI)
    if a <= -math.pi:
        a += TWO_PI
    elif a > math.pi:
        a -= TWO_PI
    return a


def angular_distance(a: float, b: float) -> float:
    """Wrap-aware |a - b|, always in [0, pi]."""
    return abs(wrap_angle(a - b))


def angular_diff(a: float, b: float) -> float:
    """Signed shortest rotation from b to a, in (-pi, pi]."""
    return wrap_angle(a - b)


def deg(rad: float) -> float:
    return math.degrees(rad)


def rad(deg_: float) -> float:
    return math.radians(deg_)


@dataclass(frozen=True)
class PolarOffset:
    """Target offset relative to an agent: distance and bearing off the forward axis."""

    rho: float
    theta: float

    def __post_init__(self):
        if self.rho < 0:
            raise ValueError(f"rho must be >= 0, got {self.rho}")


@dataclass(frozen=True)
class FieldOfView:
    """Angular extent of the camera window, radians per axis."""

    horizontal: float
    vertical: float

    def __post_init__(self):
        for name, span in (("horizontal", self.horizontal), ("vertical", self.vertical)):
            if not 0.0 < span <= math.pi:
                raise ValueError(f"FOV {name} span must be in (0, pi], got {span}")

    @staticmethod
    def from_degrees(h: float, v: float | None = None) -> "FieldOfView":
        return FieldOfView(rad(h), rad(v if v is not None else h))


def grid_cell_to_bearing(cell: tuple[int, int], grid: tuple[int, int],
                         fov: FieldOfView) -> tuple[float, float]:
    """Map a grid cell to a (pan, tilt) bearing relative to the camera center.

    Cell-center convention: cell (i, j) of an HxW grid maps its center
    ((j+0.5)/W, (i+0.5)/H) linearly onto the FOV, so the middle of the grid
    is (0, 0). Row index i drives tilt, column index j drives pan.
    """
    i, j = cell
    h, w = grid
    if not (0 <= i < h and 0 <= j < w):
        raise ValueError(f"cell {cell} outside grid {grid}")
    pan = ((j + 0.5) / w - 0.5) * fov.horizontal
    tilt = ((i + 0.5) / h - 0.5) * fov.vertical
    return pan, tilt


def bearing_to_grid_cell(bearing: tuple[float, float], grid: tuple[int, int],
                         fov: FieldOfView) -> tuple[int, int]:
    """Inverse of grid_cell_to_bearing, clamped to grid bounds."""
    pan, tilt = bearing
    h, w = grid
    j = int((pan / fov.horizontal + 0.5) * w)
    i = int((tilt / fov.vertical + 0.5) * h)
    return min(max(i, 0), h - 1), min(max(j, 0), w - 1)
