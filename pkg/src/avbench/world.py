"""Deterministic 2D world: moving actors, occluders, events, and an active camera.

Two scenario modes share one core:

* ``pan_tilt`` — the scene is a flat plane subtending a fixed angular span
  (default 164 deg per axis); the camera crops a 90 deg window out of it, so
  roughly 30% of the scene is visible at a time. Camera state is (pan, tilt).
* ``follower`` — an embodied agent with a position and heading renders an
  egocentric polar raster: image columns are bearing across the FOV, image
  rows are distance out to ``rho_view``. Commands are (turn, forward speed).

Rendering is implicit: every pixel is mapped to a world point and painted,
which makes frames exactly reproducible from (scenario, step, camera, seed).
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace

import numpy as np

from .geometry import FieldOfView, PolarOffset, rad, wrap_angle

IMAGE_SIZE = 112
BACKGROUND = 0.10
OUTSIDE_SCENE = 0.02

_MODES = ("pan_tilt", "follower")
_ROLES = ("dominant", "distractor")
_EVENT_KINDS = ("lighting", "distractor_spawn")


@dataclass(frozen=True)
class ActorSpec:
    waypoints: list  # [(step, (x, y)), ...] strictly increasing in step
    intensity: float = 0.9
    texture: int = 0
    radius: float = 18.0
    role: str = "dominant"


@dataclass(frozen=True)
class Occluder:
    lo: tuple[float, float]
    hi: tuple[float, float]
    intensity: float = 0.35


@dataclass(frozen=True)
class Event:
    step: int
    kind: str
    scale: float | None = None       # lighting
    actor: ActorSpec | None = None   # distractor_spawn


@dataclass(frozen=True)
class CameraSpec:
    fov: FieldOfView
    rate_limit: float = rad(4.0)       # pan_tilt: rad/step per axis; follower: turn limit
    travel_limit: float = rad(37.0)    # pan_tilt only, symmetric per axis
    max_speed: float = 10.0            # follower only, world units/step
    inertia: float = 0.0               # first-order actuator memory, 0 = none
    start: tuple = (0.0, 0.0)          # (pan, tilt) or (x, y, heading)
    rho_view: float = 500.0            # follower raster depth


@dataclass(frozen=True)
class Scenario:
    name: str
    mode: str
    duration: int
    seed: int
    scene_size: float
    camera: CameraSpec
    actors: list
    occluders: list = field(default_factory=list)
    events: list = field(default_factory=list)
    span: float = rad(164.0)           # pan_tilt: angular extent of the scene plane
    ideal_distance: float = 250.0      # follower: target standoff distance
    image_size: int = IMAGE_SIZE
    noise_sigma: float = 0.02


@dataclass(frozen=True)
class CameraState:
    mode: str
    fov: FieldOfView
    pan: float = 0.0
    tilt: float = 0.0
    x: float = 0.0
    y: float = 0.0
    heading: float = 0.0
    vel: tuple[float, float] = (0.0, 0.0)

    def center_bearing(self) -> tuple[float, float]:
        return (self.pan, self.tilt)


@dataclass(frozen=True)
class WorldState:
    step: int
    positions: tuple          # world (x, y) per live actor, parallel to actors()
    velocities: tuple
    lighting: float
    noise_seed: int


@dataclass(frozen=True)
class ObservationFrame:
    image: np.ndarray         # (1, H, W) grayscale in [0, 1]
    step: int
    camera: CameraState


@dataclass(frozen=True)
class GroundTruth:
    bearing: tuple[float, float]      # absolute (pan, tilt); follower: (theta, rho-as-tilt n/a)
    polar: PolarOffset | None         # follower only
    visible: bool
    position: tuple[float, float]


class ScenarioError(ValueError):
    pass


# ---------------------------------------------------------------------------
# scenario loading


def _require(d: dict, key: str, path: str):
    if key not in d:
        raise ScenarioError(f"{path}.{key}: missing required field")
    return d[key]


def _reject_unknown(d: dict, allowed: set, path: str):
    for k in d:
        if k not in allowed:
            raise ScenarioError(f"{path}.{k}: unknown field")


def _parse_actor(d: dict, path: str, scene_size: float) -> ActorSpec:
    _reject_unknown(d, {"waypoints", "intensity", "texture", "radius", "role"}, path)
    wps_raw = _require(d, "waypoints", path)
    if not wps_raw:
        raise ScenarioError(f"{path}.waypoints: must not be empty")
    wps = []
    prev = -1
    for n, wp in enumerate(wps_raw):
        step, pos = int(wp[0]), (float(wp[1][0]), float(wp[1][1]))
        if step <= prev:
            raise ScenarioError(f"{path}.waypoints[{n}]: steps must be strictly increasing")
        if not (0.0 <= pos[0] <= scene_size and 0.0 <= pos[1] <= scene_size):
            raise ScenarioError(f"{path}.waypoints[{n}]: position {pos} outside scene")
        prev = step
        wps.append((step, pos))
    role = d.get("role", "dominant")
    if role not in _ROLES:
        raise ScenarioError(f"{path}.role: must be one of {_ROLES}")
    return ActorSpec(waypoints=wps, intensity=float(d.get("intensity", 0.9)),
                     texture=int(d.get("texture", 0)), radius=float(d.get("radius", 18.0)),
                     role=role)


def parse_scenario(doc: dict, name_hint: str = "scenario") -> Scenario:
    top = {"schema_version", "name", "mode", "duration", "seed", "scene_size",
           "span_deg", "ideal_distance", "image_size", "noise_sigma",
           "camera", "actors", "occluders", "events", "allow_long_duration"}
    _reject_unknown(doc, top, name_hint)
    version = _require(doc, "schema_version", name_hint)
    if version != 1:
        raise ScenarioError(f"{name_hint}.schema_version: unsupported version {version}")
    mode = _require(doc, "mode", name_hint)
    if mode not in _MODES:
        raise ScenarioError(f"{name_hint}.mode: must be one of {_MODES}")
    duration = int(_require(doc, "duration", name_hint))
    if duration > 500 and not doc.get("allow_long_duration", False):
        raise ScenarioError(f"{name_hint}.duration: {duration} > 500 "
                            "(set allow_long_duration to override)")
    scene_size = float(_require(doc, "scene_size", name_hint))

    cam_d = _require(doc, "camera", name_hint)
    _reject_unknown(cam_d, {"fov_deg", "rate_limit_deg", "travel_limit_deg",
                            "max_speed", "inertia", "start", "start_deg",
                            "rho_view"}, f"{name_hint}.camera")
    fov_deg = cam_d.get("fov_deg", 90.0)
    fov = (FieldOfView.from_degrees(fov_deg[0], fov_deg[1])
           if isinstance(fov_deg, (list, tuple)) else FieldOfView.from_degrees(fov_deg))
    if mode == "pan_tilt":
        start_deg = cam_d.get("start_deg", [0.0, 0.0])
        start = (rad(start_deg[0]), rad(start_deg[1]))
    else:
        sx, sy, hdeg = cam_d.get("start", [scene_size / 2, scene_size / 2, 0.0])
        start = (float(sx), float(sy), rad(hdeg))
    camera = CameraSpec(
        fov=fov,
        rate_limit=rad(cam_d.get("rate_limit_deg", 4.0)),
        travel_limit=rad(cam_d.get("travel_limit_deg", 37.0)),
        max_speed=float(cam_d.get("max_speed", 10.0)),
        inertia=float(cam_d.get("inertia", 0.0)),
        start=start,
        rho_view=float(cam_d.get("rho_view", 500.0)),
    )

    actors = [_parse_actor(a, f"{name_hint}.actors[{i}]", scene_size)
              for i, a in enumerate(doc.get("actors", []))]

    occluders = []
    for i, o in enumerate(doc.get("occluders", [])):
        _reject_unknown(o, {"lo", "hi", "intensity"}, f"{name_hint}.occluders[{i}]")
        occluders.append(Occluder(lo=tuple(map(float, _require(o, "lo", f"{name_hint}.occluders[{i}]"))),
                                  hi=tuple(map(float, _require(o, "hi", f"{name_hint}.occluders[{i}]"))),
                                  intensity=float(o.get("intensity", 0.35))))

    events = []
    for i, e in enumerate(doc.get("events", [])):
        path = f"{name_hint}.events[{i}]"
        _reject_unknown(e, {"step", "kind", "scale", "actor"}, path)
        kind = _require(e, "kind", path)
        if kind not in _EVENT_KINDS:
            raise ScenarioError(f"{path}.kind: must be one of {_EVENT_KINDS}")
        actor = _parse_actor(e["actor"], f"{path}.actor", scene_size) if "actor" in e else None
        if kind == "distractor_spawn" and actor is None:
            raise ScenarioError(f"{path}.actor: required for distractor_spawn")
        events.append(Event(step=int(_require(e, "step", path)), kind=kind,
                            scale=float(e.get("scale", 1.0)), actor=actor))

    scenario = Scenario(
        name=doc.get("name", name_hint), mode=mode, duration=duration,
        seed=int(_require(doc, "seed", name_hint)), scene_size=scene_size,
        camera=camera, actors=actors, occluders=occluders, events=events,
        span=rad(doc.get("span_deg", 164.0)),
        ideal_distance=float(doc.get("ideal_distance", 250.0)),
        image_size=int(doc.get("image_size", IMAGE_SIZE)),
        noise_sigma=float(doc.get("noise_sigma", 0.02)),
    )
    if not any(a.role == "dominant" for a in scenario.actors):
        raise ScenarioError(f"{name_hint}.actors: at least one dominant actor required")
    return scenario


def load_scenario(path: str) -> Scenario:
    with open(path, "r", encoding="utf-8") as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as e:
            raise ScenarioError(f"{path}: invalid JSON ({e})") from e
    return parse_scenario(doc, name_hint=str(path))


def bundled_scenario(name: str) -> Scenario:
    """Load one of the scenarios shipped with the package."""
    from importlib import resources
    ref = resources.files("avbench").joinpath(f"scenarios/{name}.json")
    if not ref.is_file():
        available = sorted(p.name[:-5] for p in resources.files("avbench")
                           .joinpath("scenarios").iterdir() if p.name.endswith(".json"))
        raise ScenarioError(f"no bundled scenario {name!r}; available: {available}")
    return parse_scenario(json.loads(ref.read_text()), name_hint=name)


# ---------------------------------------------------------------------------
# world dynamics


def _interp_position(waypoints, step: int) -> tuple[float, float]:
    if step <= waypoints[0][0]:
        return waypoints[0][1]
    for (s0, p0), (s1, p1) in zip(waypoints, waypoints[1:]):
        if step <= s1:
            f = (step - s0) / (s1 - s0)
            return (p0[0] + f * (p1[0] - p0[0]), p0[1] + f * (p1[1] - p0[1]))
    return waypoints[-1][1]


def live_actors(s: Scenario, step: int) -> list[ActorSpec]:
    """Scenario actors plus any event-spawned ones active at this step."""
    spawned = [e.actor for e in s.events
               if e.kind == "distractor_spawn" and e.step <= step]
    return list(s.actors) + spawned


def world_at(s: Scenario, step: int, noise_seed: int) -> WorldState:
    actors = live_actors(s, step)
    pos = tuple(_interp_position(a.waypoints, step) for a in actors)
    if step > 0:
        # actors only ever get appended by spawn events, so the previous
        # step's list is a prefix of the current one
        n_prev = len(live_actors(s, step - 1))
        vel = tuple((p[0] - q[0], p[1] - q[1]) if i < n_prev else (0.0, 0.0)
                    for i, (a, p, q) in enumerate(
                        zip(actors, pos,
                            (_interp_position(a.waypoints, step - 1) for a in actors))))
    else:
        vel = tuple((0.0, 0.0) for _ in actors)
    lighting = 1.0
    for e in s.events:
        if e.kind == "lighting" and e.step <= step:
            lighting = e.scale
    return WorldState(step=step, positions=pos, velocities=vel,
                      lighting=lighting, noise_seed=noise_seed)


def init_world(s: Scenario, noise_seed: int | None = None) -> WorldState:
    return world_at(s, 0, s.seed if noise_seed is None else noise_seed)


def step_world(s: Scenario, w: WorldState) -> WorldState:
    if w.step >= s.duration:
        raise ValueError(f"cannot step past scenario duration {s.duration}")
    return world_at(s, w.step + 1, w.noise_seed)


def init_camera(s: Scenario) -> CameraState:
    if s.mode == "pan_tilt":
        pan, tilt = s.camera.start
        return CameraState(mode="pan_tilt", fov=s.camera.fov, pan=pan, tilt=tilt)
    x, y, heading = s.camera.start
    return CameraState(mode="follower", fov=s.camera.fov, x=x, y=y, heading=heading)


# ---------------------------------------------------------------------------
# projections


def scene_to_bearing(s: Scenario, point: tuple[float, float]) -> tuple[float, float]:
    """Pan-tilt mode: absolute bearing of a scene-plane point."""
    return ((point[0] / s.scene_size - 0.5) * s.span,
            (point[1] / s.scene_size - 0.5) * s.span)


def polar_of(cam: CameraState, point: tuple[float, float]) -> PolarOffset:
    """Follower mode: distance and heading-relative bearing of a world point."""
    dx, dy = point[0] - cam.x, point[1] - cam.y
    return PolarOffset(rho=math.hypot(dx, dy),
                       theta=wrap_angle(math.atan2(dy, dx) - cam.heading))


def polar_from_bearing(s: Scenario, bearing: tuple[float, float]) -> PolarOffset:
    """Follower mode: invert the raster mapping from a (pan, tilt) estimate.

    The pan axis is the heading-relative bearing; the tilt axis spans the
    raster depth, so tilt -fov/2 is distance 0 and +fov/2 is rho_view.
    """
    pan, tilt = bearing
    frac = tilt / s.camera.fov.vertical + 0.5
    return PolarOffset(rho=max(frac, 0.0) * s.camera.rho_view, theta=pan)


def bearing_to_pixel(s: Scenario, cam: CameraState,
                     bearing: tuple[float, float]) -> tuple[int, int] | None:
    """Frame pixel (row, col) of an absolute pan-tilt bearing; None if outside."""
    dpan = wrap_angle(bearing[0] - cam.pan)
    dtilt = wrap_angle(bearing[1] - cam.tilt)
    if abs(dpan) > cam.fov.horizontal / 2 or abs(dtilt) > cam.fov.vertical / 2:
        return None
    n = s.image_size
    col = min(int((dpan / cam.fov.horizontal + 0.5) * n), n - 1)
    row = min(int((dtilt / cam.fov.vertical + 0.5) * n), n - 1)
    return row, col


def polar_to_pixel(s: Scenario, polar: PolarOffset) -> tuple[int, int] | None:
    """Frame pixel (row, col) of a follower polar offset; None if outside."""
    if abs(polar.theta) > s.camera.fov.horizontal / 2 or polar.rho > s.camera.rho_view:
        return None
    n = s.image_size
    col = min(int((polar.theta / s.camera.fov.horizontal + 0.5) * n), n - 1)
    row = min(int((polar.rho / s.camera.rho_view) * n), n - 1)
    return row, col


def _segment_hits_rect(p: tuple[float, float], q: tuple[float, float],
                       occ: Occluder) -> bool:
    """Liang-Barsky clip: does segment p->q pass through the rectangle?"""
    t0, t1 = 0.0, 1.0
    dx, dy = q[0] - p[0], q[1] - p[1]
    for d, lo, hi, o in ((dx, occ.lo[0], occ.hi[0], p[0]),
                         (dy, occ.lo[1], occ.hi[1], p[1])):
        if abs(d) < 1e-12:
            if o < lo or o > hi:
                return False
        else:
            ta, tb = (lo - o) / d, (hi - o) / d
            if ta > tb:
                ta, tb = tb, ta
            t0, t1 = max(t0, ta), min(t1, tb)
            if t0 > t1:
                return False
    return True


def _point_in_rect(p: tuple[float, float], occ: Occluder) -> bool:
    return occ.lo[0] <= p[0] <= occ.hi[0] and occ.lo[1] <= p[1] <= occ.hi[1]


def _occluded_follower(s: Scenario, cam: CameraState, point) -> bool:
    return any(_segment_hits_rect((cam.x, cam.y), point, o) for o in s.occluders)


def _occluded_pan_tilt(s: Scenario, point) -> bool:
    return any(_point_in_rect(point, o) for o in s.occluders)


# ---------------------------------------------------------------------------
# rendering


def _texture_mult(tex: int, wx, wy, ax: float, ay: float, radius: float):
    if tex == 0:
        return 1.0
    if tex == 1:  # bright core, darker rim
        d = np.sqrt((wx - ax) ** 2 + (wy - ay) ** 2)
        return 1.0 - 0.4 * np.minimum(d / radius, 1.0)
    if tex == 2:  # stripes riding along with the actor
        return 0.75 + 0.25 * np.sin((wx - ax) * (2.0 * math.pi / max(radius, 1e-6)))
    # checkerboard
    cell = max(radius / 2.0, 1e-6)
    par = (np.floor((wx - ax) / cell) + np.floor((wy - ay) / cell)) % 2
    return 0.7 + 0.3 * par


def _pixel_world_points(s: Scenario, cam: CameraState):
    n = s.image_size
    idx = (np.arange(n) + 0.5) / n - 0.5
    if cam.mode == "pan_tilt":
        pan = cam.pan + idx * cam.fov.horizontal      # columns
        tilt = cam.tilt + idx * cam.fov.vertical      # rows
        wx = (pan / s.span + 0.5) * s.scene_size
        wy = (tilt / s.span + 0.5) * s.scene_size
        return np.broadcast_to(wx, (n, n)), np.broadcast_to(wy[:, None], (n, n))
    theta = idx * cam.fov.horizontal                  # columns
    rho = ((np.arange(n) + 0.5) / n) * s.camera.rho_view  # rows
    ang = cam.heading + theta
    wx = cam.x + rho[:, None] * np.cos(ang)[None, :]
    wy = cam.y + rho[:, None] * np.sin(ang)[None, :]
    return wx, wy


def render(s: Scenario, w: WorldState, cam: CameraState) -> ObservationFrame:
    """Rasterize what the camera sees; deterministic for (scenario, step, cam)."""
    wx, wy = _pixel_world_points(s, cam)
    inside = ((wx >= 0) & (wx <= s.scene_size) & (wy >= 0) & (wy <= s.scene_size))
    img = np.where(inside, BACKGROUND, OUTSIDE_SCENE)

    actors = live_actors(s, w.step)
    if cam.mode == "follower":
        # floor occluders first, visible actors painted over them
        for occ in s.occluders:
            mask = ((wx >= occ.lo[0]) & (wx <= occ.hi[0]) &
                    (wy >= occ.lo[1]) & (wy <= occ.hi[1]))
            img = np.where(mask, occ.intensity, img)
        for a, pos in zip(actors, w.positions):
            if _occluded_follower(s, cam, pos):
                continue
            mask = (wx - pos[0]) ** 2 + (wy - pos[1]) ** 2 <= a.radius ** 2
            if mask.any():
                img = np.where(mask, a.intensity * _texture_mult(a.texture, wx, wy,
                                                                 pos[0], pos[1], a.radius), img)
    else:
        for a, pos in zip(actors, w.positions):
            mask = (wx - pos[0]) ** 2 + (wy - pos[1]) ** 2 <= a.radius ** 2
            if mask.any():
                img = np.where(mask, a.intensity * _texture_mult(a.texture, wx, wy,
                                                                 pos[0], pos[1], a.radius), img)
        # screen occluders sit on top of the plane
        for occ in s.occluders:
            mask = ((wx >= occ.lo[0]) & (wx <= occ.hi[0]) &
                    (wy >= occ.lo[1]) & (wy <= occ.hi[1]))
            img = np.where(mask, occ.intensity, img)

    img = img * w.lighting
    if s.noise_sigma > 0:
        rng = np.random.default_rng([w.noise_seed, w.step])
        img = img + rng.normal(0.0, s.noise_sigma, img.shape)
    img = np.clip(img, 0.0, 1.0)
    return ObservationFrame(image=img[None, :, :], step=w.step, camera=cam)


# ---------------------------------------------------------------------------
# ground truth


def dominant_indices(s: Scenario, step: int) -> list[int]:
    return [i for i, a in enumerate(live_actors(s, step)) if a.role == "dominant"]


def ground_truth(s: Scenario, w: WorldState, cam: CameraState) -> GroundTruth:
    """Offset of the dominant actor nearest the camera's current center."""
    idxs = dominant_indices(s, w.step)
    if not idxs:
        raise ValueError("scenario has no dominant actor")
    if cam.mode == "pan_tilt":
        best, best_d = None, math.inf
        for i in idxs:
            b = scene_to_bearing(s, w.positions[i])
            d = math.hypot(wrap_angle(b[0] - cam.pan), wrap_angle(b[1] - cam.tilt))
            if d < best_d:
                best, best_d = i, d
        pos = w.positions[best]
        b = scene_to_bearing(s, pos)
        visible = (abs(wrap_angle(b[0] - cam.pan)) <= cam.fov.horizontal / 2
                   and abs(wrap_angle(b[1] - cam.tilt)) <= cam.fov.vertical / 2
                   and not _occluded_pan_tilt(s, pos))
        return GroundTruth(bearing=b, polar=None, visible=visible, position=pos)
    best, best_p = None, None
    for i in idxs:
        p = polar_of(cam, w.positions[i])
        if best_p is None or p.rho < best_p.rho:
            best, best_p = i, p
    pos = w.positions[best]
    visible = (abs(best_p.theta) <= cam.fov.horizontal / 2
               and best_p.rho <= s.camera.rho_view
               and not _occluded_follower(s, cam, pos))
    return GroundTruth(bearing=(best_p.theta, 0.0), polar=best_p,
                       visible=visible, position=pos)


def dominant_positions(s: Scenario, w: WorldState) -> list[tuple[float, float]]:
    return [w.positions[i] for i in dominant_indices(s, w.step)]


# ---------------------------------------------------------------------------
# actuation


def _toward(value: float, target_abs: float) -> float:
    return max(-target_abs, min(target_abs, value))


def apply_command(s: Scenario, cam: CameraState,
                  cmd: tuple[float, float]) -> CameraState:
    """Advance the camera by a command, honoring rate, travel and inertia limits.

    ``cmd`` is (dpan, dtilt) in pan-tilt mode and (turn, forward speed) in
    follower mode. With inertia mu the actuator blends the clamped command
    into a velocity state, modeling a servo that cannot change speed
    instantly; mu = 0 reduces to direct rate-limited motion.
    """
    a, b = float(cmd[0]), float(cmd[1])
    if not (math.isfinite(a) and math.isfinite(b)):
        a, b = 0.0, 0.0
    mu = s.camera.inertia
    if cam.mode == "pan_tilt":
        ca = _toward(a, s.camera.rate_limit)
        cb = _toward(b, s.camera.rate_limit)
        va = mu * cam.vel[0] + (1.0 - mu) * ca
        vb = mu * cam.vel[1] + (1.0 - mu) * cb
        lim = s.camera.travel_limit
        pan = max(-lim, min(lim, cam.pan + va))
        tilt = max(-lim, min(lim, cam.tilt + vb))
        return replace(cam, pan=pan, tilt=tilt, vel=(pan - cam.pan, tilt - cam.tilt))
    turn = _toward(a, s.camera.rate_limit)
    speed = max(0.0, min(b, s.camera.max_speed))
    vt = mu * cam.vel[0] + (1.0 - mu) * turn
    vs = mu * cam.vel[1] + (1.0 - mu) * speed
    heading = wrap_angle(cam.heading + vt)
    x = min(max(cam.x + vs * math.cos(heading), 0.0), s.scene_size)
    y = min(max(cam.y + vs * math.sin(heading), 0.0), s.scene_size)
    return replace(cam, x=x, y=y, heading=heading, vel=(vt, vs))


# ---------------------------------------------------------------------------
# debug frame dump


def write_pgm(frame: ObservationFrame, path: str) -> None:
    """Binary portable graymap (P5), 8-bit."""
    img = frame.image[0]
    data = np.clip(img * 255.0, 0, 255).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P5\n{img.shape[1]} {img.shape[0]}\n255\n".encode())
        fh.write(data.tobytes())
