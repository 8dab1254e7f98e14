"""Comparison agents sharing the perception agent's control pathway.

Every agent consumes a frame (plus ground truth, which only the oracle may
read) and emits one bearing per step; the harness feeds that bearing to the
same PD controller and camera regardless of the agent, so differences in
outcome are attributable to localization quality alone.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .geometry import rad
from .perception import PerceptionConfig, PerceptionModel, upsample_saliency


@dataclass(frozen=True)
class ActionEstimate:
    bearing: tuple[float, float]        # camera-relative (pan, tilt)
    saliency: np.ndarray | None = None  # frame-resolution confidence map, if the agent has one
    confidence: float | None = None
    loss_global: float = 0.0
    loss_attn: float = 0.0


def random_bearing(rng: np.random.Generator, spread: float) -> tuple[float, float]:
    """Uniform bearing in [-spread, +spread]^2 around the center."""
    return (float(rng.uniform(-spread, spread)), float(rng.uniform(-spread, spread)))


class RandomAgent:
    """Picks a random location around the center of the view every step."""

    def __init__(self, spread: float = rad(30.0)):
        self.spread = spread
        self.rng = None

    def begin_episode(self, scenario, rng: np.random.Generator):
        self.rng = rng

    def act(self, frame, gt) -> ActionEstimate:
        return ActionEstimate(bearing=random_bearing(self.rng, self.spread))


class OracleAgent:
    """Reads the ground-truth action location; bounded only by the actuators."""

    def begin_episode(self, scenario, rng):
        self.scenario = scenario

    def act(self, frame, gt) -> ActionEstimate:
        if gt.polar is not None:
            # express distance on the raster's tilt axis so the shared
            # bearing->polar decoding recovers it exactly
            fov_v = self.scenario.camera.fov.vertical
            tilt = (gt.polar.rho / self.scenario.camera.rho_view - 0.5) * fov_v
            return ActionEstimate(bearing=(gt.polar.theta, tilt))
        return ActionEstimate(bearing=gt.bearing)


class PerceptionAgent:
    """The predictive-learning localizer behind the shared control interface."""

    def __init__(self, cfg: PerceptionConfig):
        self.cfg = cfg
        self.model = None
        self.state = None

    def begin_episode(self, scenario, rng: np.random.Generator):
        seed = int(rng.integers(0, 2**31 - 1))
        self.model = PerceptionModel(replace(self.cfg, fov=scenario.camera.fov, seed=seed))
        self.state = self.model.initial_state()

    def act(self, frame, gt) -> ActionEstimate:
        out, self.state = self.model.perceive_step(frame, self.state)
        sal = upsample_saliency(out.error_map.raw, frame.image.shape[-1])
        return ActionEstimate(bearing=out.action_bearing, saliency=sal,
                              loss_global=out.loss_global, loss_attn=out.loss_attn)


# ---------------------------------------------------------------------------
# template tracker


def ncc_scores(frame: np.ndarray, template: np.ndarray) -> np.ndarray:
    """Normalized cross-correlation of a template over every valid placement.

    Returns a map of correlation coefficients in [-1, 1]; windows or
    templates with (near-)zero variance score 0 there.
    """
    th, tw = template.shape
    windows = np.lib.stride_tricks.sliding_window_view(frame, (th, tw))
    n = th * tw
    t0 = template - template.mean()
    t_ss = float(np.sum(t0 * t0))
    w_mean = windows.mean(axis=(2, 3))
    cross = np.einsum("ijkl,kl->ij", windows, t0, optimize=True)
    w_ss = np.einsum("ijkl,ijkl->ij", windows, windows, optimize=True) - n * w_mean ** 2
    w_ss = np.maximum(w_ss, 0.0)
    denom = np.sqrt(w_ss * t_ss)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.where(denom > 1e-10, cross / denom, 0.0)
    return np.clip(out, -1.0, 1.0)


def brightest_blob(frame: np.ndarray, patch: int) -> tuple[int, int]:
    """Center of the brightest patch-sized region (box-filtered argmax)."""
    k = patch
    csum = np.cumsum(np.cumsum(np.pad(frame, ((1, 0), (1, 0))), axis=0), axis=1)
    sums = (csum[k:, k:] - csum[:-k, k:] - csum[k:, :-k] + csum[:-k, :-k])
    i, j = np.unravel_index(int(np.argmax(sums)), sums.shape)
    return i + k // 2, j + k // 2


@dataclass
class TemplateState:
    template: np.ndarray | None = None
    last_pixel: tuple[int, int] = (0, 0)
    confidence: float = 0.0
    low_conf_steps: int = 0


class TemplateAgent:
    """Single-template NCC tracker standing in for the classic long-term
    tracker family: global correlation search, confidence-gated exponential
    template updates, and brightest-blob reacquisition after a losing streak.
    """

    PATCH = 17
    UPDATE_RATE = 0.1
    CONF_THRESHOLD = 0.5
    REACQUIRE_AFTER = 10

    def __init__(self):
        self.state = TemplateState()
        self.scenario = None

    def begin_episode(self, scenario, rng):
        self.state = TemplateState()
        self.scenario = scenario

    def _extract(self, img: np.ndarray, center: tuple[int, int]) -> np.ndarray:
        h = self.PATCH // 2
        r = min(max(center[0], h), img.shape[0] - 1 - h)
        c = min(max(center[1], h), img.shape[1] - 1 - h)
        return img[r - h:r + h + 1, c - h:c + h + 1].copy()

    def act(self, frame, gt) -> ActionEstimate:
        img = frame.image[0]
        st = self.state
        if st.template is None:
            center = brightest_blob(img, self.PATCH)
            st.template = self._extract(img, center)
            st.last_pixel = center
            st.confidence = 1.0
        else:
            scores = ncc_scores(img, st.template)
            pi, pj = np.unravel_index(int(np.argmax(scores)), scores.shape)
            h = self.PATCH // 2
            st.last_pixel = (int(pi) + h, int(pj) + h)
            st.confidence = float(scores[pi, pj])
            if st.confidence > self.CONF_THRESHOLD:
                patch = self._extract(img, st.last_pixel)
                st.template = (1 - self.UPDATE_RATE) * st.template + self.UPDATE_RATE * patch
                st.low_conf_steps = 0
            else:
                st.low_conf_steps += 1
                if st.low_conf_steps >= self.REACQUIRE_AFTER:
                    center = brightest_blob(img, self.PATCH)
                    st.template = self._extract(img, center)
                    st.last_pixel = center
                    st.low_conf_steps = 0

        n = img.shape[0]
        fov = self.scenario.camera.fov
        pan = ((st.last_pixel[1] + 0.5) / n - 0.5) * fov.horizontal
        tilt = ((st.last_pixel[0] + 0.5) / n - 0.5) * fov.vertical
        return ActionEstimate(bearing=(pan, tilt), confidence=st.confidence)


class ScriptedAgent:
    """Replays a fixed bearing sequence; test and calibration helper."""

    def __init__(self, bearings: list[tuple[float, float]]):
        self.bearings = bearings
        self.i = 0

    def begin_episode(self, scenario, rng):
        self.i = 0

    def act(self, frame, gt) -> ActionEstimate:
        b = self.bearings[min(self.i, len(self.bearings) - 1)]
        self.i += 1
        return ActionEstimate(bearing=b)


AGENT_KINDS = ("ours", "random", "oracle", "template")


def make_agent(kind: str, perception_cfg: PerceptionConfig | None = None,
               random_spread: float = rad(30.0)):
    if kind == "ours":
        return PerceptionAgent(perception_cfg or PerceptionConfig())
    if kind == "random":
        return RandomAgent(spread=random_spread)
    if kind == "oracle":
        return OracleAgent()
    if kind == "template":
        return TemplateAgent()
    raise ValueError(f"unknown agent kind {kind!r}; expected one of {AGENT_KINDS}")
