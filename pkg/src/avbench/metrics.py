"""Evaluation metrics: per-step tracking quality, episode recall/precision,
average angular error, and AUC-Judd saliency scoring.

Tracking quality of a step is

    gamma = 1 - lambda*|rho1 - rho2|/rho_max - lambda*|theta1 - theta2|/theta_max

clamped to [-1, 1]. The mean of gamma over the steps an episode survived is
its precision; the survived fraction of the step budget is its recall. A step
counts as lost when the raw (pre-clamp) value is <= -1.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .geometry import PolarOffset, angular_distance, rad


@dataclass(frozen=True)
class TrackingQualityParams:
    rho_max: float = 250.0
    theta_max: float = rad(90.0)
    lam: float = 1.0
    relaxed_distance: bool = False

    def __post_init__(self):
        if self.rho_max <= 0 or self.theta_max <= 0 or self.lam <= 0:
            raise ValueError("tracking quality parameters must be positive")


@dataclass(frozen=True)
class StepRecord:
    step: int
    gamma: float
    gamma_raw: float
    lost: bool
    aae_deg: float
    camera_bearing: tuple[float, float]
    action_bearing: tuple[float, float]
    gamma_relaxed: float = 0.0
    auc: float | None = None


@dataclass(frozen=True)
class EpisodeMetrics:
    recall: float
    precision: float
    precision_relaxed: float
    steps_survived: int
    aae_mean: float
    auc_judd: float


def tracking_quality_raw(cur: PolarOffset, ideal: PolarOffset,
                         p: TrackingQualityParams) -> float:
    """Unclamped gamma; <= -1 means the target is lost."""
    if p.relaxed_distance:
        rho_term = p.lam * (0.0 if abs(cur.rho - ideal.rho) / p.rho_max <= 1.0 else 1.0)
    else:
        rho_term = p.lam * abs(cur.rho - ideal.rho) / p.rho_max
    theta_term = p.lam * angular_distance(cur.theta, ideal.theta) / p.theta_max
    return 1.0 - rho_term - theta_term


def tracking_quality(cur: PolarOffset, ideal: PolarOffset,
                     p: TrackingQualityParams) -> float:
    return float(np.clip(tracking_quality_raw(cur, ideal, p), -1.0, 1.0))


def episode_metrics(records: list[StepRecord], max_steps: int = 500) -> EpisodeMetrics:
    """Aggregate per-step records (already truncated at termination)."""
    if not records:
        return EpisodeMetrics(0.0, 0.0, 0.0, 0, 0.0, 0.0)
    survived = len(records)
    gammas = [r.gamma for r in records]
    relaxed = [r.gamma_relaxed for r in records]
    aaes = [r.aae_deg for r in records]
    aucs = [r.auc for r in records if r.auc is not None]
    return EpisodeMetrics(
        recall=survived / max_steps,
        precision=float(np.mean(gammas)),
        precision_relaxed=float(np.mean(relaxed)),
        steps_survived=survived,
        aae_mean=float(np.mean(aaes)),
        auc_judd=float(np.mean(aucs)) if aucs else 0.5,
    )


def average_angular_error(pred: list[tuple[float, float]],
                          gt: list[tuple[float, float]]) -> float:
    """Mean wrap-aware angular distance between two bearing series, degrees.

    Each bearing is (pan, tilt); the per-step distance is the hypot of the
    wrapped componentwise differences.
    """
    if len(pred) != len(gt):
        raise ValueError(f"series length mismatch: {len(pred)} vs {len(gt)}")
    total = 0.0
    for (p0, t0), (p1, t1) in zip(pred, gt):
        total += math.hypot(angular_distance(p0, p1), angular_distance(t0, t1))
    return math.degrees(total / len(pred))


def auc_judd(saliency: np.ndarray, fixations: list[tuple[int, int]]) -> float:
    """ROC area of a saliency map against fixation points.

    Thresholds are the saliency values at the fixations. For each threshold,
    TPR is the fraction of fixations at or above it and FPR the fraction of
    non-fixation pixels at or above it; the area comes from trapezoidal
    integration with (0,0) and (1,1) anchors. A constant map scores 0.5 by
    convention (chance).
    """
    sal = np.asarray(saliency, dtype=np.float64)
    if not fixations:
        raise ValueError("need at least one fixation")
    h, w = sal.shape
    for (i, j) in fixations:
        if not (0 <= i < h and 0 <= j < w):
            raise ValueError(f"fixation {(i, j)} outside map {sal.shape}")
    if np.all(sal == sal.flat[0]):
        return 0.5

    fix_mask = np.zeros(sal.shape, dtype=bool)
    for (i, j) in fixations:
        fix_mask[i, j] = True
    fix_vals = sal[fix_mask]
    other_vals = sal[~fix_mask]
    n_fix = fix_vals.size
    n_other = other_vals.size

    thresholds = np.unique(fix_vals)[::-1]  # descending
    tprs = [0.0]
    fprs = [0.0]
    for t in thresholds:
        tprs.append(float(np.count_nonzero(fix_vals >= t)) / n_fix)
        fprs.append(float(np.count_nonzero(other_vals >= t)) / max(n_other, 1))
    tprs.append(1.0)
    fprs.append(1.0)
    return float(np.trapezoid(tprs, fprs))


def gaussian_bump(shape: tuple[int, int], center: tuple[int, int],
                  sigma: float = 8.0) -> np.ndarray:
    """Point-prediction saliency: an isotropic Gaussian at the predicted pixel.

    Used to score agents that emit a single gaze location rather than a map.
    """
    h, w = shape
    ii, jj = np.mgrid[0:h, 0:w]
    d2 = (ii - center[0]) ** 2 + (jj - center[1]) ** 2
    return np.exp(-d2 / (2.0 * sigma * sigma))


@dataclass
class TerminationRule:
    """Stop after `window` consecutive lost steps or at the step budget."""

    window: int = 10
    max_steps: int = 500
    consecutive_lost: int = 0
    steps: int = 0

    def update(self, lost: bool) -> bool:
        """Record one step; returns True when the episode must end."""
        self.steps += 1
        self.consecutive_lost = self.consecutive_lost + 1 if lost else 0
        return self.consecutive_lost >= self.window or self.steps >= self.max_steps


def summarize(values: list[float]) -> tuple[float, float]:
    arr = np.asarray(values, dtype=np.float64)
    return float(arr.mean()), float(arr.std())
