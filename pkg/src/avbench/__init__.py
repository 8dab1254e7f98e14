"""avbench: a desk-scale active-vision test bench.

A self-supervised perception module localizes the dominant action in a
streaming view by where its own next-frame predictions fail, and a reactive
PD controller steers a simulated pan-tilt or follower camera to keep that
action in view. Ships with a deterministic 2D simulator, baseline agents,
and a full tracking/saliency metric suite.
"""

__version__ = "0.1.0"

from .geometry import FieldOfView, PolarOffset, angular_distance, wrap_angle  # noqa: F401
from .metrics import (TrackingQualityParams, auc_judd, average_angular_error,  # noqa: F401
                      episode_metrics, tracking_quality)
from .perception import PerceptionConfig, PerceptionModel  # noqa: F401
from .world import Scenario, bundled_scenario, load_scenario  # noqa: F401
from .harness import RunConfig, run_ablation, run_episode, run_suite  # noqa: F401
