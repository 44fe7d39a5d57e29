"""Event-camera grasping pipelines on a deterministic synthetic sensor.

Two pipelines are provided: a model-based one (multi-view depth from corner
events, point-cloud clustering, similarity registration to a unit cube and a
position-based servo target) and a model-free one (spatio-temporal mean-shift
segmentation, event-surface corner tracking, velocity servoing and a PCA
grasp plan).
"""

from evgrasp.events import (
    CameraModel,
    Event,
    EventStream,
    Pose,
    Scene,
    Box,
    Trajectory,
    project_point,
)

__all__ = [
    "Box",
    "CameraModel",
    "Event",
    "EventStream",
    "Pose",
    "Scene",
    "Trajectory",
    "project_point",
]

__version__ = "0.1.0"
