"""Pre-attention token pruning for a miniature alternating-attention transformer."""

from .backbone import Backbone, BackboneConfig
from .harness import ExperimentConfig
from .router import RoutingPlan, route
from .scenes import ClipSample, generate_clip
from .training import Pipeline

__all__ = ["Backbone", "BackboneConfig", "ClipSample", "ExperimentConfig", "Pipeline",
           "RoutingPlan", "generate_clip", "route"]
