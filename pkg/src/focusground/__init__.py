"""Multi-step crop/click GUI grounding: episodes, data synthesis and evaluation."""

from .episode import EpisodeConfig, GroundingSample, Trajectory, run_episode
from .geometry import FrameChain, ImageSize, Point, Region, iou
from .oracle import OracleKnobs, OraclePolicy, World
from .policy import Click, Crop, PromptKind, RemotePolicy, parse_action
from .synthesis import build_dpo, build_multistep, build_sft, collect_failures, dpo_sigmoid_loss, mc_accuracy

__all__ = [
    "Click",
    "Crop",
    "EpisodeConfig",
    "FrameChain",
    "GroundingSample",
    "ImageSize",
    "OracleKnobs",
    "OraclePolicy",
    "Point",
    "PromptKind",
    "Region",
    "RemotePolicy",
    "Trajectory",
    "World",
    "build_dpo",
    "build_multistep",
    "build_sft",
    "collect_failures",
    "dpo_sigmoid_loss",
    "iou",
    "mc_accuracy",
    "parse_action",
    "run_episode",
]

__version__ = "0.1.0"
