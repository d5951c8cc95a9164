"""Multi-step crop/click perception episodes.

Each step shows the policy only the current view and the instruction, with
no dialogue history. Crops push a new frame onto the chain; the last step
in the budget always uses the click prompt so every episode ends in a
judgeable click (or a recorded failure).
"""

from __future__ import annotations

import enum
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Iterable, Optional, Sequence

from ._seeding import derive_seed
from .geometry import (
    FrameChain,
    GeometryError,
    ImageSize,
    Point,
    Region,
    contains_point,
    contains_region,
    resize_for_pixel_budget,
    to_root_frame,
)
from .policy import (
    Action,
    Click,
    Crop,
    Decoding,
    KindMismatch,
    Policy,
    PolicyError,
    PolicyRequest,
    PromptKind,
    View,
    clamp_point,
    format_action,
    parse_action,
)

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class GroundingSample:
    id: str
    image: Optional[str]
    size: ImageSize
    instruction: str
    gt_bbox: Region
    gt_click: Optional[Point] = None
    domain: str = "default"
    element_type: str = "text"
    step_hint: Optional[int] = None


class StopReason(str, enum.Enum):
    CLICKED = "clicked"
    MAX_STEPS = "max_steps"
    POLICY_ERROR = "policy_error"


@dataclass(frozen=True)
class TrajectoryStep:
    chain: FrameChain
    presented_size: ImageSize
    action: Action
    cot: Optional[str] = None

    def to_dict(self) -> dict:
        return {
            "frame_chain": self.chain.to_dict(),
            "presented_size": self.presented_size.as_list(),
            "action": format_action(self.action),
            "cot": self.cot,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TrajectoryStep":
        presented = ImageSize(*d["presented_size"])
        text = d["action"]
        kind = PromptKind.CLICK if text.lower().startswith("click") else PromptKind.CROP
        return cls(
            chain=FrameChain.from_dict(d["frame_chain"]),
            presented_size=presented,
            action=parse_action(text, kind, presented),
            cot=d.get("cot"),
        )


@dataclass
class Trajectory:
    sample_id: str
    steps: list[TrajectoryStep] = field(default_factory=list)
    final_click_root: Optional[Point] = None
    correct: bool = False
    stop_reason: StopReason = StopReason.MAX_STEPS
    rollout: int = 0
    error: Optional[str] = None

    @property
    def crop_count(self) -> int:
        return sum(isinstance(s.action, Crop) for s in self.steps)

    def final_view(self) -> Optional[FrameChain]:
        """Frame chain of the view the decision was made in."""
        return self.steps[-1].chain if self.steps else None

    def to_dict(self) -> dict:
        return {
            "sample_id": self.sample_id,
            "rollout": self.rollout,
            "steps": [s.to_dict() for s in self.steps],
            "final_click_root": self.final_click_root.as_list() if self.final_click_root else None,
            "correct": self.correct,
            "stop_reason": self.stop_reason.value,
            "error": self.error,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Trajectory":
        click = d.get("final_click_root")
        return cls(
            sample_id=d["sample_id"],
            steps=[TrajectoryStep.from_dict(s) for s in d["steps"]],
            final_click_root=Point(*click) if click else None,
            correct=bool(d["correct"]),
            stop_reason=StopReason(d["stop_reason"]),
            rollout=d.get("rollout", 0),
            error=d.get("error"),
        )


@dataclass(frozen=True)
class EpisodeConfig:
    max_steps: int = 2
    min_pixels: int = 3136
    max_pixels: int = 2_408_448
    decoding: Decoding = Decoding()
    allow_early_click: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.max_steps < 1:
            raise ValueError("max_steps must be >= 1")
        if not 0 < self.min_pixels <= self.max_pixels:
            raise ValueError("need 0 < min_pixels <= max_pixels")


def root_chain(sample: GroundingSample, cfg: EpisodeConfig) -> FrameChain:
    presented, _ = resize_for_pixel_budget(sample.size, cfg.min_pixels, cfg.max_pixels)
    return FrameChain.for_root(sample.size, presented)


def push_crop(chain: FrameChain, crop: Region, cfg: EpisodeConfig) -> FrameChain:
    presented, _ = resize_for_pixel_budget(crop.size, cfg.min_pixels, cfg.max_pixels)
    return chain.push(crop, presented)


def is_click_correct(click_root: Point, sample: GroundingSample) -> bool:
    return contains_point(sample.gt_bbox, click_root)


def click_to_root(chain: FrameChain, click: Point, size: ImageSize) -> Point:
    return clamp_point(to_root_frame(chain, click, size), size)


def step_seed(cfg: EpisodeConfig, sample_id: str, rollout: int, depth: int) -> int:
    return derive_seed(cfg.seed, sample_id, rollout, depth)


def run_episode(
    policy: Policy,
    sample: GroundingSample,
    cfg: EpisodeConfig,
    *,
    rollout: int = 0,
    start: Optional[FrameChain] = None,
    prefix: Sequence[TrajectoryStep] = (),
) -> Trajectory:
    """Run one crop* -> click episode.

    ``start`` resumes from an existing crop chain, treating its innermost
    view as the new original image; ``prefix`` steps (already taken to reach
    ``start``) are copied into the returned trajectory. ``cfg.max_steps``
    counts the steps taken in this call, the final click included.
    """
    chain = start if start is not None else root_chain(sample, cfg)
    traj = Trajectory(sample.id, steps=list(prefix), rollout=rollout)
    for step in range(cfg.max_steps):
        last = step == cfg.max_steps - 1
        kind = PromptKind.CLICK if last else PromptKind.CROP
        presented = chain.view_size(sample.size)
        decoding = replace(cfg.decoding, seed=step_seed(cfg, sample.id, rollout, len(chain.crops)))
        request = PolicyRequest(
            kind=kind,
            view=View(sample.image, sample.size, chain, presented),
            instruction=sample.instruction,
            decoding=decoding,
            sample_id=sample.id,
            allow_click=cfg.allow_early_click and not last,
        )
        try:
            response = policy.complete(request)
            action = response.action
            if isinstance(action, Click) and kind is PromptKind.CROP and not request.allow_click:
                raise KindMismatch(f"click returned for a crop prompt: {format_action(action)}")
        except (PolicyError, GeometryError) as exc:
            traj.stop_reason = StopReason.POLICY_ERROR
            traj.error = f"{type(exc).__name__}: {exc}"
            logger.debug("episode %s rollout %d: %s", sample.id, rollout, traj.error)
            return traj
        traj.steps.append(TrajectoryStep(chain, presented, action, response.cot))
        if isinstance(action, Click):
            traj.final_click_root = click_to_root(chain, action.point, sample.size)
            traj.correct = is_click_correct(traj.final_click_root, sample)
            traj.stop_reason = StopReason.CLICKED
            return traj
        chain = push_crop(chain, action.region, cfg)
    traj.stop_reason = StopReason.MAX_STEPS
    return traj


def crop_root_region(step: TrajectoryStep, root: ImageSize) -> Region:
    if not isinstance(step.action, Crop):
        raise IndexError("step does not hold a crop action")
    return to_root_frame(step.chain, step.action.region, root)


def crop_contains_target(traj: Trajectory, sample: GroundingSample, step: int) -> bool:
    return contains_region(crop_root_region(traj.steps[step], sample.size), sample.gt_bbox)


def run_episodes(
    policy: Policy,
    samples: Iterable[GroundingSample],
    cfg: EpisodeConfig,
    *,
    workers: int = 1,
    rollout: int = 0,
) -> list[Trajectory]:
    """Run one episode per sample; output order follows input order."""
    samples = list(samples)
    if workers <= 1:
        return [run_episode(policy, s, cfg, rollout=rollout) for s in samples]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(lambda s: run_episode(policy, s, cfg, rollout=rollout), samples))
