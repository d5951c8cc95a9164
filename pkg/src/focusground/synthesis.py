"""Training-data factories: rejection-sampled SFT conversations, Monte Carlo
and IoU filtered preference pairs, and corrected multi-step trajectories."""

from __future__ import annotations

import itertools
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Callable, Iterable, Iterator, Mapping, Optional, Sequence, TypeVar, Union

from ._seeding import derive_seed
from .episode import (
    EpisodeConfig,
    GroundingSample,
    Trajectory,
    TrajectoryStep,
    click_to_root,
    crop_contains_target,
    is_click_correct,
    push_crop,
    root_chain,
    run_episode,
)
from .geometry import FrameChain, GeometryError, ImageSize, Point, iou
from .jsonl import YieldStats
from .policy import (
    Click,
    Crop,
    Decoding,
    Policy,
    PolicyError,
    PolicyRequest,
    PromptKind,
    PromptTemplates,
    View,
    format_action,
)

logger = logging.getLogger(__name__)

T = TypeVar("T")
R = TypeVar("R")

SYNTHESIS_DECODING = Decoding(temperature=1.0)

ORIGIN_FAILURE = "single_step_failure"
ORIGIN_SUCCESS = "single_step_success"


def _ordered_map(fn: Callable[[T], R], items: Iterable[T], workers: int) -> Iterator[R]:
    if workers <= 1:
        for item in items:
            yield fn(item)
        return
    with ThreadPoolExecutor(max_workers=workers) as pool:
        yield from pool.map(fn, items)


def _error_key(traj: Trajectory) -> str:
    return (traj.error or "unknown").split(":", 1)[0]


# -- records -----------------------------------------------------------------


def _image_part(sample: GroundingSample, chain: FrameChain, presented: ImageSize) -> dict:
    return {
        "type": "image",
        "image": sample.image,
        "frame_chain": chain.to_dict(),
        "presented_size": presented.as_list(),
    }


def trajectory_conversation(
    traj: Trajectory, sample: GroundingSample, templates: Optional[PromptTemplates] = None
) -> list[dict]:
    """Render a trajectory as alternating user/assistant turns."""
    templates = templates or PromptTemplates.default()
    turns = []
    for step in traj.steps:
        kind = PromptKind.CLICK if isinstance(step.action, Click) else PromptKind.CROP
        req = PolicyRequest(kind, View(sample.image, sample.size, step.chain, step.presented_size), sample.instruction)
        turns.append(
            {
                "role": "user",
                "content": [
                    _image_part(sample, step.chain, step.presented_size),
                    {"type": "text", "text": templates.render(req)},
                ],
            }
        )
        text = format_action(step.action)
        if step.cot:
            text = f"{step.cot}\n{text}"
        turns.append({"role": "assistant", "content": [{"type": "text", "text": text}]})
    return turns


@dataclass
class SftRecord:
    sample_id: str
    image: Optional[str]
    root_size: ImageSize
    instruction: str
    conversation: list[dict]
    label_click: Point
    provenance: Optional[dict] = None

    @classmethod
    def from_trajectory(
        cls,
        traj: Trajectory,
        sample: GroundingSample,
        templates: Optional[PromptTemplates] = None,
        provenance: Optional[dict] = None,
    ) -> "SftRecord":
        if traj.final_click_root is None:
            raise ValueError("trajectory has no click")
        return cls(
            sample_id=sample.id,
            image=sample.image,
            root_size=sample.size,
            instruction=sample.instruction,
            conversation=trajectory_conversation(traj, sample, templates),
            label_click=traj.final_click_root,
            provenance=provenance,
        )

    def to_dict(self) -> dict:
        d = {
            "sample_id": self.sample_id,
            "image": self.image,
            "root_size": self.root_size.as_list(),
            "instruction": self.instruction,
            "conversation": self.conversation,
            "label_click": self.label_click.as_list(),
        }
        if self.provenance is not None:
            d["provenance"] = self.provenance
        return d


@dataclass
class MultiStepRecord:
    sample_id: str
    trajectory: Trajectory
    record: SftRecord
    corrected: bool = True

    @property
    def provenance(self) -> dict:
        return {"origin": ORIGIN_FAILURE, "corrected": self.corrected}

    def to_dict(self) -> dict:
        return self.record.to_dict()


@dataclass(frozen=True)
class RewardEstimate:
    crop: Crop
    n_rollouts: int
    n_correct: int
    n_errors: int = 0

    @property
    def r_acc(self) -> float:
        return self.n_correct / self.n_rollouts


@dataclass(frozen=True)
class Candidate:
    action: Crop
    cot: Optional[str]
    estimate: RewardEstimate

    def turn(self) -> dict:
        text = format_action(self.action)
        if self.cot:
            text = f"{self.cot}\n{text}"
        return {
            "role": "assistant",
            "content": text,
            "action": format_action(self.action),
            "n_correct": self.estimate.n_correct,
            "r_acc": self.estimate.r_acc,
        }


@dataclass(frozen=True)
class PreferencePair:
    sample_id: str
    context: dict
    chosen: Candidate
    rejected: Candidate
    r_div: float
    N: int

    @property
    def margin(self) -> int:
        return self.chosen.estimate.n_correct - self.rejected.estimate.n_correct

    def to_dict(self) -> dict:
        return {
            "sample_id": self.sample_id,
            "context": self.context,
            "chosen": self.chosen.turn(),
            "rejected": self.rejected.turn(),
            "n_correct_chosen": self.chosen.estimate.n_correct,
            "n_correct_rejected": self.rejected.estimate.n_correct,
            "r_div": self.r_div,
            "margin": self.margin,
            "N": self.N,
        }


# -- configs -----------------------------------------------------------------


def _synthesis_episode() -> EpisodeConfig:
    return EpisodeConfig(max_steps=2, decoding=SYNTHESIS_DECODING, allow_early_click=False)


@dataclass(frozen=True)
class SftConfig:
    rollouts_per_sample: int = 4
    max_keep_per_sample: int = 1
    episode: EpisodeConfig = field(default_factory=_synthesis_episode)


@dataclass(frozen=True)
class DpoConfig:
    pairs_per_sample: int = 2
    n_candidates: int = 6
    N: int = 8
    delta: int = 4
    tau: float = 0.8
    episode: EpisodeConfig = field(default_factory=_synthesis_episode)

    def __post_init__(self):
        if self.N < 1:
            raise ValueError("N must be >= 1")
        if not 0 < self.delta <= self.N:
            raise ValueError(f"delta must be in [1, N={self.N}], got {self.delta}")
        if not 0 < self.tau <= 1:
            raise ValueError(f"tau must be in (0, 1], got {self.tau}")


@dataclass(frozen=True)
class MultiStepConfig:
    max_crops: int = 2
    rollouts: int = 4
    episode: EpisodeConfig = field(default_factory=_synthesis_episode)

    def __post_init__(self):
        if self.max_crops < 2:
            raise ValueError("max_crops must be >= 2")


# -- rejection-sampled SFT ---------------------------------------------------


def single_crop_config(episode: EpisodeConfig) -> EpisodeConfig:
    return replace(episode, max_steps=2, allow_early_click=False)


def build_sft(
    samples: Iterable[GroundingSample],
    policy: Policy,
    cfg: SftConfig = SftConfig(),
    *,
    templates: Optional[PromptTemplates] = None,
    stats: Optional[YieldStats] = None,
    workers: int = 1,
) -> Iterator[SftRecord]:
    """Run crop->click rollouts and keep only the ones that click correctly."""
    ep = single_crop_config(cfg.episode)
    templates = templates or PromptTemplates.default()

    def one(sample: GroundingSample) -> tuple[list[SftRecord], YieldStats]:
        st, kept = YieldStats(), []
        for r in range(cfg.rollouts_per_sample):
            if len(kept) >= cfg.max_keep_per_sample:
                break
            traj = run_episode(policy, sample, ep, rollout=r)
            st.attempted += 1
            if traj.error:
                st.error_counts[_error_key(traj)] += 1
            if traj.correct:
                kept.append(SftRecord.from_trajectory(traj, sample, templates))
        st.kept = len(kept)
        st.skipped = int(not kept)
        return kept, st

    for kept, st in _ordered_map(one, samples, workers):
        if stats is not None:
            stats.merge(st)
        yield from kept


# -- Monte Carlo accuracy reward ---------------------------------------------


def mc_accuracy(
    policy: Policy,
    sample: GroundingSample,
    crop: Crop,
    N: int,
    *,
    chain: Optional[FrameChain] = None,
    cfg: EpisodeConfig = _synthesis_episode(),
    key: Union[int, str] = 0,
) -> RewardEstimate:
    """Fraction of ``N`` click rollouts from the cropped view that hit the target.

    ``chain`` is the view the crop was predicted in (root view by default).
    Rollout failures of any kind count as misses.
    """
    if N < 1:
        raise ValueError("N must be >= 1")
    chain = chain if chain is not None else root_chain(sample, cfg)
    view_chain = push_crop(chain, crop.region, cfg)
    presented = view_chain.view_size(sample.size)
    view = View(sample.image, sample.size, view_chain, presented)
    n_correct = n_errors = 0
    for i in range(N):
        seed = derive_seed(cfg.seed, "mc", sample.id, len(chain.crops), key, i)
        req = PolicyRequest(
            PromptKind.CLICK, view, sample.instruction, replace(cfg.decoding, seed=seed), sample.id
        )
        try:
            action = policy.complete(req).action
        except (PolicyError, GeometryError):
            n_errors += 1
            continue
        if isinstance(action, Click) and is_click_correct(click_to_root(view_chain, action.point, sample.size), sample):
            n_correct += 1
    return RewardEstimate(crop, N, n_correct, n_errors)


# -- preference pairs --------------------------------------------------------


def sample_candidates(
    policy: Policy,
    sample: GroundingSample,
    cfg: DpoConfig,
    chain: Optional[FrameChain] = None,
    stats: Optional[YieldStats] = None,
) -> list[Candidate]:
    """Draw crop candidates for one view and score each with :func:`mc_accuracy`."""
    ep = cfg.episode
    chain = chain if chain is not None else root_chain(sample, ep)
    presented = chain.view_size(sample.size)
    view = View(sample.image, sample.size, chain, presented)
    out = []
    for c in range(cfg.n_candidates):
        seed = derive_seed(ep.seed, "candidate", sample.id, len(chain.crops), c)
        req = PolicyRequest(PromptKind.CROP, view, sample.instruction, replace(ep.decoding, seed=seed), sample.id)
        try:
            resp = policy.complete(req)
        except (PolicyError, GeometryError) as exc:
            if stats is not None:
                stats.error_counts[type(exc).__name__] += 1
            continue
        if not isinstance(resp.action, Crop):
            continue
        est = mc_accuracy(policy, sample, resp.action, cfg.N, chain=chain, cfg=ep, key=c)
        out.append(Candidate(resp.action, resp.cot, est))
    return out


def select_pairs(candidates: Sequence[Candidate], delta: int, tau: float, limit: int) -> list[tuple[Candidate, Candidate, float]]:
    """Pairs with count margin >= delta and crop IoU < tau, best margin first."""
    accepted = []
    for i, j in itertools.combinations(range(len(candidates)), 2):
        a, b = candidates[i], candidates[j]
        if a.estimate.n_correct == b.estimate.n_correct:
            continue
        if b.estimate.n_correct > a.estimate.n_correct:
            a, b = b, a
        margin = a.estimate.n_correct - b.estimate.n_correct
        r_div = iou(a.action.region, b.action.region)
        if margin >= delta and r_div < tau:
            accepted.append((-margin, r_div, i, j, a, b))
    accepted.sort(key=lambda t: t[:4])
    return [(a, b, r_div) for _, r_div, _, _, a, b in accepted[:limit]]


def _context(sample: GroundingSample, chain: FrameChain, templates: PromptTemplates) -> dict:
    presented = chain.view_size(sample.size)
    req = PolicyRequest(PromptKind.CROP, View(sample.image, sample.size, chain, presented), sample.instruction)
    return {
        "image": sample.image,
        "instruction": sample.instruction,
        "root_size": sample.size.as_list(),
        "frame_chain": chain.to_dict(),
        "presented_size": presented.as_list(),
        "prompt": templates.render(req),
    }


def _pairs_for_view(
    policy, sample, chain, cfg: DpoConfig, templates
) -> tuple[list[PreferencePair], YieldStats]:
    st = YieldStats(attempted=1)
    chain = chain if chain is not None else root_chain(sample, cfg.episode)
    cands = sample_candidates(policy, sample, cfg, chain, st)
    ctx = _context(sample, chain, templates)
    pairs = [
        PreferencePair(sample.id, ctx, a, b, r_div, cfg.N)
        for a, b, r_div in select_pairs(cands, cfg.delta, cfg.tau, cfg.pairs_per_sample)
    ]
    st.kept = len(pairs)
    st.skipped = int(not pairs)
    return pairs, st


def build_dpo(
    samples: Iterable[GroundingSample],
    policy: Policy,
    cfg: DpoConfig = DpoConfig(),
    *,
    templates: Optional[PromptTemplates] = None,
    stats: Optional[YieldStats] = None,
    workers: int = 1,
) -> Iterator[PreferencePair]:
    templates = templates or PromptTemplates.default()
    for pairs, st in _ordered_map(lambda s: _pairs_for_view(policy, s, None, cfg, templates), samples, workers):
        if stats is not None:
            stats.merge(st)
        yield from pairs


# -- multi-step correction ---------------------------------------------------


@dataclass(frozen=True)
class FailureCase:
    """A single-crop episode whose crop covered the target but whose click missed."""

    sample: GroundingSample
    trajectory: Trajectory

    @property
    def chain(self) -> FrameChain:
        """Frame chain of the failing crop view."""
        return self.trajectory.steps[1].chain

    @property
    def crop_step(self) -> TrajectoryStep:
        return self.trajectory.steps[0]


def _sample_index(samples) -> Mapping[str, GroundingSample]:
    if isinstance(samples, Mapping):
        return samples
    return {s.id: s for s in samples}


def collect_failures(trajectories: Iterable[Trajectory], samples) -> Iterator[FailureCase]:
    index = _sample_index(samples)
    for traj in trajectories:
        if traj.correct or traj.final_click_root is None or len(traj.steps) < 2:
            continue
        if not isinstance(traj.steps[0].action, Crop):
            continue
        sample = index[traj.sample_id]
        if crop_contains_target(traj, sample, 0):
            yield FailureCase(sample, traj)


def run_single_crop(
    samples: Iterable[GroundingSample], policy: Policy, episode: EpisodeConfig, *, rollout: int = 0, workers: int = 1
) -> list[Trajectory]:
    ep = single_crop_config(episode)
    return list(_ordered_map(lambda s: run_episode(policy, s, ep, rollout=rollout), samples, workers))


def build_multistep(
    failures: Iterable[FailureCase],
    policy: Policy,
    cfg: MultiStepConfig = MultiStepConfig(),
    *,
    templates: Optional[PromptTemplates] = None,
    stats: Optional[YieldStats] = None,
    workers: int = 1,
) -> Iterator[MultiStepRecord]:
    """Resume each failure from its crop and keep rollouts that end in a correct click."""
    templates = templates or PromptTemplates.default()
    ep = replace(cfg.episode, max_steps=cfg.max_crops, seed=derive_seed(cfg.episode.seed, "multistep"))
    provenance = {"origin": ORIGIN_FAILURE, "corrected": True}

    def one(f: FailureCase) -> tuple[list[MultiStepRecord], YieldStats]:
        st = YieldStats()
        for r in range(cfg.rollouts):
            traj = run_episode(policy, f.sample, ep, rollout=r, start=f.chain, prefix=[f.crop_step])
            st.attempted += 1
            if traj.error:
                st.error_counts[_error_key(traj)] += 1
            if traj.correct and traj.crop_count >= 2:
                rec = SftRecord.from_trajectory(traj, f.sample, templates, dict(provenance))
                st.kept = 1
                return [MultiStepRecord(f.sample.id, traj, rec)], st
        st.skipped = 1
        return [], st

    for recs, st in _ordered_map(one, failures, workers):
        if stats is not None:
            stats.merge(st)
        yield from recs


def build_multistep_dpo(
    failures: Iterable[FailureCase],
    policy: Policy,
    cfg: DpoConfig = DpoConfig(),
    *,
    templates: Optional[PromptTemplates] = None,
    stats: Optional[YieldStats] = None,
    workers: int = 1,
) -> Iterator[PreferencePair]:
    """Preference pairs over second-step crops with the failing first crop held fixed."""
    templates = templates or PromptTemplates.default()
    for pairs, st in _ordered_map(
        lambda f: _pairs_for_view(policy, f.sample, f.chain, cfg, templates), failures, workers
    ):
        if stats is not None:
            stats.merge(st)
        yield from pairs


def one_step_records(
    trajectories: Iterable[Trajectory], samples, templates: Optional[PromptTemplates] = None
) -> Iterator[SftRecord]:
    """Successful single-crop trajectories, tagged for mixing into the multi-step file."""
    index = _sample_index(samples)
    for traj in trajectories:
        if traj.correct:
            yield SftRecord.from_trajectory(
                traj, index[traj.sample_id], templates, {"origin": ORIGIN_SUCCESS, "corrected": False}
            )


# -- preference loss ---------------------------------------------------------


def dpo_sigmoid_loss(lp_c: float, lp_r: float, lp_c_ref: float, lp_r_ref: float, beta: float = 0.1) -> float:
    """``-log sigmoid(beta * ((lp_c - lp_c_ref) - (lp_r - lp_r_ref)))``."""
    if beta <= 0:
        raise ValueError("beta must be positive")
    z = beta * ((lp_c - lp_c_ref) - (lp_r - lp_r_ref))
    # -log sigmoid(z) = softplus(-z)
    return max(-z, 0.0) + math.log1p(math.exp(-abs(z)))
