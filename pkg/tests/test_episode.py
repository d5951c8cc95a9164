from __future__ import annotations

import json

import pytest

from focusground.episode import (
    EpisodeConfig,
    GroundingSample,
    StopReason,
    Trajectory,
    TrajectoryStep,
    crop_contains_target,
    crop_root_region,
    is_click_correct,
    run_episode,
    run_episodes,
)
from focusground.evaluate import evaluate
from focusground.geometry import FrameChain, ImageSize, Point, Region, contains_point, contains_region
from focusground.oracle import OracleKnobs, OraclePolicy, World
from focusground.policy import Click, Crop, ParseFailure, PolicyResponse, PromptKind
from focusground.simenv import SimConfig, generate_screens

from conftest import oracle_for

SIZE = ImageSize(1000, 800)
SAMPLE = GroundingSample("s0", None, SIZE, "save", Region(400, 300, 50, 20), Point(420, 310))


class Scripted:
    """Replays fixed action strings in order and records the requests it saw."""

    def __init__(self, *texts: str):
        self.texts = list(texts)
        self.requests = []

    def complete(self, request):
        from focusground.policy import parse_action

        self.requests.append(request)
        text = self.texts[len(self.requests) - 1]
        action = parse_action(text, request.kind, request.view.presented_size, allow_early_click=request.allow_click)
        return PolicyResponse(text, action)


def test_single_step_is_direct_click():
    policy = Scripted("Click(420, 310)")
    traj = run_episode(policy, SAMPLE, EpisodeConfig(max_steps=1))
    assert len(traj.steps) == 1 and isinstance(traj.steps[0].action, Click)
    assert policy.requests[0].kind is PromptKind.CLICK
    assert traj.correct and traj.stop_reason is StopReason.CLICKED
    assert traj.final_click_root == Point(420, 310)


def test_two_steps_crop_then_click_maps_to_root():
    # a 200x100 crop is inside the pixel budget and shown unscaled
    policy = Scripted("Crop(350, 250, 200, 100)", "Click(75, 55)")
    traj = run_episode(policy, SAMPLE, EpisodeConfig(max_steps=2))
    assert [r.kind for r in policy.requests] == [PromptKind.CROP, PromptKind.CLICK]
    assert policy.requests[1].view.presented_size == ImageSize(200, 100)
    assert traj.final_click_root == Point(425, 305)
    assert traj.correct and traj.crop_count == 1


def test_upscaled_crop_click_maps_back():
    # 40x40 crop -> 1600 px < 3136, shown at 56x56 (scale 1.4)
    policy = Scripted("Crop(400, 290, 40, 40)", "Click(28, 28)")
    traj = run_episode(policy, SAMPLE, EpisodeConfig(max_steps=2))
    assert policy.requests[1].view.presented_size == ImageSize(56, 56)
    assert traj.final_click_root == Point(420, 310)


def test_crop_budget_exhaustion():
    class AlwaysCrops:
        def complete(self, request):
            return PolicyResponse("Crop(0, 0, 100, 100)", Crop(Region(0, 0, 100, 100)))

    traj = run_episode(AlwaysCrops(), SAMPLE, EpisodeConfig(max_steps=3))
    assert traj.stop_reason is StopReason.MAX_STEPS and traj.crop_count == 3
    assert not traj.correct and traj.final_click_root is None


def test_early_click_ends_episode():
    policy = Scripted("Click(420, 310)")
    traj = run_episode(policy, SAMPLE, EpisodeConfig(max_steps=3))
    assert len(traj.steps) == 1 and traj.correct
    policy = Scripted("Click(420, 310)")
    traj = run_episode(policy, SAMPLE, EpisodeConfig(max_steps=3, allow_early_click=False))
    assert traj.stop_reason is StopReason.POLICY_ERROR


def test_policy_errors_are_recorded():
    class Broken:
        def complete(self, request):
            raise ParseFailure("garbage")

    traj = run_episode(Broken(), SAMPLE, EpisodeConfig(max_steps=2))
    assert traj.stop_reason is StopReason.POLICY_ERROR
    assert not traj.correct and traj.final_click_root is None
    assert "garbage" in traj.error


def test_each_step_sees_only_current_view():
    policy = Scripted("Crop(300, 200, 400, 300)", "Crop(50, 50, 200, 100)", "Click(10, 10)")
    run_episode(policy, SAMPLE, EpisodeConfig(max_steps=3))
    views = [r.view for r in policy.requests]
    assert [len(v.chain.crops) for v in views] == [0, 1, 2]
    assert all(r.instruction == "save" for r in policy.requests)
    assert views[2].root_region() == Region(350, 250, 200, 100)


def test_is_click_correct_edges():
    b = SAMPLE.gt_bbox
    assert is_click_correct(b.center, SAMPLE)
    assert not is_click_correct(Point(b.x2, b.y), SAMPLE)
    assert is_click_correct(Point(b.x, b.y), SAMPLE)


def _crop_traj(*crops: Region) -> Trajectory:
    chain = FrameChain()
    steps = []
    for c in crops:
        steps.append(TrajectoryStep(chain, chain.view_size(SIZE), Crop(c)))
        chain = chain.push(c, c.size)
    return Trajectory("s0", steps)


def test_crop_contains_target():
    assert crop_contains_target(_crop_traj(SIZE.full_region()), SAMPLE, 0)
    assert not crop_contains_target(_crop_traj(Region(410, 305, 10, 5)), SAMPLE, 0)
    nested = _crop_traj(Region(300, 200, 400, 300), Region(90, 90, 70, 40))
    # (300+90, 200+90, 70, 40) = (390, 290, 70, 40) covers (400, 300, 50, 20)
    assert crop_root_region(nested.steps[1], SIZE) == Region(390, 290, 70, 40)
    assert crop_contains_target(nested, SAMPLE, 1)
    with pytest.raises(IndexError):
        crop_contains_target(Trajectory("s0", [TrajectoryStep(FrameChain(), SIZE, Click(Point(1, 1)))]), SAMPLE, 0)


def test_perfect_oracle_two_steps():
    world = World(SIZE, SAMPLE.gt_bbox)
    policy = OraclePolicy({"s0": world}, OracleKnobs(miss_rate=0.0, k0=40.0))
    for r in range(20):
        traj = run_episode(policy, SAMPLE, EpisodeConfig(max_steps=2), rollout=r)
        assert len(traj.steps) == 2 and traj.correct
        assert contains_point(SAMPLE.gt_bbox, traj.final_click_root)


def test_trajectory_serialization(sim_pairs):
    policy = oracle_for(sim_pairs)
    _, sample = sim_pairs[0]
    traj = run_episode(policy, sample, EpisodeConfig(max_steps=3))
    d = traj.to_dict()
    assert set(d) >= {"sample_id", "steps", "final_click_root", "correct", "stop_reason"}
    assert set(d["steps"][0]) == {"frame_chain", "presented_size", "action", "cot"}
    assert Trajectory.from_dict(json.loads(json.dumps(d))) == traj


def test_episode_invariants(sim_pairs):
    policy = oracle_for(sim_pairs)
    cfg = EpisodeConfig(max_steps=3)
    for _, sample in sim_pairs:
        for r in range(3):
            traj = run_episode(policy, sample, cfg, rollout=r)
            assert traj == run_episode(policy, sample, cfg, rollout=r)
            assert (traj.final_click_root is not None) == (traj.stop_reason is StopReason.CLICKED)
            if traj.final_click_root is not None:
                assert contains_point(sample.size.full_region(), traj.final_click_root)
            else:
                assert not traj.correct
            clicks = [i for i, s in enumerate(traj.steps) if isinstance(s.action, Click)]
            assert clicks in ([], [len(traj.steps) - 1])
            prev = sample.size.full_region()
            for step in traj.steps:
                if isinstance(step.action, Crop):
                    region = crop_root_region(step, sample.size)
                    assert contains_region(prev, region)
                    prev = region


def test_worker_count_does_not_change_results(sim_pairs, sim_samples):
    policy = oracle_for(sim_pairs)
    cfg = EpisodeConfig(max_steps=2)
    assert run_episodes(policy, sim_samples, cfg, workers=1) == run_episodes(policy, sim_samples, cfg, workers=6)


@pytest.mark.slow
def test_tight_crops_beat_direct_clicks():
    pairs = generate_screens(SimConfig(), 1000, seed=1)
    policy = oracle_for(pairs, OracleKnobs(miss_rate=0.0, crop_scale=1.0, crop_sigma=0.0))
    samples = [s for _, s in pairs]
    one = evaluate(policy, samples, EpisodeConfig(max_steps=1))[0].overall
    two = evaluate(policy, samples, EpisodeConfig(max_steps=2))[0].overall
    assert two >= one
