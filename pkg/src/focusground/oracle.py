"""Simulated grounding policy with known ground truth.

The oracle answers crop prompts with a box around the target (log-normal
size dispersion, occasional deliberate misses) and click prompts with a
hit whose probability follows a logistic model of how much of the view the
target occupies and how much of its surrounding context is still visible::

    p = visible_fraction * sigmoid(k1 * log(target_area / view_area)
                                   + k0 + k_ctx * (context_fraction - 1))

``p`` is exactly zero when the target is not in the view. Every call draws
from a generator seeded by (oracle seed, sample id, decoding seed, kind), so
results do not depend on scheduling order.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Mapping, Optional, Union

import numpy as np

from ._seeding import rng_for
from .geometry import (
    ImageSize,
    Point,
    Region,
    clamp_to_frame,
    contains_point,
    to_local_frame,
    to_root_frame,
)
from .policy import Click, Crop, ParseFailure, PolicyRequest, PolicyResponse, PromptKind, clamp_point, format_action


@dataclass(frozen=True)
class World:
    """Ground truth the oracle is allowed to peek at."""

    size: ImageSize
    target: Region
    distractors: tuple[Region, ...] = ()


@dataclass
class OracleKnobs:
    crop_scale: float = 4.0
    crop_sigma: float = 0.25
    miss_rate: float = 0.1
    # cap on crop side relative to the current view side
    max_crop_fraction: float = 0.5
    k0: float = 3.8
    k1: float = 0.5
    k_ctx: float = 4.0
    context_factor: float = 3.0
    fixed_click_p: Optional[float] = None
    early_click_ratio: Optional[float] = None


def _sigmoid(z: float) -> float:
    if z >= 0:
        return 1.0 / (1.0 + math.exp(-z))
    e = math.exp(z)
    return e / (1.0 + e)


def click_success_probability(world: World, view_root: Region, knobs: OracleKnobs) -> float:
    """Probability that a click from ``view_root`` (root frame) lands on the target."""
    visible = world.target.intersection(view_root)
    if visible is None:
        return 0.0
    vis_frac = visible.area / world.target.area
    if knobs.fixed_click_p is not None:
        return knobs.fixed_click_p * vis_frac
    ctx = world.target.scaled_about_center(knobs.context_factor)
    ctx = ctx.intersection(world.size.full_region()) or world.target
    ctx_seen = ctx.intersection(view_root)
    ctx_frac = (ctx_seen.area if ctx_seen else 0) / ctx.area
    z = knobs.k1 * math.log(visible.area / view_root.area) + knobs.k0 + knobs.k_ctx * (ctx_frac - 1.0)
    return vis_frac * _sigmoid(z)


def _place(lo: int, hi: int, size: int, tlo: int, thi: int, rng: np.random.Generator) -> int:
    """Start coordinate for a span of ``size`` inside [lo, hi] covering [tlo, thi] if possible."""
    if size >= thi - tlo:
        a, b = thi - size, tlo
    else:
        a, b = tlo, thi - size
    a, b = max(a, lo), min(b, hi - size)
    if a > b:
        return int(min(max(tlo, lo), hi - size))
    return int(rng.integers(a, b + 1))


class OraclePolicy:
    """Policy backed by ground truth; see module docstring for the model."""

    def __init__(
        self,
        worlds: Union[Mapping[str, World], Callable[[str], World]],
        knobs: Optional[OracleKnobs] = None,
        seed: int = 0,
    ):
        self._worlds = worlds
        self.knobs = knobs or OracleKnobs()
        self.seed = seed

    def world(self, sample_id: str) -> World:
        if callable(self._worlds):
            return self._worlds(sample_id)
        return self._worlds[sample_id]

    def complete(self, request: PolicyRequest) -> PolicyResponse:
        world = self.world(request.sample_id)
        rng = rng_for(self.seed, request.sample_id, request.decoding.seed or 0, request.kind.value)
        view_root = request.view.root_region()
        k = self.knobs
        if request.kind is PromptKind.CROP:
            early = (
                request.allow_click
                and k.early_click_ratio is not None
                and world.target.intersection(view_root) is not None
                and world.target.area / view_root.area >= k.early_click_ratio
            )
            if not early:
                region = self._crop(world, view_root, rng)
                local = to_local_frame(request.view.chain, region)
                action = Crop(clamp_to_frame(local, request.view.presented_size))
                text = f"The target '{request.instruction}' should be inside this area. {format_action(action)}"
                return PolicyResponse(text, action)
        point = self._click(world, view_root, request, rng)
        action = Click(point)
        return PolicyResponse(f"Clicking '{request.instruction}'. {format_action(action)}", action)

    def _crop(self, world: World, view: Region, rng: np.random.Generator) -> Region:
        k = self.knobs
        t = world.target
        noise = np.exp(rng.normal(0.0, k.crop_sigma, size=2)) if k.crop_sigma > 0 else np.ones(2)
        cw = t.w * k.crop_scale * noise[0]
        ch = t.h * k.crop_scale * noise[1]
        cw = int(max(1, min(round(cw), view.w * k.max_crop_fraction, view.w)))
        ch = int(max(1, min(round(ch), view.h * k.max_crop_fraction, view.h)))
        if rng.random() < k.miss_rate:
            for _ in range(32):
                x = int(rng.integers(view.x, view.x2 - cw + 1))
                y = int(rng.integers(view.y, view.y2 - ch + 1))
                cand = Region(x, y, cw, ch)
                if cand.intersection(t) is None:
                    return cand
        x = _place(view.x, view.x2, cw, t.x, t.x2, rng)
        y = _place(view.y, view.y2, ch, t.y, t.y2, rng)
        return Region(x, y, cw, ch)

    def _click(self, world: World, view: Region, request: PolicyRequest, rng: np.random.Generator) -> Point:
        chain, presented = request.view.chain, request.view.presented_size
        p = click_success_probability(world, view, self.knobs)
        hit = rng.random() < p

        def local(pt: Point) -> Point:
            return clamp_point(to_local_frame(chain, pt), presented)

        def lands_on_target(pt: Point) -> bool:
            root = to_root_frame(chain, pt, request.view.root_size)
            return contains_point(world.target, root)

        if hit:
            visible = world.target.intersection(view)
            inner = Region(
                visible.x + visible.w // 4, visible.y + visible.h // 4, max(visible.w // 2, 1), max(visible.h // 2, 1)
            )
            for _ in range(8):
                cand = local(Point(int(rng.integers(inner.x, inner.x2)), int(rng.integers(inner.y, inner.y2))))
                if lands_on_target(cand):
                    return cand
            return local(visible.center)
        centers = [d.center for d in world.distractors if contains_point(view, d.center)]
        if centers:
            return local(centers[int(rng.integers(len(centers)))])
        for _ in range(32):
            cand = local(Point(int(rng.integers(view.x, view.x2)), int(rng.integers(view.y, view.y2))))
            if not lands_on_target(cand):
                return cand
        # the view is (almost) all target: a miss can only be an unusable answer
        raise ParseFailure("oracle produced no usable click")


def world_from_sample(sample) -> World:
    """Minimal world when only the annotated target box is known."""
    return World(size=sample.size, target=sample.gt_bbox)
