"""Procedural GUI screens with exact ground truth.

Elements sit one per grid cell, so boxes never overlap and a click can be
judged unambiguously. Screens are pure functions of ``(config, seed, index)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

from ._seeding import rng_for
from .episode import EpisodeConfig, GroundingSample, push_crop, root_chain, run_episode
from .geometry import ImageSize, Region, area_ratio, clamp_to_frame, to_local_frame
from .jsonl import write_jsonl
from .oracle import World
from .policy import Policy

DEFAULT_LABELS = (
    "File", "Edit", "View", "Insert", "Format", "Tools", "Window", "Help", "Save", "Open",
    "Close", "Export", "Import", "Undo", "Redo", "Cut", "Copy", "Paste", "Search", "Replace",
    "Settings", "Preferences", "Zoom In", "Zoom Out", "Refresh", "Download", "Upload", "Share",
    "Print", "Delete", "Rename", "New Folder", "Properties", "Layers", "Brush", "Eraser",
    "Select", "Crop", "Rotate", "Align", "Play", "Pause", "Stop", "Record", "Mute", "Volume",
    "Run", "Debug", "Build", "Commit", "Push", "Pull", "Merge", "Terminal", "Console", "Filter",
    "Sort", "Chart", "Table", "Formula", "Bold", "Italic", "Underline", "Font", "Color",
)  # fmt: skip

DEFAULT_DOMAINS = ("cad", "dev", "creative", "scientific", "office", "os")

TEXT, ICON = "text", "icon"


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class SimConfig:
    rows: int = 8
    cols: int = 12
    screen: ImageSize = ImageSize(1920, 1080)
    text_height: tuple[int, int] = (14, 32)
    text_aspect: tuple[float, float] = (2.5, 6.0)
    icon_side: tuple[int, int] = (16, 48)
    icon_ratio: float = 0.3
    padding: int = 4
    labels: tuple[str, ...] = DEFAULT_LABELS
    domains: tuple[str, ...] = DEFAULT_DOMAINS

    def validate(self):
        if self.rows * self.cols < 2:
            raise ConfigError("grid must hold a target and at least one distractor")
        cw, ch = self.cell_size()
        room_w, room_h = cw - 2 * self.padding, ch - 2 * self.padding
        if room_w < max(self.icon_side[0], 1) or room_h < max(self.text_height[0], self.icon_side[0]):
            raise ConfigError(f"cells of {cw}x{ch}px cannot hold the minimum element size")
        if not 0 <= self.icon_ratio <= 1:
            raise ConfigError("icon_ratio must be in [0, 1]")
        if not self.labels:
            raise ConfigError("label pool is empty")


    def cell_size(self) -> tuple[int, int]:
        return self.screen.width // self.cols, self.screen.height // self.rows


@dataclass(frozen=True)
class Element:
    bbox: Region
    kind: str
    label: str


@dataclass(frozen=True)
class SimScreen:
    id: str
    seed: int
    size: ImageSize
    elements: tuple[Element, ...]
    target_index: int
    domain: str = "default"

    @property
    def target(self) -> Element:
        return self.elements[self.target_index]

    def world(self) -> World:
        distractors = tuple(e.bbox for i, e in enumerate(self.elements) if i != self.target_index)
        return World(self.size, self.target.bbox, distractors)

    def sample(self, image: Optional[str] = None) -> GroundingSample:
        return GroundingSample(
            id=self.id,
            image=image,
            size=self.size,
            instruction=self.target.label,
            gt_bbox=self.target.bbox,
            domain=self.domain,
            element_type=self.target.kind,
        )

    def render(self):
        """Draw the screen. Same screen -> byte-identical pixels."""
        from PIL import Image, ImageDraw, ImageFont

        rng = rng_for("render", self.seed, self.id)
        bg = tuple(int(v) for v in rng.integers(225, 250, size=3))
        im = Image.new("RGB", (self.size.width, self.size.height), bg)
        draw = ImageDraw.Draw(im)
        font = ImageFont.load_default()
        for el in self.elements:
            b = el.bbox
            fill = tuple(int(v) for v in rng.integers(60, 200, size=3))
            box = (b.x, b.y, b.x2 - 1, b.y2 - 1)
            if el.kind == ICON:
                draw.rounded_rectangle(box, radius=max(2, b.w // 5), fill=fill)
                draw.text((b.x + b.w // 2, b.y + b.h // 2), el.label[:1], fill=(255, 255, 255), font=font, anchor="mm")
            else:
                draw.rectangle(box, fill=fill, outline=(40, 40, 40))
                draw.text((b.x + 3, b.y + b.h // 2), el.label, fill=(255, 255, 255), font=font, anchor="lm")
        return im

    def to_dict(self) -> dict:
        return {
            "id": self.id,
            "seed": self.seed,
            "size": self.size.as_list(),
            "elements": [{"bbox": e.bbox.as_list(), "kind": e.kind, "label": e.label} for e in self.elements],
            "target_index": self.target_index,
            "domain": self.domain,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SimScreen":
        return cls(
            id=d["id"],
            seed=d["seed"],
            size=ImageSize(*d["size"]),
            elements=tuple(Element(Region(*e["bbox"]), e["kind"], e["label"]) for e in d["elements"]),
            target_index=d["target_index"],
            domain=d.get("domain", "default"),
        )


def _unique_labels(pool: Sequence[str], n: int, rng: np.random.Generator) -> list[str]:
    order = rng.permutation(len(pool))
    out = []
    for i in range(n):
        base = pool[order[i % len(pool)]]
        rnd = i // len(pool)
        out.append(base if rnd == 0 else f"{base} {rnd + 1}")
    return out


def _element_in_cell(cfg: SimConfig, cell: Region, kind: str, rng: np.random.Generator) -> Region:
    room_w, room_h = cell.w - 2 * cfg.padding, cell.h - 2 * cfg.padding
    if kind == ICON:
        side = int(rng.integers(cfg.icon_side[0], cfg.icon_side[1] + 1))
        w = h = min(side, room_w, room_h)
    else:
        h = int(min(rng.integers(cfg.text_height[0], cfg.text_height[1] + 1), room_h))
        w = int(min(round(h * rng.uniform(*cfg.text_aspect)), room_w))
    x = cell.x + cfg.padding + int(rng.integers(0, room_w - w + 1))
    y = cell.y + cfg.padding + int(rng.integers(0, room_h - h + 1))
    return Region(x, y, w, h)


def generate_screen(cfg: SimConfig, seed: int, index: int) -> SimScreen:
    cfg.validate()
    rng = rng_for("screen", seed, index)
    cw, ch = cfg.cell_size()
    n = cfg.rows * cfg.cols
    labels = _unique_labels(cfg.labels, n, rng)
    elements = []
    for k in range(n):
        r, c = divmod(k, cfg.cols)
        cell = Region(c * cw, r * ch, cw, ch)
        kind = ICON if rng.random() < cfg.icon_ratio else TEXT
        elements.append(Element(_element_in_cell(cfg, cell, kind, rng), kind, labels[k]))
    target = int(rng.integers(n))
    domain = cfg.domains[int(rng.integers(len(cfg.domains)))]
    return SimScreen(f"sim-{seed}-{index:05d}", seed, cfg.screen, tuple(elements), target, domain)


def generate_screens(cfg: SimConfig, n: int, seed: int = 0) -> list[tuple[SimScreen, GroundingSample]]:
    """``n`` screens with their grounding samples; deterministic in ``seed``."""
    out = []
    for i in range(n):
        screen = generate_screen(cfg, seed, i)
        out.append((screen, screen.sample(f"screens/{screen.id}.png")))
    return out


def write_sim_dataset(pairs: Iterable[tuple[SimScreen, GroundingSample]], out_dir, render: bool = True) -> Path:
    """Persist PNGs, ``manifest.jsonl`` and ``screens.jsonl`` under ``out_dir``."""
    from .manifest import sample_to_row

    out = Path(out_dir)
    (out / "screens").mkdir(parents=True, exist_ok=True)
    pairs = list(pairs)
    if render:
        for screen, sample in pairs:
            screen.render().save(out / sample.image, format="PNG")
    write_jsonl(out / "manifest.jsonl", (sample_to_row(s) for _, s in pairs))
    write_jsonl(out / "screens.jsonl", (scr.to_dict() for scr, _ in pairs))
    return out / "manifest.jsonl"


def load_screens(path) -> dict[str, SimScreen]:
    from .jsonl import read_jsonl

    return {d["id"]: SimScreen.from_dict(d) for _, d in read_jsonl(path)}


# -- focus-region probe ------------------------------------------------------


@dataclass(frozen=True)
class ProbePoint:
    factor: float
    area_ratio: float
    accuracy: float
    half_width: float
    n: int

    def to_dict(self) -> dict:
        return {
            "factor": "inf" if math.isinf(self.factor) else self.factor,
            "area_ratio": self.area_ratio,
            "accuracy": self.accuracy,
            "half_width": self.half_width,
            "n": self.n,
        }


def focus_region(sample: GroundingSample, factor: float) -> Region:
    """Target box grown ``factor``x per side about its center, clipped to the screen."""
    if math.isinf(factor):
        return sample.size.full_region()
    return clamp_to_frame(sample.gt_bbox.scaled_about_center(factor), sample.size)


def probe_region_prior(
    policy: Policy,
    samples: Sequence[GroundingSample],
    expansion_factors: Sequence[float],
    trials: int,
    cfg: EpisodeConfig = EpisodeConfig(max_steps=1),
) -> list[ProbePoint]:
    """Click accuracy when the view is pre-cropped to a focus region of each size.

    Trial ``t`` uses sample ``t % len(samples)`` and rollout ``t // len(samples)``;
    the infinite factor runs on the uncropped screen, so with ``trials ==
    len(samples)`` it reproduces a one-step evaluation on the same seeds.
    """
    if not samples:
        raise ValueError("no samples to probe")
    if any(f <= 0 for f in expansion_factors) or list(expansion_factors) != sorted(expansion_factors):
        raise ValueError("expansion factors must be positive and ascending")
    ep = replace(cfg, max_steps=1)
    curve = []
    for factor in expansion_factors:
        hits, ratios = 0, []
        for t in range(trials):
            sample = samples[t % len(samples)]
            region = focus_region(sample, factor)
            ratios.append(area_ratio(region, sample.size))
            start = None
            if not math.isinf(factor):
                root = root_chain(sample, ep)
                local = clamp_to_frame(to_local_frame(root, region), root.view_size(sample.size))
                start = push_crop(root, local, ep)
            traj = run_episode(policy, sample, ep, rollout=t // len(samples), start=start)
            hits += traj.correct
        p = hits / trials
        hw = 1.959963984540054 * math.sqrt(p * (1 - p) / trials)
        curve.append(ProbePoint(factor, float(np.mean(ratios)), p, hw, trials))
    return curve
