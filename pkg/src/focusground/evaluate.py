"""Grounding accuracy reports in the domain x element-type layout."""

from __future__ import annotations

import csv
import math
import json
from collections import Counter, defaultdict
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Optional, Sequence

from .episode import EpisodeConfig, GroundingSample, Trajectory, run_episodes
from .geometry import area_ratio, respects_pixel_budget, to_root_frame
from .jsonl import JsonlSink
from .policy import Policy

TYPES = ("text", "icon")


def final_area_ratio(traj: Trajectory, sample: GroundingSample) -> float:
    """Area of the last view before deciding, as a fraction of the screenshot."""
    chain = traj.final_view()
    if chain is None or not chain.crops:
        return 1.0
    region = to_root_frame(chain, chain.view_size(sample.size).full_region(), sample.size)
    return area_ratio(region, sample.size)


def budget_violations(traj: Trajectory, sample: GroundingSample, min_pixels: int, max_pixels: int) -> int:
    bad = 0
    for step in traj.steps:
        native = step.chain.crops[-1].size if step.chain.crops else sample.size
        if not respects_pixel_budget(native, step.presented_size, min_pixels, max_pixels):
            bad += 1
    return bad


@dataclass
class EvalReport:
    cells: dict[tuple[str, str], list[int]] = field(default_factory=dict)  # (domain, type) -> [n, correct]
    mean_final_area_ratio: float = 1.0
    step_histogram: dict[int, list[int]] = field(default_factory=dict)  # crops -> [correct, wrong]
    stop_reasons: dict[str, int] = field(default_factory=dict)
    budget_violations: int = 0
    config: Optional[dict] = None

    @property
    def n(self) -> int:
        return sum(c[0] for c in self.cells.values())

    @property
    def n_correct(self) -> int:
        return sum(c[1] for c in self.cells.values())

    @property
    def overall(self) -> float:
        return self.n_correct / self.n if self.n else 0.0

    def cell_accuracy(self, domain: str, etype: str) -> Optional[float]:
        c = self.cells.get((domain, etype))
        return c[1] / c[0] if c and c[0] else None

    def type_average(self, etype: str) -> Optional[float]:
        n = sum(c[0] for (d, t), c in self.cells.items() if t == etype)
        k = sum(c[1] for (d, t), c in self.cells.items() if t == etype)
        return k / n if n else None

    @property
    def domains(self) -> list[str]:
        return sorted({d for d, _ in self.cells})

    def to_dict(self) -> dict:
        return {
            "n": self.n,
            "overall": self.overall,
            "by_type": {t: self.type_average(t) for t in TYPES},
            "cells": [
                {"domain": d, "element_type": t, "n": c[0], "correct": c[1], "accuracy": c[1] / c[0]}
                for (d, t), c in sorted(self.cells.items())
            ],
            "mean_final_area_ratio": self.mean_final_area_ratio,
            "step_histogram": {str(k): {"correct": v[0], "wrong": v[1]} for k, v in sorted(self.step_histogram.items())},
            "stop_reasons": dict(sorted(self.stop_reasons.items())),
            "budget_violations": self.budget_violations,
            "config": self.config,
        }

    def format_table(self) -> str:
        def pct(v):
            return "   -" if v is None else f"{100 * v:5.1f}"

        header = f"{'domain':<12} {'text':>6} {'icon':>6} {'n':>6}"
        lines = [header, "-" * len(header)]
        for d in self.domains:
            n = sum(self.cells.get((d, t), [0, 0])[0] for t in TYPES)
            lines.append(f"{d:<12} {pct(self.cell_accuracy(d, 'text')):>6} {pct(self.cell_accuracy(d, 'icon')):>6} {n:>6}")
        lines.append("-" * len(header))
        lines.append(f"{'avg':<12} {pct(self.type_average('text')):>6} {pct(self.type_average('icon')):>6} {self.n:>6}")
        lines.append(f"overall accuracy      {pct(self.overall)}")
        lines.append(f"final region / image  {self.mean_final_area_ratio:.3f}")
        for k, (ok, bad) in sorted(self.step_histogram.items()):
            lines.append(f"crops={k}: correct {ok}, wrong {bad}")
        return "\n".join(lines) + "\n"

    def write(self, out_dir) -> dict[str, Path]:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        paths = {"json": out / "report.json", "table": out / "report.txt", "steps": out / "steps.csv"}
        paths["json"].write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8")
        paths["table"].write_text(self.format_table(), encoding="utf-8")
        with open(paths["steps"], "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["crops", "correct", "wrong"])
            for k, (ok, bad) in sorted(self.step_histogram.items()):
                w.writerow([k, ok, bad])
        return paths


def build_report(
    trajectories: Sequence[Trajectory], samples: Sequence[GroundingSample], cfg: EpisodeConfig
) -> EvalReport:
    index = {s.id: s for s in samples}
    cells: dict[tuple[str, str], list[int]] = defaultdict(lambda: [0, 0])
    hist: dict[int, list[int]] = defaultdict(lambda: [0, 0])
    reasons: Counter = Counter()
    ratios = []
    violations = 0
    for traj in trajectories:
        s = index[traj.sample_id]
        cell = cells[(s.domain, s.element_type)]
        cell[0] += 1
        cell[1] += traj.correct
        hist[traj.crop_count][0 if traj.correct else 1] += 1
        reasons[traj.stop_reason.value] += 1
        ratios.append(final_area_ratio(traj, s))
        violations += budget_violations(traj, s, cfg.min_pixels, cfg.max_pixels)
    return EvalReport(
        cells=dict(cells),
        mean_final_area_ratio=sum(ratios) / len(ratios) if ratios else 1.0,
        step_histogram=dict(hist),
        stop_reasons=dict(reasons),
        budget_violations=violations,
    )


def evaluate(
    policy: Policy,
    samples: Iterable[GroundingSample],
    cfg: EpisodeConfig,
    *,
    workers: int = 1,
    sink: Optional[JsonlSink] = None,
) -> tuple[EvalReport, list[Trajectory]]:
    """One episode per sample; failures count as misses and never abort the run."""
    samples = list(samples)
    trajs = run_episodes(policy, samples, cfg, workers=workers)
    if sink is not None:
        for t in trajs:
            sink.write(t.to_dict())
    return build_report(trajs, samples, cfg), trajs


def ablate_min_pixels(
    policy: Policy,
    samples: Sequence[GroundingSample],
    cfg: EpisodeConfig,
    values: Sequence[int],
    *,
    workers: int = 1,
) -> list[tuple[int, int, EvalReport]]:
    """Evaluate at each ``min_pixels``.

    When a value reaches ``max_pixels`` the ceiling is raised to 1% above it:
    an exact pixel count is rarely reachable at a fixed aspect ratio, so a
    budget with ``min == max`` would be unsatisfiable.

    Returns ``(min_pixels, max_pixels_used, report)`` per value.
    """
    out = []
    for v in values:
        ceiling = cfg.max_pixels if v < cfg.max_pixels else math.ceil(v * 1.01)
        run_cfg = replace(cfg, min_pixels=v, max_pixels=ceiling)
        report, _ = evaluate(policy, samples, run_cfg, workers=workers)
        out.append((v, run_cfg.max_pixels, report))
    return out
