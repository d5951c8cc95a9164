"""Re-checking emitted datasets against the invariants their factories promise."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping, Optional

from .episode import GroundingSample, click_to_root, is_click_correct
from .geometry import FrameChain, GeometryError, ImageSize, contains_region, iou, to_root_frame
from .jsonl import read_jsonl
from .policy import Click, Crop, PolicyError, PromptKind, parse_action
from .synthesis import ORIGIN_FAILURE

SFT, DPO, MULTISTEP = "sft", "dpo", "multistep"


@dataclass
class Violation:
    line: int
    sample_id: Optional[str]
    reasons: list[str] = field(default_factory=list)

    def __str__(self) -> str:
        return f"line {self.line} ({self.sample_id}): " + "; ".join(self.reasons)


def record_kind(rec: dict) -> str:
    if "chosen" in rec:
        return DPO
    if (rec.get("provenance") or {}).get("origin") == ORIGIN_FAILURE:
        return MULTISTEP
    return SFT


def _same_chain(a: FrameChain, b: FrameChain) -> bool:
    if a.crops != b.crops or len(a.scales) != len(b.scales):
        return False
    pairs = list(zip(a.scales, b.scales)) + [(a.root_scale, b.root_scale)]
    return all(math.isclose(x, y, rel_tol=1e-12) for s, t in pairs for x, y in zip(s, t))


def _text(turn: dict) -> str:
    content = turn.get("content")
    if isinstance(content, str):
        return content
    return "".join(p.get("text", "") for p in content if p.get("type") == "text")


def _image_part(turn: dict) -> Optional[dict]:
    content = turn.get("content")
    if isinstance(content, list):
        for p in content:
            if p.get("type") == "image":
                return p
    return None


def check_conversation_record(rec: dict, sample: Optional[GroundingSample] = None, multistep: bool = False) -> list[str]:
    """Replay a conversation record; return the list of problems found."""
    problems: list[str] = []
    try:
        root = ImageSize(*rec["root_size"])
        label = rec["label_click"]
        turns = rec["conversation"]
    except (KeyError, TypeError, GeometryError) as exc:
        return [f"malformed record: {exc}"]
    if not turns or len(turns) % 2:
        return ["conversation must be non-empty user/assistant pairs"]
    expected_chain: Optional[FrameChain] = None
    actions = []
    chains = []
    for i in range(0, len(turns), 2):
        user, assistant = turns[i], turns[i + 1]
        if user.get("role") != "user" or assistant.get("role") != "assistant":
            return [f"turn {i}: roles must alternate user/assistant"]
        part = _image_part(user)
        if part is None:
            return [f"turn {i}: user turn has no image reference"]
        chain = FrameChain.from_dict(part["frame_chain"])
        presented = ImageSize(*part["presented_size"])
        if expected_chain is not None:
            rebuilt = expected_chain.push(actions[-1].region, presented)
            if not _same_chain(rebuilt, chain):
                problems.append(f"turn {i}: frame chain not derivable from previous crop")
        elif chain.crops:
            problems.append("first view must be the root screenshot")
        if chain.view_size(root) != presented:
            problems.append(f"turn {i}: presented size {presented.as_list()} disagrees with frame chain")
        last = i + 2 == len(turns)
        kind = PromptKind.CLICK if last else PromptKind.CROP
        try:
            action = parse_action(_text(assistant), kind, presented)
        except (PolicyError, GeometryError) as exc:
            return problems + [f"turn {i + 1}: {type(exc).__name__}: {exc}"]
        actions.append(action)
        chains.append(chain)
        expected_chain = chain
    click = actions[-1]
    assert isinstance(click, Click)
    root_click = click_to_root(chains[-1], click.point, root)
    if root_click.as_list() != list(label):
        problems.append(f"label_click {list(label)} != replayed click {root_click.as_list()}")
    n_crops = sum(isinstance(a, Crop) for a in actions)
    if multistep:
        prov = rec.get("provenance") or {}
        if n_crops < 2:
            problems.append(f"multi-step record has {n_crops} crop turns")
        if prov.get("corrected") is not True:
            problems.append("provenance.corrected must be true")
    if sample is not None:
        if sample.instruction != rec.get("instruction"):
            problems.append("instruction differs from manifest")
        if not is_click_correct(root_click, sample):
            problems.append("replayed click misses the ground-truth box")
        if multistep and n_crops:
            first = to_root_frame(chains[0], actions[0].region, root)
            if not contains_region(first, sample.gt_bbox):
                problems.append("first crop does not contain the ground-truth box")
    return problems


def check_dpo_record(rec: dict, delta: int, tau: float) -> list[str]:
    problems: list[str] = []
    try:
        N = int(rec["N"])
        n_c, n_r = int(rec["n_correct_chosen"]), int(rec["n_correct_rejected"])
        margin, r_div = rec["margin"], float(rec["r_div"])
        ctx = rec["context"]
        presented = ImageSize(*ctx["presented_size"])
        chosen = parse_action(rec["chosen"]["action"], PromptKind.CROP, presented)
        rejected = parse_action(rec["rejected"]["action"], PromptKind.CROP, presented)
    except (KeyError, TypeError, ValueError, PolicyError) as exc:
        return [f"malformed record: {type(exc).__name__}: {exc}"]
    if N < 1:
        problems.append(f"N={N} < 1")
    for name, n in (("chosen", n_c), ("rejected", n_r)):
        if not 0 <= n <= N:
            problems.append(f"{name} count {n} outside [0, {N}]")
        turn = rec[name]
        if turn.get("n_correct") not in (None, n):
            problems.append(f"{name}.n_correct disagrees with n_correct_{name}")
        if "r_acc" in turn and not math.isclose(turn["r_acc"], n / N, abs_tol=1e-12):
            problems.append(f"{name}.r_acc inconsistent with counts")
    if margin != n_c - n_r:
        problems.append(f"margin {margin} != {n_c} - {n_r}")
    if n_c - n_r < delta or margin < delta:
        problems.append(f"margin below delta={delta}")
    if n_c <= n_r:
        problems.append("chosen does not outscore rejected")
    actual = iou(chosen.region, rejected.region)
    if not math.isclose(actual, r_div, abs_tol=1e-9):
        problems.append(f"r_div {r_div} != IoU of crops {actual:.6f}")
    if max(actual, r_div) >= tau:
        problems.append(f"r_div not below tau={tau}")
    return problems


def validate_records(
    path,
    *,
    samples: Optional[Mapping[str, GroundingSample]] = None,
    delta: int = 4,
    tau: float = 0.8,
) -> tuple[int, list[Violation]]:
    """Validate every line of a dataset file. Returns (records_checked, violations)."""
    violations = []
    n = 0
    for line, rec in read_jsonl(path):
        n += 1
        sid = rec.get("sample_id")
        kind = record_kind(rec)
        if kind == DPO:
            problems = check_dpo_record(rec, delta, tau)
        else:
            sample = samples.get(sid) if samples is not None else None
            problems = check_conversation_record(rec, sample, multistep=kind == MULTISTEP)
            if samples is not None and sample is None:
                problems.append("sample id not in manifest")
        if problems:
            violations.append(Violation(line, sid, problems))
    return n, violations
