"""Command-line entry point: one subcommand per pipeline stage.

Exit codes: 0 success, 1 configuration/usage error, 2 runtime failure
(including data files that fail validation).
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import sys
from contextlib import contextmanager
from pathlib import Path
from typing import Optional, Sequence

from .config import ConfigError, PipelineConfig, load_config, override_fields
from .episode import GroundingSample
from .evaluate import evaluate
from .jsonl import JsonlSink, YieldStats, write_sidecar
from .manifest import ManifestError, load_manifest
from .oracle import OraclePolicy, World, world_from_sample
from .policy import PromptTemplates, RemotePolicy
from .simenv import ConfigError as SimConfigError, generate_screens, load_screens, probe_region_prior, write_sim_dataset
from .synthesis import (
    DpoConfig,
    MultiStepConfig,
    SftConfig,
    build_dpo,
    build_multistep,
    build_multistep_dpo,
    build_sft,
    collect_failures,
    one_step_records,
    run_single_crop,
)
from .validation import validate_records

logger = logging.getLogger("focusground")

SUBCOMMANDS = (
    "gen-sim",
    "synthesize-sft",
    "synthesize-dpo",
    "synthesize-multistep",
    "evaluate",
    "probe",
    "validate-data",
)


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _add_overrides(p: argparse.ArgumentParser):
    g = p.add_argument_group("config overrides")
    for dotted, _ in override_fields():
        dashed = dotted.replace("_", "-")
        flags = [f"--{dashed}"] + ([f"--{dotted}"] if dashed != dotted else [])
        g.add_argument(*flags, dest=f"ov:{dotted}", default=argparse.SUPPRESS, metavar="VALUE")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="focusground", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)
    sub.required = True
    for name in SUBCOMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="YAML config file")
        if name == "gen-sim":
            p.add_argument("--out", required=True, help="output directory")
            p.add_argument("--no-render", action="store_true", help="skip writing PNGs")
        elif name == "validate-data":
            p.add_argument("file")
            p.add_argument("--manifest", help="re-judge records against this manifest")
        else:
            p.add_argument("--manifest", help="JSON-lines manifest")
            p.add_argument("--screens", help="simulated screen file for the oracle (default: next to manifest)")
            p.add_argument("--no-image-check", action="store_true", help="do not require image files to exist")
            if name == "evaluate":
                p.add_argument("--out-dir", default="eval_out")
            elif name == "probe":
                p.add_argument("--out-dir", default="probe_out")
            else:
                p.add_argument("--out", required=False, help="output JSON-lines file")
        _add_overrides(p)
    return parser


def _overrides(ns: argparse.Namespace) -> dict:
    return {k.split(":", 1)[1]: v for k, v in vars(ns).items() if k.startswith("ov:")}


# -- helpers -----------------------------------------------------------------


def _load_samples(ns, cfg: PipelineConfig) -> tuple[list[GroundingSample], Path]:
    if not ns.manifest:
        raise UsageError("--manifest is required")
    manifest = load_manifest(ns.manifest, check_images=not ns.no_image_check)
    samples = manifest.with_resolved_images() if cfg.policy == "remote" else manifest.entries
    return samples, Path(ns.manifest)


def make_policy(cfg: PipelineConfig, samples: Sequence[GroundingSample], screens: Optional[str], manifest: Path):
    if cfg.policy == "remote":
        return RemotePolicy(cfg.endpoint, PromptTemplates.load(cfg.crop_prompt, cfg.click_prompt))
    screens_path = Path(screens) if screens else manifest.parent / "screens.jsonl"
    worlds: dict[str, World] = {}
    if screens_path.exists():
        worlds = {k: s.world() for k, s in load_screens(screens_path).items()}
    elif screens:
        raise FileNotFoundError(f"screen file {screens} not found")
    by_id = {s.id: s for s in samples}
    for sid, s in by_id.items():
        worlds.setdefault(sid, world_from_sample(s))
    return OraclePolicy(worlds, cfg.oracle, seed=cfg.seed)


def _templates(cfg: PipelineConfig) -> PromptTemplates:
    return PromptTemplates.load(cfg.crop_prompt, cfg.click_prompt)


@contextmanager
def _output(path: Path, cfg: PipelineConfig, stats: YieldStats, **extra):
    """JSON-lines sink whose sidecar records completeness even on interrupt."""
    sink = JsonlSink(path)
    try:
        yield sink
    except KeyboardInterrupt:
        sink.close()
        write_sidecar(path, stats.to_dict(), cfg.to_dict(), complete=False, **extra)
        raise
    sink.close()
    write_sidecar(path, stats.to_dict(), cfg.to_dict(), complete=True, **extra)


def _stream(records, sink: JsonlSink, every: int, label: str):
    for rec in records:
        sink.write(rec.to_dict())
        if every and sink.count % every == 0:
            logger.info("%s: %d records written", label, sink.count)


def _default_out(ns, name: str) -> Path:
    return Path(ns.out) if getattr(ns, "out", None) else Path(ns.manifest).parent / name


# -- subcommands -------------------------------------------------------------


def cmd_gen_sim(ns, cfg: PipelineConfig) -> int:
    sim = cfg.sim.to_config()
    try:
        sim.validate()
    except SimConfigError as exc:
        raise ConfigError(str(exc)) from exc
    pairs = generate_screens(sim, cfg.sim.n, seed=cfg.seed)
    manifest = write_sim_dataset(pairs, ns.out, render=not ns.no_render)
    write_sidecar(manifest, {"screens": len(pairs)}, cfg.to_dict())
    print(f"wrote {len(pairs)} screens to {manifest}")
    return 0


def cmd_synthesize_sft(ns, cfg: PipelineConfig) -> int:
    samples, mpath = _load_samples(ns, cfg)
    policy = make_policy(cfg, samples, ns.screens, mpath)
    out = _default_out(ns, "d_sft.jsonl")
    scfg = SftConfig(cfg.rollouts_per_sample, cfg.max_keep_per_sample, cfg.episode(synthesis=True))
    stats = YieldStats()
    with _output(out, cfg, stats) as sink:
        recs = build_sft(samples, policy, scfg, templates=_templates(cfg), stats=stats, workers=cfg.workers)
        _stream(recs, sink, cfg.progress_every, "sft")
    print(f"kept {stats.kept} of {stats.attempted} rollouts -> {out}")
    return 0


def _dpo_config(cfg: PipelineConfig) -> DpoConfig:
    return DpoConfig(
        pairs_per_sample=cfg.pairs_per_sample,
        n_candidates=cfg.n_candidates,
        N=cfg.N,
        delta=cfg.delta,
        tau=cfg.tau,
        episode=cfg.episode(synthesis=True),
    )


def cmd_synthesize_dpo(ns, cfg: PipelineConfig) -> int:
    samples, mpath = _load_samples(ns, cfg)
    policy = make_policy(cfg, samples, ns.screens, mpath)
    out = _default_out(ns, "d_dpo.jsonl")
    stats = YieldStats()
    with _output(out, cfg, stats) as sink:
        pairs = build_dpo(samples, policy, _dpo_config(cfg), templates=_templates(cfg), stats=stats, workers=cfg.workers)
        _stream(pairs, sink, cfg.progress_every, "dpo")
    print(f"{stats.kept} pairs from {stats.attempted} samples ({stats.skipped} skipped) -> {out}")
    return 0


def cmd_synthesize_multistep(ns, cfg: PipelineConfig) -> int:
    samples, mpath = _load_samples(ns, cfg)
    policy = make_policy(cfg, samples, ns.screens, mpath)
    out = _default_out(ns, "d_multistep.jsonl")
    templates = _templates(cfg)
    ep = cfg.episode(synthesis=True)
    trajs = run_single_crop(samples, policy, ep, workers=cfg.workers)
    failures = list(collect_failures(trajs, samples))
    single = {"attempted": len(trajs), "correct": sum(t.correct for t in trajs), "failures": len(failures)}
    mcfg = MultiStepConfig(cfg.multistep_max_crops, cfg.multistep_rollouts, ep)
    stats = YieldStats()
    with _output(out, cfg, stats, single_step=single) as sink:
        records = list(build_multistep(failures, policy, mcfg, templates=templates, stats=stats, workers=cfg.workers))
        _stream(records, sink, cfg.progress_every, "multistep")
    if cfg.mix_one_step:
        combined = out.with_name(out.stem + ".combined.jsonl")
        mixed = YieldStats(attempted=len(trajs), kept=single["correct"] + len(records))
        with _output(combined, cfg, mixed) as sink:
            _stream(one_step_records(trajs, samples, templates), sink, 0, "combined")
            _stream(records, sink, 0, "combined")
    if cfg.multistep_dpo:
        dpo_out = out.with_name(out.stem + ".dpo.jsonl")
        dstats = YieldStats()
        with _output(dpo_out, cfg, dstats) as sink:
            pairs = build_multistep_dpo(failures, policy, _dpo_config(cfg), templates=templates, stats=dstats, workers=cfg.workers)
            _stream(pairs, sink, cfg.progress_every, "multistep-dpo")
    print(f"{len(failures)} failures, {stats.kept} corrected -> {out}")
    return 0


def cmd_evaluate(ns, cfg: PipelineConfig) -> int:
    samples, mpath = _load_samples(ns, cfg)
    policy = make_policy(cfg, samples, ns.screens, mpath)
    out_dir = Path(ns.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    ep = cfg.episode()
    with JsonlSink(out_dir / "trajectories.jsonl") as sink:
        report, _ = evaluate(policy, samples, ep, workers=cfg.workers, sink=sink)
    report.config = cfg.to_dict()
    report.write(out_dir)
    sys.stdout.write(report.format_table())
    return 0


def cmd_probe(ns, cfg: PipelineConfig) -> int:
    samples, mpath = _load_samples(ns, cfg)
    policy = make_policy(cfg, samples, ns.screens, mpath)
    curve = probe_region_prior(policy, samples, cfg.probe_factors, cfg.probe_trials, cfg.episode(max_steps=1))
    out_dir = Path(ns.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rows = [p.to_dict() for p in curve]
    with open(out_dir / "probe.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]))
        w.writeheader()
        w.writerows(rows)
    (out_dir / "probe.json").write_text(
        json.dumps({"curve": rows, "config": cfg.to_dict()}, indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )
    for p in curve:
        f = "inf" if math.isinf(p.factor) else f"{p.factor:g}"
        print(f"factor {f:>5}  area {p.area_ratio:.4f}  acc {p.accuracy:.3f} +/- {p.half_width:.3f}")
    return 0


def cmd_validate_data(ns, cfg: PipelineConfig) -> int:
    samples = load_manifest(ns.manifest, check_images=False).by_id() if ns.manifest else None
    n, violations = validate_records(ns.file, samples=samples, delta=cfg.delta, tau=cfg.tau)
    for v in violations:
        print(v)
    print(f"{n} records checked, {len(violations)} violation(s)")
    return 2 if violations else 0


COMMANDS = {
    "gen-sim": cmd_gen_sim,
    "synthesize-sft": cmd_synthesize_sft,
    "synthesize-dpo": cmd_synthesize_dpo,
    "synthesize-multistep": cmd_synthesize_multistep,
    "evaluate": cmd_evaluate,
    "probe": cmd_probe,
    "validate-data": cmd_validate_data,
}


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        ns = parser.parse_args(argv)
        logging.basicConfig(level=logging.INFO if ns.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
        cfg = load_config(ns.config, _overrides(ns))
        return COMMANDS[ns.command](ns, cfg)
    except (UsageError, ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except KeyboardInterrupt:
        print("interrupted; partial outputs flushed", file=sys.stderr)
        return 2
    except (ManifestError, OSError, ValueError, RuntimeError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
