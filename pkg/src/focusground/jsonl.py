"""JSON-lines reading/writing and provenance sidecars."""

from __future__ import annotations

import json
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Iterator, Optional


def dumps(obj: Any) -> str:
    return json.dumps(obj, ensure_ascii=False, separators=(",", ":"))


def read_jsonl(path) -> Iterator[tuple[int, dict]]:
    """Yield ``(line_number, record)``; blank lines are skipped."""
    with open(path, encoding="utf-8") as fh:
        for n, line in enumerate(fh, start=1):
            if line.strip():
                yield n, json.loads(line)


def write_jsonl(path, records: Iterable[dict]) -> int:
    n = 0
    with JsonlSink(path) as sink:
        for rec in records:
            sink.write(rec)
            n += 1
    return n


class JsonlSink:
    """Append-only JSON-lines writer, flushed per record."""

    def __init__(self, path, mode: str = "w"):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self._fh = open(self.path, mode, encoding="utf-8")
        self.count = 0

    def write(self, record: dict):
        self._fh.write(dumps(record) + "\n")
        self._fh.flush()
        self.count += 1

    def close(self):
        self._fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


@dataclass
class YieldStats:
    attempted: int = 0
    kept: int = 0
    skipped: int = 0
    error_counts: Counter = field(default_factory=Counter)

    def merge(self, other: "YieldStats"):
        self.attempted += other.attempted
        self.kept += other.kept
        self.skipped += other.skipped
        self.error_counts.update(other.error_counts)

    def to_dict(self) -> dict:
        return {
            "attempted": self.attempted,
            "kept": self.kept,
            "skipped": self.skipped,
            "error_counts": dict(sorted(self.error_counts.items())),
        }


def sidecar_path(path) -> Path:
    p = Path(path)
    return p.with_name(p.name + ".stats.json")


def write_sidecar(path, stats: Optional[dict], config: Optional[dict], complete: bool = True, **extra) -> Path:
    out = sidecar_path(path)
    body = {"complete": complete}
    if stats is not None:
        body.update(stats)
    body.update(extra)
    body["config"] = config
    out.write_text(json.dumps(body, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return out
