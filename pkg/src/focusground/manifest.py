"""Benchmark manifests: one grounding sample per JSON line.

Row schema::

    {"id": str, "image": str, "width": int, "height": int,
     "instruction": str, "bbox": [x, y, w, h], "click": [x, y] (optional),
     "domain": str, "element_type": "text" | "icon"}

Image paths are relative to the manifest's directory unless absolute.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator

import jsonschema

from .episode import GroundingSample
from .geometry import ImageSize, Point, Region, contains_point, contains_region

ROW_SCHEMA = {
    "type": "object",
    "required": ["id", "image", "width", "height", "instruction", "bbox", "domain", "element_type"],
    "properties": {
        "id": {"type": "string", "minLength": 1},
        "image": {"type": "string", "minLength": 1},
        "width": {"type": "integer", "minimum": 1},
        "height": {"type": "integer", "minimum": 1},
        "instruction": {"type": "string"},
        "bbox": {"type": "array", "items": {"type": "integer"}, "minItems": 4, "maxItems": 4},
        "click": {"type": ["array", "null"], "items": {"type": "integer"}, "minItems": 2, "maxItems": 2},
        "domain": {"type": "string"},
        "element_type": {"enum": ["text", "icon"]},
        "step_hint": {"type": ["integer", "null"]},
    },
}
_VALIDATOR = jsonschema.Draft7Validator(ROW_SCHEMA)


class ManifestError(ValueError):
    pass


class SchemaError(ManifestError):
    def __init__(self, line: int, message: str):
        super().__init__(f"line {line}: {message}")
        self.line = line


class MissingImage(ManifestError):
    def __init__(self, paths: list[str]):
        super().__init__("unresolved image paths: " + ", ".join(paths))
        self.paths = paths


@dataclass
class Manifest:
    entries: list[GroundingSample]
    root: Path

    def __iter__(self) -> Iterator[GroundingSample]:
        return iter(self.entries)

    def __len__(self) -> int:
        return len(self.entries)

    def by_id(self) -> dict[str, GroundingSample]:
        return {s.id: s for s in self.entries}

    def resolve(self, sample: GroundingSample) -> Path:
        p = Path(sample.image)
        return p if p.is_absolute() else self.root / p

    def with_resolved_images(self) -> list[GroundingSample]:
        """Samples whose ``image`` is an absolute path (for pixel-level policies)."""
        from dataclasses import replace

        return [replace(s, image=str(self.resolve(s))) for s in self.entries]


def sample_to_row(s: GroundingSample) -> dict:
    row = {
        "id": s.id,
        "image": s.image,
        "width": s.size.width,
        "height": s.size.height,
        "instruction": s.instruction,
        "bbox": s.gt_bbox.as_list(),
        "domain": s.domain,
        "element_type": s.element_type,
    }
    if s.gt_click is not None:
        row["click"] = s.gt_click.as_list()
    if s.step_hint is not None:
        row["step_hint"] = s.step_hint
    return row


def row_to_sample(row: dict, line: int = 0) -> GroundingSample:
    errors = sorted(_VALIDATOR.iter_errors(row), key=lambda e: list(e.path))
    if errors:
        e = errors[0]
        where = "/".join(str(p) for p in e.path) or "<row>"
        raise SchemaError(line, f"{where}: {e.message}")
    size = ImageSize(row["width"], row["height"])
    bbox = Region(*row["bbox"])
    if bbox.w <= 0 or bbox.h <= 0:
        raise SchemaError(line, f"bbox {row['bbox']} has no area")
    if not contains_region(size.full_region(), bbox):
        raise SchemaError(line, f"bbox {row['bbox']} extends past the {size.width}x{size.height} image")
    click = Point(*row["click"]) if row.get("click") else None
    if click is not None and not contains_point(bbox, click):
        raise SchemaError(line, f"click {row['click']} outside bbox")
    return GroundingSample(
        id=row["id"],
        image=row["image"],
        size=size,
        instruction=row["instruction"],
        gt_bbox=bbox,
        gt_click=click,
        domain=row["domain"],
        element_type=row["element_type"],
        step_hint=row.get("step_hint"),
    )


def load_manifest(path, check_images: bool = True) -> Manifest:
    path = Path(path)
    entries: list[GroundingSample] = []
    seen: dict[str, int] = {}
    with open(path, encoding="utf-8") as fh:
        for n, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                row = json.loads(line)
            except json.JSONDecodeError as exc:
                raise SchemaError(n, f"invalid JSON: {exc.msg}") from exc
            sample = row_to_sample(row, n)
            if sample.id in seen:
                raise SchemaError(n, f"duplicate id {sample.id!r} (first seen on line {seen[sample.id]})")
            seen[sample.id] = n
            entries.append(sample)
    manifest = Manifest(entries, path.parent)
    if check_images:
        missing = [s.image for s in entries if not manifest.resolve(s).exists()]
        if missing:
            raise MissingImage(missing)
    return manifest


def convert_screenspot_row(row: dict, id_prefix: str = "ss") -> dict:
    """Field mapping from a ScreenSpot-style annotation to a manifest row.

    Expects ``img_filename``, ``instruction``, ``bbox`` as ``[x1, y1, x2, y2]``,
    ``img_size`` as ``[w, h]``, ``data_type`` (text/icon) and a group/platform
    field used as domain. Adjust here if a benchmark release uses other keys
    or another hit criterion.
    """
    x1, y1, x2, y2 = (int(round(v)) for v in row["bbox"])
    w, h = row["img_size"]
    return {
        "id": str(row.get("id") or f"{id_prefix}-{Path(row['img_filename']).stem}-{x1}-{y1}"),
        "image": row["img_filename"],
        "width": int(w),
        "height": int(h),
        "instruction": row["instruction"],
        "bbox": [x1, y1, x2 - x1, y2 - y1],
        "domain": str(row.get("group") or row.get("platform") or row.get("data_source") or "default").lower(),
        "element_type": "icon" if row.get("data_type", "text") == "icon" else "text",
    }
