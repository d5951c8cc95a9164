"""Integer-pixel rectangle algebra and crop-frame bookkeeping.

Regions are ``(x, y, w, h)`` with the origin at the top-left. Points use a
half-open containment test; region nesting uses closed edges.

A :class:`FrameChain` records how the current view was derived from the
root screenshot: a sequence of crops, each expressed in the coordinates of
the view it was cut from *as presented to the policy* (i.e. after any
pixel-budget resize), plus the presentation scale of every view.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Sequence, Union

__all__ = [
    "GeometryError",
    "DegenerateRegion",
    "FrameMismatch",
    "Point",
    "Region",
    "ImageSize",
    "FrameChain",
    "round_half_away",
    "iou",
    "contains_point",
    "contains_region",
    "clamp_to_frame",
    "to_root_frame",
    "to_local_frame",
    "resize_for_pixel_budget",
    "respects_pixel_budget",
    "area_ratio",
]

_EPS = 1e-9


class GeometryError(ValueError):
    pass


class DegenerateRegion(GeometryError):
    """A region collapsed to zero (or negative) width or height."""


class FrameMismatch(GeometryError):
    """Coordinates do not lie inside the frame they claim to belong to."""


def round_half_away(v: float) -> int:
    """Round to the nearest integer, ties away from zero."""
    return int(math.copysign(math.floor(abs(v) + 0.5), v))


@dataclass(frozen=True)
class Point:
    x: int
    y: int

    def as_list(self) -> list[int]:
        return [self.x, self.y]


@dataclass(frozen=True)
class Region:
    x: int
    y: int
    w: int
    h: int

    @property
    def x2(self) -> int:
        return self.x + self.w

    @property
    def y2(self) -> int:
        return self.y + self.h

    @property
    def area(self) -> int:
        return max(self.w, 0) * max(self.h, 0)

    @property
    def center(self) -> Point:
        return Point(self.x + self.w // 2, self.y + self.h // 2)

    @property
    def size(self) -> "ImageSize":
        return ImageSize(self.w, self.h)

    @classmethod
    def from_corners(cls, x1: int, y1: int, x2: int, y2: int) -> "Region":
        return cls(x1, y1, x2 - x1, y2 - y1)

    def intersection(self, other: "Region") -> "Region | None":
        x1, y1 = max(self.x, other.x), max(self.y, other.y)
        x2, y2 = min(self.x2, other.x2), min(self.y2, other.y2)
        if x2 <= x1 or y2 <= y1:
            return None
        return Region(x1, y1, x2 - x1, y2 - y1)

    def scaled_about_center(self, factor: float) -> "Region":
        """Grow (or shrink) both sides by ``factor`` keeping the center fixed."""
        cx, cy = self.x + self.w / 2, self.y + self.h / 2
        w, h = self.w * factor, self.h * factor
        x1, y1 = round_half_away(cx - w / 2), round_half_away(cy - h / 2)
        x2, y2 = round_half_away(cx + w / 2), round_half_away(cy + h / 2)
        return Region(x1, y1, max(x2 - x1, 1), max(y2 - y1, 1))

    def as_list(self) -> list[int]:
        return [self.x, self.y, self.w, self.h]


@dataclass(frozen=True)
class ImageSize:
    width: int
    height: int

    def __post_init__(self):
        if self.width < 1 or self.height < 1:
            raise GeometryError(f"image size must be positive, got {self.width}x{self.height}")

    @property
    def pixels(self) -> int:
        return self.width * self.height

    def full_region(self) -> Region:
        return Region(0, 0, self.width, self.height)

    def as_list(self) -> list[int]:
        return [self.width, self.height]


Scale = tuple[float, float]


def _as_scale(s: Union[float, Sequence[float]]) -> Scale:
    if isinstance(s, (int, float)):
        return (float(s), float(s))
    sx, sy = s
    return (float(sx), float(sy))


@dataclass(frozen=True)
class FrameChain:
    """Crop history of a view.

    ``crops[i]`` lives in the presented coordinates of view ``i`` (view 0 is
    the root screenshot). ``scales[i]`` is the per-axis presentation scale of
    the view produced by ``crops[i]``; ``root_scale`` is the presentation
    scale of the root screenshot itself. Missing scales default to 1.
    """

    crops: tuple[Region, ...] = ()
    scales: tuple[Scale, ...] = ()
    root_scale: Scale = (1.0, 1.0)

    def __post_init__(self):
        crops = tuple(self.crops)
        scales = tuple(_as_scale(s) for s in self.scales)
        if len(scales) > len(crops):
            raise GeometryError("more scales than crops in frame chain")
        scales = scales + ((1.0, 1.0),) * (len(crops) - len(scales))
        object.__setattr__(self, "crops", crops)
        object.__setattr__(self, "scales", scales)
        object.__setattr__(self, "root_scale", _as_scale(self.root_scale))

    def __len__(self) -> int:
        return len(self.crops)

    @classmethod
    def for_root(cls, native: ImageSize, presented: ImageSize) -> "FrameChain":
        return cls(root_scale=(presented.width / native.width, presented.height / native.height))

    def push(self, crop: Region, presented: ImageSize) -> "FrameChain":
        """Return a new chain with ``crop`` appended, shown at ``presented`` size."""
        scale = (presented.width / crop.w, presented.height / crop.h)
        return FrameChain(self.crops + (crop,), self.scales + (scale,), self.root_scale)

    def concat(self, inner: "FrameChain") -> "FrameChain":
        """Chain ``inner`` (rooted at this chain's innermost view) below this one."""
        if inner.root_scale != self.view_scale:
            raise FrameMismatch("inner chain root scale does not match outer view scale")
        return FrameChain(self.crops + inner.crops, self.scales + inner.scales, self.root_scale)

    def prefix(self, n: int) -> "FrameChain":
        return FrameChain(self.crops[:n], self.scales[:n], self.root_scale)

    @property
    def view_scale(self) -> Scale:
        return self.scales[-1] if self.crops else self.root_scale

    def view_size(self, root: ImageSize) -> ImageSize:
        """Presented size of the innermost view."""
        if self.crops:
            c, (sx, sy) = self.crops[-1], self.scales[-1]
            return ImageSize(round_half_away(c.w * sx), round_half_away(c.h * sy))
        sx, sy = self.root_scale
        return ImageSize(round_half_away(root.width * sx), round_half_away(root.height * sy))

    def to_dict(self) -> dict:
        return {
            "crops": [c.as_list() for c in self.crops],
            "scales": [list(s) for s in self.scales],
            "root_scale": list(self.root_scale),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "FrameChain":
        return cls(
            crops=tuple(Region(*c) for c in d.get("crops", [])),
            scales=tuple(tuple(s) for s in d.get("scales", [])),
            root_scale=tuple(d.get("root_scale", (1.0, 1.0))),
        )


def iou(a: Region, b: Region) -> float:
    inter = a.intersection(b)
    if inter is None:
        return 0.0
    union = a.area + b.area - inter.area
    return inter.area / union


def contains_point(r: Region, p: Point) -> bool:
    return r.x <= p.x < r.x2 and r.y <= p.y < r.y2


def contains_region(outer: Region, inner: Region) -> bool:
    return outer.x <= inner.x and inner.x2 <= outer.x2 and outer.y <= inner.y and inner.y2 <= outer.y2


def clamp_to_frame(r: Region, size: ImageSize) -> Region:
    x1, y1 = max(r.x, 0), max(r.y, 0)
    x2, y2 = min(r.x2, size.width), min(r.y2, size.height)
    if x2 - x1 <= 0 or y2 - y1 <= 0:
        raise DegenerateRegion(f"{r} has no area inside {size.width}x{size.height}")
    return Region(x1, y1, x2 - x1, y2 - y1)


def _point_to_root(chain: FrameChain, x: float, y: float) -> tuple[float, float]:
    for crop, (sx, sy) in zip(reversed(chain.crops), reversed(chain.scales)):
        x, y = crop.x + x / sx, crop.y + y / sy
    sx, sy = chain.root_scale
    return x / sx, y / sy


def _point_to_local(chain: FrameChain, x: float, y: float) -> tuple[float, float]:
    sx, sy = chain.root_scale
    x, y = x * sx, y * sy
    for crop, (sx, sy) in zip(chain.crops, chain.scales):
        x, y = (x - crop.x) * sx, (y - crop.y) * sy
    return x, y


def _innermost_bounds(chain: FrameChain, root: ImageSize | None) -> tuple[float, float] | None:
    if chain.crops:
        c, (sx, sy) = chain.crops[-1], chain.scales[-1]
        return c.w * sx, c.h * sy
    if root is not None:
        sx, sy = chain.root_scale
        return root.width * sx, root.height * sy
    return None


def to_root_frame(
    chain: FrameChain, local: Point | Region, root: ImageSize | None = None
) -> Point | Region:
    """Map a point or region from the innermost presented view to the root frame.

    Maps are composed in floating point and rounded once at the end. Regions
    are mapped corner by corner so nested crops stay nested after rounding.
    """
    bounds = _innermost_bounds(chain, root)
    if isinstance(local, Region):
        if local.w <= 0 or local.h <= 0:
            raise DegenerateRegion(f"{local} has no area")
        if bounds is not None and (
            local.x < 0 or local.y < 0 or local.x2 > bounds[0] + _EPS or local.y2 > bounds[1] + _EPS
        ):
            raise FrameMismatch(f"{local} outside innermost view {bounds}")
        x1, y1 = _point_to_root(chain, local.x, local.y)
        x2, y2 = _point_to_root(chain, local.x2, local.y2)
        x1, y1, x2, y2 = map(round_half_away, (x1, y1, x2, y2))
        return Region(x1, y1, x2 - x1, y2 - y1)
    if bounds is not None and not (0 <= local.x <= bounds[0] + _EPS and 0 <= local.y <= bounds[1] + _EPS):
        raise FrameMismatch(f"{local} outside innermost view {bounds}")
    x, y = _point_to_root(chain, local.x, local.y)
    return Point(round_half_away(x), round_half_away(y))


def to_local_frame(chain: FrameChain, root_obj: Point | Region) -> Point | Region:
    """Inverse of :func:`to_root_frame`; no bounds checking."""
    if isinstance(root_obj, Region):
        x1, y1 = _point_to_local(chain, root_obj.x, root_obj.y)
        x2, y2 = _point_to_local(chain, root_obj.x2, root_obj.y2)
        x1, y1, x2, y2 = map(round_half_away, (x1, y1, x2, y2))
        return Region(x1, y1, x2 - x1, y2 - y1)
    x, y = _point_to_local(chain, root_obj.x, root_obj.y)
    return Point(round_half_away(x), round_half_away(y))


def resize_for_pixel_budget(
    size: ImageSize, min_pixels: int, max_pixels: int
) -> tuple[ImageSize, float]:
    """Proportionally resize ``size`` into ``[min_pixels, max_pixels]``.

    Upscaling rounds each side up and downscaling rounds each side down, so
    the resized pixel count always lands inside the budget.

    >>> resize_for_pixel_budget(ImageSize(50, 50), 3136, 2408448)
    (ImageSize(width=56, height=56), 1.12)
    """
    if not 0 < min_pixels <= max_pixels:
        raise ValueError(f"need 0 < min_pixels <= max_pixels, got {min_pixels}, {max_pixels}")
    w, h = size.width, size.height
    n = w * h
    if n < min_pixels:
        scale = math.sqrt(min_pixels / n)
        nw, nh = math.ceil(w * scale - _EPS), math.ceil(h * scale - _EPS)
        while nw * nh > max_pixels:
            # only reachable when min and max are nearly equal
            if nw / nh > w / h:
                nw -= 1
            else:
                nh -= 1
        return ImageSize(max(nw, 1), max(nh, 1)), scale
    if n > max_pixels:
        scale = math.sqrt(max_pixels / n)
        nw, nh = math.floor(w * scale + _EPS), math.floor(h * scale + _EPS)
        nw, nh = max(nw, 1), max(nh, 1)
        while nw * nh > max_pixels:
            if nw / nh > w / h:
                nw -= 1
            else:
                nh -= 1
        return ImageSize(nw, nh), scale
    return size, 1.0


def respects_pixel_budget(native: ImageSize, presented: ImageSize, min_pixels: int, max_pixels: int) -> bool:
    n = native.pixels
    if n < min_pixels or n > max_pixels:
        return min_pixels <= presented.pixels <= max_pixels
    return presented == native


def area_ratio(r: Region, size: ImageSize) -> float:
    return (r.w * r.h) / size.pixels


def union_bounds(regions: Iterable[Region]) -> Region:
    regions = list(regions)
    x1 = min(r.x for r in regions)
    y1 = min(r.y for r in regions)
    x2 = max(r.x2 for r in regions)
    y2 = max(r.y2 for r in regions)
    return Region(x1, y1, x2 - x1, y2 - y1)
