from __future__ import annotations

import math
from fractions import Fraction

import pytest
from hypothesis import assume, given, settings
from hypothesis import strategies as st

from focusground.geometry import (
    DegenerateRegion,
    FrameChain,
    FrameMismatch,
    ImageSize,
    Point,
    Region,
    area_ratio,
    clamp_to_frame,
    contains_point,
    contains_region,
    iou,
    resize_for_pixel_budget,
    round_half_away,
    to_local_frame,
    to_root_frame,
)

regions = st.builds(
    Region,
    st.integers(-200, 200),
    st.integers(-200, 200),
    st.integers(1, 300),
    st.integers(1, 300),
)


def test_iou_examples():
    a = Region(0, 0, 10, 10)
    assert iou(a, a) == 1.0
    assert iou(a, Region(20, 20, 5, 5)) == 0.0
    # inter 5*10, union 100+100-50
    assert iou(a, Region(5, 0, 10, 10)) == pytest.approx(float(Fraction(50, 150)), abs=1e-15)


def test_touching_edges_do_not_overlap():
    assert iou(Region(0, 0, 10, 10), Region(10, 0, 10, 10)) == 0.0


def test_contains_point_half_open():
    r = Region(0, 0, 10, 10)
    assert contains_point(r, Point(0, 0))
    assert not contains_point(r, Point(10, 10))
    assert not contains_point(r, Point(9, 10))
    assert contains_point(Region(5, 5, 3, 3), Point(6, 7))


def test_contains_region_closed():
    outer = Region(0, 0, 100, 100)
    assert contains_region(outer, Region(10, 10, 20, 20))
    assert contains_region(outer, outer)
    assert not contains_region(outer, Region(90, 90, 20, 20))


def test_clamp_to_frame():
    size = ImageSize(100, 100)
    assert clamp_to_frame(Region(-5, -5, 20, 20), size) == Region(0, 0, 15, 15)
    assert clamp_to_frame(Region(0, 0, 10, 10), size) == Region(0, 0, 10, 10)
    with pytest.raises(DegenerateRegion):
        clamp_to_frame(Region(200, 200, 10, 10), size)
    with pytest.raises(DegenerateRegion):
        clamp_to_frame(Region(100, 0, 10, 10), size)


def test_to_root_frame_examples():
    assert to_root_frame(FrameChain(), Point(7, 9)) == Point(7, 9)
    assert to_root_frame(FrameChain((Region(100, 200, 50, 50),)), Point(10, 10)) == Point(110, 210)
    upscaled = FrameChain().push(Region(100, 100, 50, 50), ImageSize(100, 100))
    assert upscaled.scales == ((2.0, 2.0),)
    assert to_root_frame(upscaled, Point(40, 40)) == Point(120, 120)


def test_to_root_frame_rejects_out_of_view():
    chain = FrameChain((Region(100, 200, 50, 50),))
    with pytest.raises(FrameMismatch):
        to_root_frame(chain, Point(51, 10))
    with pytest.raises(FrameMismatch):
        to_root_frame(chain, Region(40, 0, 20, 10))


def test_round_half_away():
    assert [round_half_away(v) for v in (0.5, 1.5, 2.5, -0.5, -1.5, 2.49)] == [1, 2, 3, -1, -2, 2]


def _budget_oracle(w: int, h: int, lo: int, hi: int) -> tuple[int, int]:
    # independent reference: exact rational scale, ceil up / floor down
    n = w * h
    if n < lo:
        s2 = Fraction(lo, n)
        nw = next(k for k in range(w, 100 * w + 2) if Fraction(k * k) >= s2 * w * w)
        nh = next(k for k in range(h, 100 * h + 2) if Fraction(k * k) >= s2 * h * h)
        return nw, nh
    if n > hi:
        s2 = Fraction(hi, n)
        nw = max(k for k in range(0, w + 1) if Fraction(k * k) <= s2 * w * w)
        nh = max(k for k in range(0, h + 1) if Fraction(k * k) <= s2 * h * h)
        return nw, nh
    return w, h


@pytest.mark.parametrize(
    "w,h,lo,hi,expected,scale",
    [
        (50, 50, 3136, 2_408_448, (56, 56), 1.12),
        (1000, 1000, 3136, 2_408_448, (1000, 1000), 1.0),
        (2560, 1440, 3136, 2_408_448, (2069, 1163), math.sqrt(2408448 / 3686400)),
    ],
)
def test_resize_examples(w, h, lo, hi, expected, scale):
    out, s = resize_for_pixel_budget(ImageSize(w, h), lo, hi)
    assert (out.width, out.height) == expected == _budget_oracle(w, h, lo, hi)
    assert s == pytest.approx(scale, rel=1e-12)
    assert lo <= out.pixels <= hi


def test_resize_rejects_bad_budget():
    with pytest.raises(ValueError):
        resize_for_pixel_budget(ImageSize(10, 10), 100, 50)
    with pytest.raises(ValueError):
        resize_for_pixel_budget(ImageSize(10, 10), 0, 50)


def test_area_ratio():
    size = ImageSize(100, 100)
    assert area_ratio(size.full_region(), size) == 1.0
    assert area_ratio(Region(0, 0, 10, 10), size) == 0.01


@given(regions, regions)
def test_iou_symmetric_and_bounded(a, b):
    v = iou(a, b)
    assert v == iou(b, a)
    assert 0.0 <= v <= 1.0
    assert iou(a, a) == 1.0


@given(regions, regions)
def test_containment_matches_iou(a, b):
    if contains_region(a, b):
        assert iou(a, b) == pytest.approx(b.area / a.area, rel=1e-12)


@given(st.integers(1, 4000), st.integers(1, 4000), st.sampled_from([3136, 50_000, 1_000_000]))
def test_resize_lands_in_budget(w, h, lo):
    hi = 2_408_448
    size = ImageSize(w, h)
    out, s = resize_for_pixel_budget(size, lo, hi)
    if lo <= size.pixels <= hi:
        assert out == size and s == 1.0
    else:
        assert lo <= out.pixels <= hi
        assert abs(out.width - w * s) <= 1 + 1e-9
        assert abs(out.height - h * s) <= 1 + 1e-9


@st.composite
def chains(draw, root=ImageSize(1920, 1080), max_depth=3, shrink=True):
    # the pixel budget only ever shrinks the root screenshot, never a crop
    presented_root = draw(st.sampled_from([root, ImageSize(1553, 874)]))
    chain = FrameChain.for_root(root, presented_root)
    view = presented_root
    for _ in range(draw(st.integers(0, max_depth))):
        if view.width < 4 or view.height < 4:
            break
        w = draw(st.integers(2, view.width))
        h = draw(st.integers(2, view.height))
        x = draw(st.integers(0, view.width - w))
        y = draw(st.integers(0, view.height - h))
        pw = draw(st.integers(max(1, w // 3) if shrink else w, w * 3))
        ph = draw(st.integers(max(1, h // 3) if shrink else h, h * 3))
        view = ImageSize(pw, ph)
        chain = chain.push(Region(x, y, w, h), view)
    return chain


@given(chains(shrink=False), st.data())
@settings(max_examples=300)
def test_point_round_trip_within_one_pixel_per_hop(chain, data):
    root = ImageSize(1920, 1080)
    inner = to_root_frame(chain, chain.view_size(root).full_region(), root)
    # views smaller than a root pixel hold no integer root point
    assume(inner.w >= 1 and inner.h >= 1)
    p = Point(data.draw(st.integers(inner.x, inner.x2 - 1)), data.draw(st.integers(inner.y, inner.y2 - 1)))
    local = to_local_frame(chain, p)
    bounds = chain.view_size(root)
    local = Point(min(max(local.x, 0), bounds.width), min(max(local.y, 0), bounds.height))
    back = to_root_frame(chain, local, root)
    hops = max(len(chain.crops), 1)
    assert abs(back.x - p.x) <= hops and abs(back.y - p.y) <= hops


@given(chains(max_depth=2), chains(max_depth=2), st.data())
@settings(max_examples=200)
def test_mapping_is_associative_over_concat(outer, inner_draft, data):
    root = ImageSize(1920, 1080)
    # re-root the inner chain on the outer chain's innermost presented view
    inner = FrameChain(root_scale=outer.view_scale)
    frame = outer.view_size(root)
    for crop, (sx, sy) in zip(inner_draft.crops, inner_draft.scales):
        x, y = min(crop.x, frame.width - 1), min(crop.y, frame.height - 1)
        c = Region(x, y, max(1, min(crop.w, frame.width - x)), max(1, min(crop.h, frame.height - y)))
        frame = ImageSize(max(1, round_half_away(c.w * sx)), max(1, round_half_away(c.h * sy)))
        inner = inner.push(c, frame)
    joined = outer.concat(inner)
    p = Point(data.draw(st.integers(0, frame.width)), data.draw(st.integers(0, frame.height)))
    mid = _to_presented(inner, p)
    two_hop = _to_root(outer, mid)
    one_hop = _to_root(joined, (p.x, p.y))
    assert two_hop == pytest.approx(one_hop, abs=1e-6)
    r = to_root_frame(joined, p, root)
    assert abs(r.x - one_hop[0]) <= 0.5 + 1e-9 and abs(r.y - one_hop[1]) <= 0.5 + 1e-9


def _to_presented(chain: FrameChain, p: Point) -> tuple[float, float]:
    """Innermost view -> presented coordinates of the chain's root view."""
    x, y = float(p.x), float(p.y)
    for crop, (sx, sy) in zip(reversed(chain.crops), reversed(chain.scales)):
        x, y = (crop.x + x / sx), (crop.y + y / sy)
    return x, y


def _to_root(chain: FrameChain, p: tuple[float, float]) -> tuple[float, float]:
    x, y = p
    for crop, (sx, sy) in zip(reversed(chain.crops), reversed(chain.scales)):
        x, y = crop.x + x / sx, crop.y + y / sy
    sx, sy = chain.root_scale
    return x / sx, y / sy


@given(chains())
@settings(max_examples=200)
def test_nested_crops_stay_nested_in_root(chain):
    root = ImageSize(1920, 1080)
    prev = root.full_region()
    for depth in range(1, len(chain.crops) + 1):
        sub = chain.prefix(depth)
        parent = chain.prefix(depth - 1)
        region = to_root_frame(parent, sub.crops[-1], root)
        assert contains_region(prev, region)
        prev = region


def test_chain_serialization_round_trip():
    chain = FrameChain.for_root(ImageSize(2560, 1440), ImageSize(2069, 1163)).push(Region(10, 20, 300, 200), ImageSize(300, 200))
    assert FrameChain.from_dict(chain.to_dict()) == chain
