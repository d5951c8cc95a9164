from __future__ import annotations

import base64
import json

import httpx
import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from PIL import Image

from focusground.geometry import DegenerateRegion, FrameChain, ImageSize, Point, Region
from focusground.oracle import OracleKnobs, OraclePolicy, World, click_success_probability
from focusground.policy import (
    Click,
    Crop,
    Decoding,
    EndpointConfig,
    KindMismatch,
    ParseFailure,
    PolicyRequest,
    PromptKind,
    PromptTemplates,
    RemotePolicy,
    TransportError,
    View,
    format_action,
    parse_action,
    split_cot,
)

VIEW = ImageSize(1000, 1000)


def test_parse_call_form():
    a = parse_action("...I will look here. Crop(10, 20, 300, 200)", PromptKind.CROP, VIEW)
    assert a == Crop(Region(10, 20, 300, 200))


def test_parse_json_forms():
    assert parse_action('{"action":"click","point":[40,55]}', PromptKind.CLICK, VIEW) == Click(Point(40, 55))
    # corners become extents: w = 310 - 10, h = 220 - 20
    a = parse_action('{"action":"crop","box":[10,20,310,220]}', PromptKind.CROP, VIEW)
    assert a == Crop(Region(10, 20, 300, 200))


def test_last_action_wins_across_grammars():
    text = 'First Crop(0, 0, 5, 5), then {"action": "crop", "box": [1, 2, 11, 12]} and finally crop(3,4,5,6)'
    assert parse_action(text, PromptKind.CROP, VIEW) == Crop(Region(3, 4, 5, 6))
    text = 'Crop(0, 0, 5, 5) no wait {"action": "crop", "box": [1, 2, 11, 12]}'
    assert parse_action(text, PromptKind.CROP, VIEW) == Crop(Region(1, 2, 10, 10))


def test_parse_failures():
    with pytest.raises(ParseFailure):
        parse_action("I am not sure where that is.", PromptKind.CLICK, VIEW)
    with pytest.raises(ParseFailure):
        parse_action("Click(1.5, x)", PromptKind.CLICK, VIEW)
    with pytest.raises(KindMismatch):
        parse_action("Click(1, 2)", PromptKind.CROP, VIEW)
    with pytest.raises(KindMismatch):
        parse_action("Crop(1, 2, 3, 4)", PromptKind.CLICK, VIEW)
    with pytest.raises(DegenerateRegion):
        parse_action("Crop(2000, 2000, 10, 10)", PromptKind.CROP, VIEW)
    with pytest.raises(DegenerateRegion):
        parse_action("Crop(10, 10, 0, 10)", PromptKind.CROP, VIEW)


def test_early_click_only_when_allowed():
    a = parse_action("Click(5, 6)", PromptKind.CROP, VIEW, allow_early_click=True)
    assert a == Click(Point(5, 6))


def test_parse_clamps():
    assert parse_action("Crop(-5, -5, 20, 20)", PromptKind.CROP, ImageSize(100, 100)) == Crop(Region(0, 0, 15, 15))
    assert parse_action("Click(150, -3)", PromptKind.CLICK, ImageSize(100, 100)) == Click(Point(99, 0))


def test_split_cot():
    assert split_cot("The button is top left. Click(3, 4)") == "The button is top left."
    assert split_cot("Click(3, 4)") is None


actions = st.one_of(
    st.builds(
        lambda x, y, w, h: Crop(Region(x, y, w, h)),
        st.integers(0, 900), st.integers(0, 900), st.integers(1, 100), st.integers(1, 100),
    ),
    st.builds(lambda x, y: Click(Point(x, y)), st.integers(0, 999), st.integers(0, 999)),
)


@given(actions)
def test_format_parse_round_trip(a):
    assert parse_action(format_action(a), a.kind, VIEW) == a


@given(actions, st.text(alphabet=st.characters(blacklist_characters="{}()"), max_size=40), st.booleans())
def test_grammar_strings_always_parse(a, noise, as_json):
    if as_json:
        if isinstance(a, Crop):
            r = a.region
            body = {"action": "crop", "box": [r.x, r.y, r.x2, r.y2]}
        else:
            body = {"action": "click", "point": [a.point.x, a.point.y]}
        expr = json.dumps(body)
    else:
        expr = format_action(a).replace(", ", ",  ").lower()
    assert parse_action(f"{noise} {expr}", a.kind, VIEW) == a


# -- remote adapter -----------------------------------------------------------


@pytest.fixture
def png_view(tmp_path):
    path = tmp_path / "screen.png"
    Image.new("RGB", (200, 100), (200, 10, 10)).save(path)
    return View(str(path), ImageSize(200, 100), FrameChain(), ImageSize(200, 100))


def _reply(text: str) -> httpx.Response:
    return httpx.Response(200, json={"choices": [{"message": {"content": text}}]})


def _remote(handler, **kw) -> tuple[RemotePolicy, list]:
    sleeps: list = []
    cfg = EndpointConfig(base_url="http://model.test/v1", backoff=0.01, **kw)
    return RemotePolicy(cfg, transport=httpx.MockTransport(handler), sleep=sleeps.append), sleeps


def test_remote_round_trip(png_view, monkeypatch):
    monkeypatch.setenv("FOCUSGROUND_API_KEY", "sekret")
    seen = []

    def handler(request: httpx.Request) -> httpx.Response:
        seen.append(request)
        return _reply("The menu sits at the top. Crop(10, 10, 50, 40)")

    policy, _ = _remote(handler)
    req = PolicyRequest(PromptKind.CROP, png_view, "open the menu", Decoding(temperature=1.0, seed=5))
    resp = policy.complete(req)
    assert resp.action == Crop(Region(10, 10, 50, 40))
    assert resp.cot == "The menu sits at the top."
    (sent,) = seen
    assert sent.url.path == "/v1/chat/completions"
    assert sent.headers["authorization"] == "Bearer sekret"
    body = json.loads(sent.content)
    assert body["seed"] == 5 and body["temperature"] == 1.0
    image, text = body["messages"][0]["content"]
    assert image["type"] == "image_url" and text["type"] == "text"
    assert "open the menu" in text["text"] and "200" in text["text"]
    raw = base64.b64decode(image["image_url"]["url"].split(",", 1)[1])
    assert raw.startswith(b"\x89PNG")


def test_remote_retries_then_raises(png_view):
    calls = []

    def handler(request):
        calls.append(1)
        raise httpx.ConnectError("refused", request=request)

    policy, sleeps = _remote(handler, retries=3)
    with pytest.raises(TransportError):
        policy.complete(PolicyRequest(PromptKind.CLICK, png_view, "x"))
    assert len(calls) == 3
    assert sleeps == [0.01, 0.02]


def test_remote_recovers_from_transient_status(png_view):
    statuses = iter([503, 429, 200])

    def handler(request):
        code = next(statuses)
        return _reply("Click(3, 4)") if code == 200 else httpx.Response(code)

    policy, sleeps = _remote(handler)
    assert policy.complete(PolicyRequest(PromptKind.CLICK, png_view, "x")).action == Click(Point(3, 4))
    assert len(sleeps) == 2


def test_remote_parse_failure_surfaces_or_resamples(png_view):
    replies = iter(["no idea", "Click(7, 8)"])
    policy, _ = _remote(lambda r: _reply("no idea"))
    with pytest.raises(ParseFailure):
        policy.complete(PolicyRequest(PromptKind.CLICK, png_view, "x"))
    policy, _ = _remote(lambda r: _reply(next(replies)), parse_retries=1)
    assert policy.complete(PolicyRequest(PromptKind.CLICK, png_view, "x")).action == Click(Point(7, 8))


def test_prompt_templates_fill_placeholders(png_view):
    t = PromptTemplates.default()
    for kind, allow in ((PromptKind.CROP, False), (PromptKind.CROP, True), (PromptKind.CLICK, False)):
        text = t.render(PolicyRequest(kind, png_view, "the save icon", allow_click=allow))
        assert "the save icon" in text and "{" not in text.replace("{\"", "")


# -- oracle -----------------------------------------------------------------


WORLD = World(ImageSize(1000, 1000), Region(480, 480, 40, 20), (Region(100, 100, 40, 20), Region(700, 800, 40, 20)))


def _view(region: Region) -> View:
    chain = FrameChain().push(region, region.size) if region != WORLD.size.full_region() else FrameChain()
    return View(None, WORLD.size, chain, region.size)


def _click_hits(policy: OraclePolicy, view: View, n: int, start: int = 0) -> np.ndarray:
    from focusground.geometry import contains_point, to_root_frame

    out = np.zeros(n, dtype=bool)
    for i in range(n):
        req = PolicyRequest(PromptKind.CLICK, view, "t", Decoding(seed=start + i), sample_id="s")
        try:
            a = policy.complete(req).action
        except ParseFailure:
            continue
        out[i] = contains_point(WORLD.target, to_root_frame(view.chain, a.point, WORLD.size))
    return out


def test_oracle_absent_target_never_hits():
    view_region = Region(0, 0, 300, 300)
    assert click_success_probability(WORLD, view_region, OracleKnobs()) == 0.0
    policy = OraclePolicy({"s": WORLD})
    assert not _click_hits(policy, _view(view_region), 300).any()


def test_oracle_target_filling_view_with_large_k0():
    knobs = OracleKnobs(k0=30.0)
    assert click_success_probability(WORLD, WORLD.target, knobs) > 1 - 1e-9
    assert _click_hits(OraclePolicy({"s": WORLD}, knobs), _view(WORLD.target), 200).all()


def test_oracle_is_reproducible():
    view = _view(WORLD.size.full_region())
    a = [OraclePolicy({"s": WORLD}, seed=3).complete(PolicyRequest(k, view, "t", Decoding(seed=i), "s")) for i in range(50) for k in PromptKind]
    b = [OraclePolicy({"s": WORLD}, seed=3).complete(PolicyRequest(k, view, "t", Decoding(seed=i), "s")) for i in range(50) for k in PromptKind]
    assert a == b


def test_oracle_crop_misses_at_configured_rate():
    from focusground.geometry import contains_region, to_root_frame

    view = _view(WORLD.size.full_region())
    for miss_rate in (0.0, 1.0):
        policy = OraclePolicy({"s": WORLD}, OracleKnobs(miss_rate=miss_rate))
        hits = 0
        for i in range(200):
            crop = policy.complete(PolicyRequest(PromptKind.CROP, view, "t", Decoding(seed=i), "s")).action
            hits += contains_region(to_root_frame(view.chain, crop.region, WORLD.size), WORLD.target)
            assert to_root_frame(view.chain, crop.region, WORLD.size).intersection(WORLD.target) is not None or miss_rate
        assert hits == (200 if miss_rate == 0 else 0)


def _views_by_ratio() -> list[Region]:
    # views centered on the target, from the full screen down to just around it
    return [WORLD.target.scaled_about_center(f) for f in (1.0, 1.5, 2.5, 4.0)]


@pytest.mark.parametrize("knobs", [OracleKnobs(), OracleKnobs(k0=1.0, k1=0.8), OracleKnobs(k0=5.0, k1=0.3)])
def test_oracle_monotone_in_area_ratio_with_context_visible(knobs):
    # with full context in view (k_ctx = 0) accuracy must not drop as the view tightens
    knobs.k_ctx = 0.0
    policy = OraclePolicy({"s": WORLD}, knobs)
    rates = []
    for f in (32.0, 16.0, 8.0, 4.0, 2.0, 1.0):
        region = WORLD.target.scaled_about_center(f).intersection(WORLD.size.full_region())
        rates.append(_click_hits(policy, _view(region), 2500).mean())
    diffs = np.diff(rates)
    # 2500 trials per point: allow three standard errors of noise
    assert (diffs > -3 * np.sqrt(0.25 / 2500) * np.sqrt(2)).all(), rates
    assert rates[-1] > rates[0]


def test_oracle_sweep_is_unimodal_with_context_term():
    policy = OraclePolicy({"s": WORLD})
    rates = []
    for f in (1.0, 2.0, 4.0, 8.0, 16.0, 50.0):
        region = WORLD.target.scaled_about_center(f).intersection(WORLD.size.full_region())
        rates.append(_click_hits(policy, _view(region), 1000).mean())
    peak = int(np.argmax(rates))
    assert 0 < peak < len(rates) - 1
    assert all(np.diff(rates[: peak + 1]) > -0.05) and all(np.diff(rates[peak:]) < 0.05)
