"""Policy interface, action grammar and the remote chat-completion adapter."""

from __future__ import annotations

import base64
import enum
import hashlib
import io
import json
import logging
import os
import re
import threading
import time
from dataclasses import dataclass, field, replace
from functools import lru_cache
from importlib import resources
from pathlib import Path
from typing import Optional, Protocol, Union

import httpx

from .geometry import (
    DegenerateRegion,
    FrameChain,
    ImageSize,
    Point,
    Region,
    clamp_to_frame,
    round_half_away,
    to_root_frame,
)

logger = logging.getLogger(__name__)

TOKEN_ENV = "FOCUSGROUND_API_KEY"
CACHE_ENV = "FOCUSGROUND_CACHE_DIR"


class PolicyError(RuntimeError):
    """Base class for failures that end an episode step."""


class ParseFailure(PolicyError):
    pass


class KindMismatch(PolicyError):
    pass


class TransportError(PolicyError):
    pass


class PromptKind(str, enum.Enum):
    CROP = "crop"
    CLICK = "click"


@dataclass(frozen=True)
class Crop:
    region: Region

    kind = PromptKind.CROP


@dataclass(frozen=True)
class Click:
    point: Point

    kind = PromptKind.CLICK


Action = Union[Crop, Click]


def format_action(action: Action) -> str:
    if isinstance(action, Crop):
        r = action.region
        return f"Crop({r.x}, {r.y}, {r.w}, {r.h})"
    return f"Click({action.point.x}, {action.point.y})"


_INT = r"\s*([+-]?\d+)\s*"
_CALL_RE = re.compile(
    r"\b(?:(?P<crop>crop)\(" + ",".join([_INT] * 4) + r"\)|(?P<click>click)\(" + ",".join([_INT] * 2) + r"\))",
    re.IGNORECASE,
)
_JSON_RE = re.compile(r"\{[^{}]*\}")


def _number(v) -> int:
    if isinstance(v, bool) or not isinstance(v, (int, float)):
        raise ValueError(f"not a number: {v!r}")
    return round_half_away(v)


def _json_candidate(text: str) -> Optional[Action]:
    try:
        obj = json.loads(text)
    except json.JSONDecodeError:
        return None
    if not isinstance(obj, dict):
        return None
    name = str(obj.get("action", "")).lower()
    try:
        if name == "crop":
            x1, y1, x2, y2 = (_number(v) for v in obj["box"])
            return Crop(Region.from_corners(x1, y1, x2, y2))
        if name == "click":
            x, y = (_number(v) for v in obj["point"])
            return Click(Point(x, y))
    except (KeyError, TypeError, ValueError):
        return None
    return None


def _last_action(raw_text: str) -> Optional[Action]:
    found: list[tuple[int, Action]] = []
    for m in _CALL_RE.finditer(raw_text):
        if m.group("crop"):
            x, y, w, h = (int(v) for v in m.groups()[1:5])
            found.append((m.end(), Crop(Region(x, y, w, h))))
        else:
            x, y = (int(v) for v in m.groups()[6:8])
            found.append((m.end(), Click(Point(x, y))))
    for m in _JSON_RE.finditer(raw_text):
        a = _json_candidate(m.group(0))
        if a is not None:
            found.append((m.end(), a))
    if not found:
        return None
    return max(found, key=lambda t: t[0])[1]


def clamp_point(p: Point, view: ImageSize) -> Point:
    return Point(min(max(p.x, 0), view.width - 1), min(max(p.y, 0), view.height - 1))


def parse_action(
    raw_text: str, expected: PromptKind, view: ImageSize, allow_early_click: bool = False
) -> Action:
    """Extract the last well-formed action from ``raw_text``.

    Accepts ``Crop(x, y, w, h)`` / ``Click(x, y)`` and the JSON forms
    ``{"action": "crop", "box": [x1, y1, x2, y2]}`` /
    ``{"action": "click", "point": [x, y]}``. Crops are clamped to the view
    (raising :class:`DegenerateRegion` when nothing is left); clicks are
    clamped onto the view.

    With ``allow_early_click`` a click answers a crop prompt without error.
    """
    action = _last_action(raw_text)
    if action is None:
        raise ParseFailure(f"no action found in {raw_text[-200:]!r}")
    if action.kind is not expected and not (
        allow_early_click and expected is PromptKind.CROP and isinstance(action, Click)
    ):
        raise KindMismatch(f"expected {expected.value}, got {format_action(action)}")
    if isinstance(action, Crop):
        if action.region.w <= 0 or action.region.h <= 0:
            raise DegenerateRegion(f"{format_action(action)} has no area")
        return Crop(clamp_to_frame(action.region, view))
    return Click(clamp_point(action.point, view))


def split_cot(raw_text: str) -> Optional[str]:
    """Everything before the final action expression, stripped; None if empty."""
    cut = 0
    for m in list(_CALL_RE.finditer(raw_text)) + list(_JSON_RE.finditer(raw_text)):
        if m.end() > cut:
            cut = m.start()
    cot = raw_text[:cut].strip()
    return cot or None


@dataclass(frozen=True)
class Decoding:
    temperature: float = 0.0
    max_tokens: int = 512
    seed: Optional[int] = None


@dataclass(frozen=True)
class View:
    """What the policy is shown: a (possibly cropped) view of one screenshot."""

    image: Optional[str]
    root_size: ImageSize
    chain: FrameChain
    presented_size: ImageSize

    def root_region(self) -> Region:
        return to_root_frame(self.chain, self.presented_size.full_region(), self.root_size)


@dataclass(frozen=True)
class PolicyRequest:
    kind: PromptKind
    view: View
    instruction: str
    decoding: Decoding = Decoding()
    sample_id: str = ""
    allow_click: bool = False


@dataclass(frozen=True)
class PolicyResponse:
    raw_text: str
    action: Action
    latency: float = 0.0

    @property
    def cot(self) -> Optional[str]:
        return split_cot(self.raw_text)


class Policy(Protocol):
    def complete(self, request: PolicyRequest) -> PolicyResponse: ...


# -- prompts -----------------------------------------------------------------


@dataclass(frozen=True)
class PromptTemplates:
    crop: str
    click: str
    crop_or_click: str

    @classmethod
    def default(cls) -> "PromptTemplates":
        pkg = resources.files("focusground") / "prompts"
        return cls(
            crop=(pkg / "crop.txt").read_text(encoding="utf-8"),
            click=(pkg / "click.txt").read_text(encoding="utf-8"),
            crop_or_click=(pkg / "crop_or_click.txt").read_text(encoding="utf-8"),
        )

    @classmethod
    def load(cls, crop: Optional[str] = None, click: Optional[str] = None) -> "PromptTemplates":
        t = cls.default()
        if crop:
            t = replace(t, crop=Path(crop).read_text(encoding="utf-8"))
        if click:
            t = replace(t, click=Path(click).read_text(encoding="utf-8"))
        return t

    def render(self, request: PolicyRequest) -> str:
        if request.kind is PromptKind.CLICK:
            tpl = self.click
        else:
            tpl = self.crop_or_click if request.allow_click else self.crop
        return tpl.format(
            instruction=request.instruction,
            view_width=request.view.presented_size.width,
            view_height=request.view.presented_size.height,
        )


# -- view rendering ----------------------------------------------------------


@lru_cache(maxsize=16)
def _open_root(path: str):
    from PIL import Image

    with Image.open(path) as im:
        return im.convert("RGB")


def render_view(view: View):
    """Crop and resize the root image to what the policy should see."""
    if view.image is None:
        raise ValueError("view has no image reference")
    im = _open_root(str(view.image))
    r = view.root_region()
    box = (max(r.x, 0), max(r.y, 0), min(r.x2, im.width), min(r.y2, im.height))
    im = im.crop(box)
    size = (view.presented_size.width, view.presented_size.height)
    if im.size != size:
        im = im.resize(size)
    return im


def encode_view_png(view: View) -> bytes:
    cache_dir = os.environ.get(CACHE_ENV)
    cache_path = None
    if cache_dir:
        key = json.dumps(
            [str(view.image), view.chain.to_dict(), view.presented_size.as_list()], sort_keys=True
        )
        cache_path = Path(cache_dir) / (hashlib.sha1(key.encode()).hexdigest() + ".png")
        if cache_path.exists():
            return cache_path.read_bytes()
    buf = io.BytesIO()
    render_view(view).save(buf, format="PNG")
    data = buf.getvalue()
    if cache_path is not None:
        cache_path.parent.mkdir(parents=True, exist_ok=True)
        cache_path.write_bytes(data)
    return data


# -- remote endpoint -----------------------------------------------------------


@dataclass
class EndpointConfig:
    base_url: str = "http://localhost:8000/v1"
    model: str = "default"
    token_env: str = TOKEN_ENV
    timeout: float = 60.0
    retries: int = 3
    backoff: float = 0.5
    concurrency: int = 8
    parse_retries: int = 0


_RETRY_STATUS = {408, 409, 425, 429, 500, 502, 503, 504}


@dataclass
class RemotePolicy:
    """Chat-completion endpoint wrapped as a :class:`Policy`.

    Each call sends one user message carrying the view as a base64 PNG and
    the prompt for the request kind, and reads the first choice's text.
    Transport failures are retried with exponential backoff; parse failures
    are surfaced unless ``endpoint.parse_retries`` allows re-sampling.
    """

    endpoint: EndpointConfig = field(default_factory=EndpointConfig)
    templates: PromptTemplates = field(default_factory=PromptTemplates.default)
    transport: Optional[httpx.BaseTransport] = None
    sleep: callable = time.sleep

    def __post_init__(self):
        self._slots = threading.BoundedSemaphore(max(self.endpoint.concurrency, 1))
        headers = {}
        token = os.environ.get(self.endpoint.token_env)
        if token:
            headers["Authorization"] = f"Bearer {token}"
        self._client = httpx.Client(
            base_url=self.endpoint.base_url.rstrip("/") + "/",
            headers=headers,
            timeout=self.endpoint.timeout,
            transport=self.transport,
        )

    def close(self):
        self._client.close()

    def payload(self, request: PolicyRequest, image_png: bytes) -> dict:
        b64 = base64.b64encode(image_png).decode("ascii")
        body = {
            "model": self.endpoint.model,
            "messages": [
                {
                    "role": "user",
                    "content": [
                        {"type": "image_url", "image_url": {"url": f"data:image/png;base64,{b64}"}},
                        {"type": "text", "text": self.templates.render(request)},
                    ],
                }
            ],
            "temperature": request.decoding.temperature,
            "max_tokens": request.decoding.max_tokens,
        }
        if request.decoding.seed is not None:
            body["seed"] = request.decoding.seed
        return body

    def _post(self, body: dict) -> str:
        attempts = max(self.endpoint.retries, 1)
        last: Exception | None = None
        for attempt in range(attempts):
            try:
                with self._slots:
                    resp = self._client.post("chat/completions", json=body)
                if resp.status_code in _RETRY_STATUS:
                    last = TransportError(f"HTTP {resp.status_code}")
                else:
                    resp.raise_for_status()
                    return resp.json()["choices"][0]["message"]["content"] or ""
            except httpx.TransportError as exc:
                last = exc
            except (httpx.HTTPStatusError, KeyError, IndexError, ValueError) as exc:
                raise TransportError(f"bad response from endpoint: {exc}") from exc
            if attempt + 1 < attempts:
                delay = self.endpoint.backoff * 2**attempt
                logger.debug("endpoint attempt %d failed (%s); sleeping %.2fs", attempt + 1, last, delay)
                self.sleep(delay)
        raise TransportError(f"endpoint failed after {attempts} attempts: {last}") from last

    def complete(self, request: PolicyRequest) -> PolicyResponse:
        png = encode_view_png(request.view)
        tries = 1 + max(self.endpoint.parse_retries, 0)
        for i in range(tries):
            req = request
            if i and request.decoding.seed is not None:
                req = replace(request, decoding=replace(request.decoding, seed=request.decoding.seed + i))
            t0 = time.perf_counter()
            text = self._post(self.payload(req, png))
            latency = time.perf_counter() - t0
            try:
                action = parse_action(
                    text, request.kind, request.view.presented_size, allow_early_click=request.allow_click
                )
            except (ParseFailure, KindMismatch):
                if i + 1 == tries:
                    raise
                continue
            return PolicyResponse(raw_text=text, action=action, latency=latency)
        raise AssertionError("unreachable")
