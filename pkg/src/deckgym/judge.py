"""LLM-as-judge boundary: content-hash cache, offline heuristics, remote client.

Every judge score is keyed by ``"<kind>:<sha256 hex>"`` of its normalized
payload and stored before it is returned, so repeated evaluations of the same
content are deterministic within a cache lifetime.
"""
from __future__ import annotations

import base64
import hashlib
import json
import logging
import os
import re
import threading
import time
import urllib.error
import urllib.request
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Protocol, Sequence

from deckgym.render import THEMES, ParsedSlide, interpolate_palette, parse_slide
from deckgym.text import content_words, iter_json_objects, normalize_ws, whitespace_tokens

logger = logging.getLogger(__name__)

HTML_AESTHETIC = "html_aesthetic"
VISUAL_AESTHETIC = "visual_aesthetic"
RECONSTRUCT = "reconstruct"
KINDS = (HTML_AESTHETIC, VISUAL_AESTHETIC, RECONSTRUCT)

PROMPT_VERSION = "2026-03.1"

HTML_RUBRIC_PROMPT = """You are reviewing the raw HTML/CSS of one presentation slide.
Score it from 0.0 to 1.0 as the sum of four equally weighted dimensions (0.25 each):
1. Layout and structure: a clear title/section hierarchy and logical organization.
2. Content balance: appropriate text density, sections of comparable weight.
3. Visual styling: modern CSS, color harmony and typography.
4. Professional polish: executive-ready, consistent formatting.
Reply with a single number between 0.0 and 1.0."""

VISUAL_RUBRIC_PROMPT = """You are reviewing a rendered screenshot of one presentation slide.
Score it from 0.0 to 1.0 as the sum of four equally weighted dimensions (0.25 each):
1. Visual design: color harmony, contrast and modern aesthetics.
2. Layout and spacing: whitespace, alignment and organization.
3. Typography: font hierarchy, readability and text density.
4. Professional polish: executive-ready appearance and consistency.
Reply with a single number between 0.0 and 1.0."""

INVERSE_SPEC_PROMPT = """You are analyzing a slide deck presentation. Based ONLY on the slide content, predict what the original brief/requirements were.

Return a JSON object with:
{
  "topic": "The main topic or title",
  "audience": "Who this targets",
  "num_slides": <intended count>,
  "key_themes": ["theme1", "theme2", "theme3"]
}

Return ONLY the JSON object. No explanation."""

AUDIENCE_LEXICON: tuple[str, ...] = (
    "board of directors", "board members", "board", "venture capitalists", "angel investors",
    "growth equity investors", "investors", "shareholders", "executives", "executive team",
    "leadership team", "engineering leadership", "marketing leadership", "sales leadership",
    "human resources leadership", "finance team", "auditors", "product managers",
    "machine learning engineers", "security engineers", "site reliability engineers",
    "data scientists", "engineers", "developers", "sales team", "customers", "partners",
    "employees", "students", "analysts", "regulators", "stakeholders",
)


class JudgeUnavailable(RuntimeError):
    """The judge backend failed after all retries."""


class ReconstructionError(ValueError):
    """A reconstruction reply did not contain a usable prediction."""


def content_hash(kind: str, payload: str | bytes) -> str:
    if kind not in KINDS:
        raise ValueError(f"unknown judge kind {kind!r}")
    if isinstance(payload, str):
        data = normalize_ws(payload).encode("utf-8")
    else:
        data = bytes(payload)
    return f"{kind}:{hashlib.sha256(data).hexdigest()}"


# ---------------------------------------------------------------------------
# Cache


class JudgeCache:
    """Read-through score cache backed by an append-only JSON-lines log.

    Reads hit an in-memory dict; writes are serialized and appended. With
    ``path=None`` the cache lives in memory only.
    """

    def __init__(self, path: str | Path | None = None):
        self.path = Path(path) if path else None
        self._data: dict[str, Any] = {}
        self._lock = threading.Lock()
        if self.path is not None:
            self._load()

    def _load(self) -> None:
        assert self.path is not None
        if not self.path.exists():
            return
        data: dict[str, Any] = {}
        try:
            for line in self.path.read_text(encoding="utf-8").splitlines():
                if not line.strip():
                    continue
                rec = json.loads(line)
                data[rec["key"]] = rec["value"]
        except (json.JSONDecodeError, KeyError, TypeError, UnicodeDecodeError) as exc:
            logger.warning("judge cache %s is corrupt (%s); rebuilding empty", self.path, exc)
            self.path.write_text("", encoding="utf-8")
            data = {}
        self._data = data

    def lookup(self, key: str) -> Any | None:
        return self._data.get(key)

    def store(self, key: str, value: Any) -> None:
        with self._lock:
            if key in self._data and self._data[key] == value:
                return
            if self.path is not None:
                self.path.parent.mkdir(parents=True, exist_ok=True)
                with open(self.path, "a", encoding="utf-8") as f:
                    f.write(json.dumps({"key": key, "value": value}, sort_keys=True) + "\n")
                    f.flush()
                    os.fsync(f.fileno())
            self._data[key] = value

    def __len__(self) -> int:
        return len(self._data)

    def __contains__(self, key: str) -> bool:
        return key in self._data


# ---------------------------------------------------------------------------
# Reply parsing

_NUMBER_RE = re.compile(r"(?<![\w.])[-+]?(?:\d+\.\d*|\.\d+|\d+)(?:[eE][-+]?\d+)?")


def parse_score_reply(reply: str) -> float:
    """First real number in [0, 1] found in a judge reply."""
    for m in _NUMBER_RE.finditer(reply):
        value = float(m.group())
        if 0.0 <= value <= 1.0:
            return value
    raise ValueError(f"no score in [0, 1] in reply {reply[:80]!r}")


@dataclass(frozen=True)
class ReconPrediction:
    topic: str
    audience: str
    num_slides: int
    key_themes: tuple[str, ...] = ()

    def to_dict(self) -> dict[str, Any]:
        return {
            "topic": self.topic,
            "audience": self.audience,
            "num_slides": self.num_slides,
            "key_themes": list(self.key_themes),
        }

    @classmethod
    def from_dict(cls, obj: Any) -> "ReconPrediction":
        if not isinstance(obj, dict):
            raise ReconstructionError("prediction is not an object")
        missing = [k for k in ("topic", "audience", "num_slides") if k not in obj]
        if missing:
            raise ReconstructionError(f"prediction missing {missing}")
        try:
            n = int(float(obj["num_slides"]))
        except (TypeError, ValueError) as exc:
            raise ReconstructionError(f"bad num_slides {obj['num_slides']!r}") from exc
        themes = obj.get("key_themes") or []
        if not isinstance(themes, list):
            raise ReconstructionError("key_themes is not a list")
        return cls(str(obj["topic"]), str(obj["audience"]), n, tuple(str(t) for t in themes))


def parse_reconstruction_reply(reply: str) -> ReconPrediction:
    for obj in iter_json_objects(reply):
        return ReconPrediction.from_dict(obj)
    raise ReconstructionError("no JSON object in reconstruction reply")


# ---------------------------------------------------------------------------
# Deck text

_SLIDE_LINE = re.compile(r"^Slide (\d+): ?(.*)$")


def deck_text(slides: Sequence[ParsedSlide]) -> str:
    """Plain-text rendering of slide content, the only input reconstruction sees."""
    lines = []
    for i, s in enumerate(slides):
        lines.append(f"Slide {i + 1}: {s.title or ''}")
        for sec in s.sections:
            head, body = sec.heading or "", sec.body or ""
            if head or body:
                lines.append(f"- {head}: {body}" if head else f"- {body}")
    return "\n".join(lines)


def _split_deck_text(text: str) -> tuple[list[str], str]:
    titles, content = [], []
    for line in text.splitlines():
        m = _SLIDE_LINE.match(line)
        if m:
            titles.append(m.group(2).strip())
            content.append(m.group(2))
        else:
            content.append(line[2:] if line.startswith("- ") else line)
    return titles, "\n".join(content)


# ---------------------------------------------------------------------------
# Offline heuristics

_CSS_BLOCK_RE = re.compile(r"<style[^>]*>(.*?)</style>", re.S | re.I)
_STYLE_ATTR_RE = re.compile(r'style="([^"]*)"', re.I)
_CSS_PROP_RE = re.compile(r"(?:^|[{;])\s*([a-zA-Z-]+)\s*:")
_RGB_RE = re.compile(r"rgb\(\s*(\d+)\s*,\s*(\d+)\s*,\s*(\d+)\s*\)")
_DEFAULT_COLORS = frozenset(interpolate_palette(THEMES["default"]).values())


def _css_text(html: str) -> str:
    return "\n".join(_CSS_BLOCK_RE.findall(html) + [f"{{{s}}}" for s in _STYLE_ATTR_RE.findall(html)])


def html_heuristic_checks(html: str) -> dict[str, bool]:
    css = _css_text(html)
    props = set(_CSS_PROP_RE.findall(re.sub(r"\}", ";", css)))
    slide = parse_slide(html)
    secs = slide.sections
    hierarchy = bool(slide.title) and bool(secs) and all(s.heading for s in secs)
    lengths = [whitespace_tokens(s.body or "") for s in secs]
    mean = sum(lengths) / len(lengths) if lengths else 0.0
    balanced = mean > 0 and all(0.5 * mean <= n <= 1.5 * mean for n in lengths)
    colors = {tuple(int(c) for c in m) for m in _RGB_RE.findall(css)}
    return {
        "css_properties": len(props) >= 3,
        "heading_hierarchy": hierarchy,
        "section_balance": balanced,
        "non_default_palette": bool(colors) and not colors <= _DEFAULT_COLORS,
    }


def offline_html_score(html: str) -> float:
    return 0.25 * sum(html_heuristic_checks(html).values())


def offline_visual_score(png: bytes | None, html: str) -> float:
    has_png = bool(png) and png.startswith(b"\x89PNG")
    return 0.5 * has_png + 0.5 * offline_html_score(html)


def _earliest_audience(lowered: str) -> str | None:
    found, best_pos = None, None
    for phrase in AUDIENCE_LEXICON:
        m = re.search(rf"(?<!\w){re.escape(phrase)}(?!\w)", lowered)
        if m is None:
            continue
        key = (m.start(), -len(phrase))
        if best_pos is None or key < best_pos:
            found, best_pos = phrase, key
    return found


def offline_reconstruct(text: str) -> ReconPrediction:
    """Deterministic extractor standing in for the reconstruction judge."""
    titles, body = _split_deck_text(text)
    bigram_counts: Counter[tuple[str, str]] = Counter()
    first_seen: dict[tuple[str, str], int] = {}
    for t in titles:
        cw = content_words(t)
        for bg in zip(cw, cw[1:]):
            bigram_counts[bg] += 1
            first_seen.setdefault(bg, len(first_seen))
    topic = ""
    if bigram_counts:
        best = max(bigram_counts, key=lambda bg: (bigram_counts[bg], -first_seen[bg]))
        for t in titles:
            cw = content_words(t)
            if best in zip(cw, cw[1:]):
                topic = t
                break
    else:
        topic = next((t for t in titles if t), "")

    # lines labelled as the audience win over incidental mentions
    labelled = "\n".join(ln for ln in body.splitlines() if re.match(r"^\W*audience\b", ln, re.I))
    audience = _earliest_audience(labelled.lower()) or _earliest_audience(body.lower()) or "general"

    words = content_words(body)
    counts = Counter(words)
    order = {w: i for i, w in reversed(list(enumerate(words)))}
    themes = sorted(counts, key=lambda w: (-counts[w], order[w]))[:3]
    return ReconPrediction(topic, audience, len(titles), tuple(themes))


# ---------------------------------------------------------------------------
# Backends


class JudgeBackend(Protocol):
    def score(self, kind: str, payload: str | bytes, html: str | None) -> float: ...

    def reconstruct(self, text: str) -> ReconPrediction: ...


class OfflineBackend:
    """Heuristic judges; no network, fully deterministic."""

    def score(self, kind: str, payload: str | bytes, html: str | None) -> float:
        if kind == HTML_AESTHETIC:
            return offline_html_score(payload if isinstance(payload, str) else payload.decode("utf-8"))
        if kind == VISUAL_AESTHETIC:
            return offline_visual_score(payload if isinstance(payload, bytes) else None, html or "")
        raise ValueError(f"cannot score kind {kind!r}")

    def reconstruct(self, text: str) -> ReconPrediction:
        return offline_reconstruct(text)


@dataclass
class RemoteBackend:
    """HTTP judge: ``POST {kind, prompt, payload, model}`` -> ``{"reply": text}``.

    PNG payloads travel base64-encoded. Transport errors and unparseable
    replies are retried ``max_retries`` times, then raise JudgeUnavailable.
    """

    endpoint: str
    model_name: str = "judge"
    timeout: float = 60.0
    max_retries: int = 2
    max_in_flight: int = 4
    backoff: float = 0.5
    opener: Callable[..., Any] = urllib.request.urlopen
    _slots: threading.BoundedSemaphore = field(init=False, repr=False)

    def __post_init__(self) -> None:
        self._slots = threading.BoundedSemaphore(self.max_in_flight)

    def _post(self, kind: str, prompt: str, payload: str | bytes) -> str:
        body = {
            "kind": kind,
            "prompt": prompt,
            "model": self.model_name,
            "payload": base64.b64encode(payload).decode("ascii") if isinstance(payload, bytes) else payload,
            "payload_encoding": "base64" if isinstance(payload, bytes) else "text",
        }
        req = urllib.request.Request(
            self.endpoint,
            data=json.dumps(body).encode("utf-8"),
            headers={"Content-Type": "application/json"},
            method="POST",
        )
        with self._slots:
            with self.opener(req, timeout=self.timeout) as resp:
                data = json.loads(resp.read().decode("utf-8"))
        return str(data["reply"])

    def _with_retries(self, fn: Callable[[], Any]) -> Any:
        last: Exception | None = None
        for attempt in range(self.max_retries + 1):
            try:
                return fn()
            except (OSError, urllib.error.URLError, ValueError, KeyError, TimeoutError) as exc:
                last = exc
                logger.warning("judge call failed (attempt %d): %s", attempt + 1, exc)
                if attempt < self.max_retries:
                    time.sleep(self.backoff * (2**attempt))
        raise JudgeUnavailable(f"judge at {self.endpoint} unavailable: {last}")

    def score(self, kind: str, payload: str | bytes, html: str | None) -> float:
        prompt = HTML_RUBRIC_PROMPT if kind == HTML_AESTHETIC else VISUAL_RUBRIC_PROMPT
        return self._with_retries(lambda: parse_score_reply(self._post(kind, prompt, payload)))

    def reconstruct(self, text: str) -> ReconPrediction:
        reply = self._with_retries(lambda: self._post(RECONSTRUCT, INVERSE_SPEC_PROMPT, text))
        return parse_reconstruction_reply(reply)


# ---------------------------------------------------------------------------
# Gateway


@dataclass
class JudgeConfig:
    endpoint: str = ""
    model_name: str = "judge"
    timeout: float = 60.0
    max_retries: int = 2
    cache_path: str | None = None
    mode: str = "offline"
    max_in_flight: int = 4

    def __post_init__(self) -> None:
        if self.max_retries < 0:
            raise ValueError("max_retries must be >= 0")
        if self.mode not in ("offline", "remote"):
            raise ValueError(f"mode must be 'offline' or 'remote', got {self.mode!r}")
        if self.mode == "remote" and not self.endpoint:
            raise ValueError("remote mode needs an endpoint")

    @classmethod
    def from_env(cls, environ: dict[str, str] | None = None) -> "JudgeConfig":
        env = os.environ if environ is None else environ
        return cls(
            endpoint=env.get("JUDGE_ENDPOINT", ""),
            mode=env.get("JUDGE_MODE", "offline"),
            cache_path=env.get("JUDGE_CACHE") or None,
        )


class JudgeGateway:
    def __init__(self, config: JudgeConfig | None = None, backend: JudgeBackend | None = None):
        self.config = config or JudgeConfig()
        if backend is None:
            if self.config.mode == "remote":
                backend = RemoteBackend(
                    self.config.endpoint,
                    self.config.model_name,
                    self.config.timeout,
                    self.config.max_retries,
                    self.config.max_in_flight,
                )
            else:
                backend = OfflineBackend()
        self.backend = backend
        self.cache = JudgeCache(self.config.cache_path)

    @property
    def offline(self) -> bool:
        return isinstance(self.backend, OfflineBackend)

    def judge_slide(self, kind: str, payload: str | bytes, html: str | None = None) -> float:
        """Score one slide; ``html`` gives offline visual judging its markup context."""
        if kind not in (HTML_AESTHETIC, VISUAL_AESTHETIC):
            raise ValueError(f"judge_slide kind must be an aesthetic kind, got {kind!r}")
        key = content_hash(kind, payload)
        cached = self.cache.lookup(key)
        if cached is not None:
            return float(cached)
        score = min(1.0, max(0.0, float(self.backend.score(kind, payload, html))))
        self.cache.store(key, score)
        return score

    def reconstruct_brief(self, text: str) -> ReconPrediction:
        key = content_hash(RECONSTRUCT, text)
        cached = self.cache.lookup(key)
        if cached is not None:
            return ReconPrediction.from_dict(cached)
        pred = self.backend.reconstruct(text)
        self.cache.store(key, pred.to_dict())
        return pred


def offline_gateway() -> JudgeGateway:
    return JudgeGateway(JudgeConfig(mode="offline"))
