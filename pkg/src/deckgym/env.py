"""Episode state machine: reset/step, the 14-tool executor and observations.

Step reward is the change in aggregate quality plus a small action term::

    r = (Q_new - Q_old) + r_action

so the cumulative reward of an episode telescopes to
``Q_final - Q_initial + sum(r_action)``.
"""
from __future__ import annotations

import base64
import enum
import hashlib
import json
import logging
import uuid
from collections import Counter
from dataclasses import dataclass, field, replace
from typing import Any, Mapping, Protocol, Sequence

from deckgym.briefs import SlideBrief, ensure_valid
from deckgym.judge import JudgeGateway, offline_gateway
from deckgym.render import (
    THEMES,
    Renderer,
    Section,
    SlideSpec,
    StubRenderer,
    get_theme,
    parse_slide,
    render_png,
    render_slide_html,
    thumbnail,
    validate_html,
)
from deckgym.rewards import ComponentWeights, RewardBreakdown, aggregate_rewards
from deckgym.text import content_set, flatten_content, iter_json_objects, normalize_ws

logger = logging.getLogger(__name__)

TOOL_NAMES: tuple[str, ...] = (
    "web_search",
    "fetch_url",
    "create_outline",
    "revise_outline",
    "generate_slide",
    "edit_slide",
    "set_theme",
    "get_slide_content",
    "delete_slide",
    "reorder_slides",
    "duplicate_slide",
    "insert_slide",
    "review_deck",
    "finalize",
)
TOOL_CATEGORIES: dict[str, str] = {
    "web_search": "research",
    "fetch_url": "research",
    "create_outline": "content",
    "revise_outline": "content",
    "generate_slide": "design",
    "edit_slide": "design",
    "set_theme": "design",
    "get_slide_content": "structure",
    "delete_slide": "structure",
    "reorder_slides": "structure",
    "duplicate_slide": "structure",
    "insert_slide": "structure",
    "review_deck": "meta",
    "finalize": "meta",
}


class Phase(str, enum.Enum):
    RESEARCH = "research"
    PLAN = "plan"
    GENERATE = "generate"
    REFINE = "refine"
    DONE = "done"

    @property
    def rank(self) -> int:
        return list(Phase).index(self)


def _advance(current: Phase, target: Phase) -> Phase:
    return target if target.rank > current.rank else current


class ProtocolError(RuntimeError):
    """The caller broke the reset/step contract (e.g. stepping a finished episode)."""


class ToolCallParseError(ValueError):
    pass


# ---------------------------------------------------------------------------
# Actions


@dataclass(frozen=True)
class ToolCall:
    tool: str
    params: dict[str, Any] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if self.tool not in TOOL_NAMES:
            raise ToolCallParseError(f"unknown tool {self.tool!r}")

    def to_dict(self) -> dict[str, Any]:
        return {"tool": self.tool, **self.params}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), ensure_ascii=False)

    @classmethod
    def from_dict(cls, obj: Mapping[str, Any]) -> "ToolCall":
        if "tool" not in obj:
            raise ToolCallParseError("object has no 'tool' key")
        tool = obj["tool"]
        if not isinstance(tool, str):
            raise ToolCallParseError("'tool' must be a string")
        params = {k: v for k, v in obj.items() if k != "tool"}
        # tolerate {"tool": ..., "params": {...}} envelopes
        if set(params) <= {"params", "parameters", "arguments"} and len(params) == 1:
            inner = next(iter(params.values()))
            if isinstance(inner, dict):
                params = dict(inner)
        return cls(tool, params)


@dataclass(frozen=True)
class ParseFailure:
    reason: str
    completion: str = ""


def parse_tool_call(completion: str) -> ToolCall:
    """The first JSON object with a ``"tool"`` key in ``completion``, as a ToolCall.

    Raises ToolCallParseError if there is none or its tool is not one of the 14.
    """
    for obj in iter_json_objects(completion):
        if "tool" in obj:
            return ToolCall.from_dict(obj)
    raise ToolCallParseError("no JSON tool call found")


def try_parse_tool_call(completion: str) -> ToolCall | ParseFailure:
    try:
        return parse_tool_call(completion)
    except ToolCallParseError as exc:
        return ParseFailure(str(exc), completion)


# ---------------------------------------------------------------------------
# Search providers


@dataclass(frozen=True)
class SearchResult:
    title: str
    url: str
    snippet: str


class SearchProvider(Protocol):
    def search(self, query: str, brief: SlideBrief) -> list[SearchResult]: ...

    def fetch(self, url: str, brief: SlideBrief) -> str | None: ...


def _content_facts(brief: SlideBrief) -> list[tuple[str, str]]:
    """(key path, text) pairs for every leaf of the brief content."""
    out: list[tuple[str, str]] = []

    def walk(prefix: str, v: Any) -> None:
        if isinstance(v, dict):
            for k, sub in v.items():
                walk(f"{prefix}/{k}" if prefix else str(k), sub)
        elif isinstance(v, (list, tuple)):
            out.append((prefix or "content", flatten_content(v)))
        elif v is not None:
            out.append((prefix or "content", str(v)))

    walk("", brief.content)
    return out


class OfflineSearchProvider:
    """Deterministic search over the brief's own facts plus synthetic background.

    Each fact is addressable as ``offline://<brief id>/<key path>``; results
    are ranked by content-word overlap with the query.
    """

    def __init__(self, max_results: int = 3):
        self.max_results = max_results

    def _documents(self, brief: SlideBrief) -> list[SearchResult]:
        docs = []
        for key, text in _content_facts(brief):
            label = key.replace("/", " ").replace("_", " ")
            docs.append(SearchResult(f"{brief.topic}: {label}", f"offline://{brief.id}/{key}", f"{label}: {text}"))
        return docs

    def search(self, query: str, brief: SlideBrief) -> list[SearchResult]:
        if not query.strip():
            return []
        q = content_set(query)
        scored = []
        for i, d in enumerate(self._documents(brief)):
            overlap = len(q & content_set(d.title + " " + d.snippet))
            if overlap:
                scored.append((-overlap, i, d))
        scored.sort(key=lambda t: (t[0], t[1]))
        results = [d for _, _, d in scored[: self.max_results]]
        if not results:
            tag = hashlib.sha256(f"{brief.id}|{normalize_ws(query).lower()}".encode()).hexdigest()[:8]
            results = [
                SearchResult(
                    f"Background: {query.strip()}",
                    f"offline://{brief.id}/background/{tag}",
                    f"Industry background on {query.strip()} relevant to {brief.topic} (ref {tag}).",
                )
            ]
        return results

    def fetch(self, url: str, brief: SlideBrief) -> str | None:
        for d in self._documents(brief):
            if d.url == url:
                return d.snippet
        return None


# ---------------------------------------------------------------------------
# State


@dataclass
class EnvState:
    brief: SlideBrief
    research_context: list[dict[str, str]] = field(default_factory=list)
    outline: list[dict[str, Any]] = field(default_factory=list)
    slides_html: list[str] = field(default_factory=list)
    slides_png: list[bytes | None] = field(default_factory=list)
    theme: str = "default"
    theme_colors: float = 1.0
    phase: Phase = Phase.RESEARCH
    edit_mode: bool = False
    original_slides_html: list[str] = field(default_factory=list)
    episode_id: str = ""
    step_count: int = 0
    step_budget: int = 35
    terminated: bool = False
    finalized: bool = False
    cumulative_reward: float = 0.0
    quality: float = 0.0
    initial_quality: float = 0.0
    tool_uses: Counter = field(default_factory=Counter)

    def copy(self) -> "EnvState":
        # slide strings/bytes are immutable, so copying the containers is enough
        return replace(
            self,
            research_context=[dict(r) for r in self.research_context],
            outline=[{"title": o["title"], "bullet_points": list(o["bullet_points"])} for o in self.outline],
            slides_html=list(self.slides_html),
            slides_png=list(self.slides_png),
            original_slides_html=list(self.original_slides_html),
            tool_uses=Counter(self.tool_uses),
        )

    @property
    def turns_remaining(self) -> int:
        return self.step_budget - self.step_count

    def summary(self) -> dict[str, Any]:
        """State view without reward internals."""
        return {
            "episode_id": self.episode_id,
            "brief_id": self.brief.id,
            "phase": self.phase.value,
            "slides": len(self.slides_html),
            "target_slides": self.brief.num_slides,
            "theme": self.theme,
            "outline_titles": [o["title"] for o in self.outline],
            "research_records": len(self.research_context),
            "step_count": self.step_count,
            "step_budget": self.step_budget,
            "terminated": self.terminated,
            "edit_mode": self.edit_mode,
        }


@dataclass(frozen=True)
class Observation:
    result: str
    success: bool
    current_slide_count: int
    phase: Phase
    slide_previews: tuple[str, ...] = ()

    def to_dict(self) -> dict[str, Any]:
        return {
            "result": self.result,
            "success": self.success,
            "current_slide_count": self.current_slide_count,
            "phase": self.phase.value,
            "slide_previews": list(self.slide_previews),
        }

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "Observation":
        return cls(
            str(d["result"]),
            bool(d["success"]),
            int(d["current_slide_count"]),
            Phase(d["phase"]),
            tuple(d.get("slide_previews", ())),
        )


@dataclass(frozen=True)
class StepResult:
    observation: Observation
    reward: float
    terminated: bool
    info: dict[str, Any]

    def to_dict(self) -> dict[str, Any]:
        info = dict(self.info)
        if isinstance(info.get("breakdown"), RewardBreakdown):
            info["breakdown"] = info["breakdown"].to_dict()
        return {
            "observation": self.observation.to_dict(),
            "reward": self.reward,
            "terminated": self.terminated,
            "info": info,
        }


def render_observation_text(obs: Observation, state: EnvState) -> str:
    ok = "true" if obs.success else "false"
    return (
        f"Tool result (success={ok}): {obs.result}\n"
        f"State: phase={obs.phase.value}, slides={obs.current_slide_count}/{state.brief.num_slides}, "
        f"turns remaining={state.step_budget - state.step_count}"
    )


# ---------------------------------------------------------------------------
# Configuration


@dataclass(frozen=True)
class ActionRewards:
    """The r_action term. ``review_free_uses`` switches on the diminishing-return
    variant: past that many uses, each further review_deck earns ``review_decay``
    less than the one before, turning into a cost."""

    success: float = 0.01
    finalize: float = 0.1
    failure: float = -0.02
    review_free_uses: int | None = None
    review_decay: float = 0.01

    def value(self, tool: str, success: bool, prior_uses: int) -> float:
        if not success:
            return self.failure
        if tool == "finalize":
            return self.finalize
        if tool == "review_deck" and self.review_free_uses is not None:
            excess = prior_uses + 1 - self.review_free_uses
            if excess > 0:
                return self.success - self.review_decay * excess
        return self.success


@dataclass
class EnvConfig:
    weights: ComponentWeights = field(default_factory=ComponentWeights)
    action_rewards: ActionRewards = field(default_factory=ActionRewards)
    renderer: Renderer = field(default_factory=StubRenderer)
    search: SearchProvider = field(default_factory=OfflineSearchProvider)
    step_judge: JudgeGateway | None = None  # None: a fresh offline gateway
    max_turns: int | None = None  # overrides brief.targets.max_turns
    previews: bool | None = None  # None: only for non-stub renderers
    renormalize_unavailable: bool = False

    def judge(self) -> JudgeGateway:
        if self.step_judge is None:
            self.step_judge = offline_gateway()
        return self.step_judge


# ---------------------------------------------------------------------------
# Tool executor


class _Malformed(Exception):
    pass


def _param(params: Mapping[str, Any], name: str, kind: type | tuple[type, ...], required: bool = True) -> Any:
    if name not in params:
        if required:
            raise _Malformed(f"missing parameter '{name}'")
        return None
    v = params[name]
    if kind is int or kind == (int,):
        if isinstance(v, bool) or not isinstance(v, int):
            if isinstance(v, float) and v.is_integer():
                return int(v)
            raise _Malformed(f"parameter '{name}' must be an integer")
        return v
    if not isinstance(v, kind):
        raise _Malformed(f"parameter '{name}' has the wrong type")
    return v


_SCHEMAS: dict[str, frozenset[str]] = {
    "web_search": frozenset({"query"}),
    "fetch_url": frozenset({"url"}),
    "create_outline": frozenset({"sections"}),
    "revise_outline": frozenset({"slide_idx", "title", "bullet_points"}),
    "generate_slide": frozenset({"slide_idx", "title", "sections"}),
    "edit_slide": frozenset({"slide_idx", "title", "sections"}),
    "set_theme": frozenset({"theme", "colors"}),
    "get_slide_content": frozenset({"idx"}),
    "delete_slide": frozenset({"idx"}),
    "reorder_slides": frozenset({"order"}),
    "duplicate_slide": frozenset({"idx"}),
    "insert_slide": frozenset({"pos", "title", "sections"}),
    "review_deck": frozenset(),
    "finalize": frozenset(),
}


def _sections(raw: Any) -> list[Section]:
    if not isinstance(raw, list):
        raise _Malformed("'sections' must be a list")
    out = []
    for s in raw:
        if isinstance(s, str):
            out.append(Section("", s))
        elif isinstance(s, dict) and set(s) <= {"heading", "body"}:
            h, b = s.get("heading", ""), s.get("body", "")
            if not isinstance(h, str) or not isinstance(b, str):
                raise _Malformed("section heading/body must be text")
            out.append(Section(h, b))
        else:
            raise _Malformed("each section must be {heading, body}")
    return out


def _bullets(raw: Any) -> list[str]:
    if raw is None:
        return []
    if not isinstance(raw, list) or not all(isinstance(b, str) for b in raw):
        raise _Malformed("'bullet_points' must be a list of text")
    return list(raw)


class ToolExecutor:
    """Applies one ToolCall to an EnvState in place and reports (result, success)."""

    def __init__(self, config: EnvConfig):
        self.config = config

    def theme(self, state: EnvState):
        return get_theme(state.theme, state.theme_colors)

    def render(self, state: EnvState, spec: SlideSpec) -> tuple[str, bytes | None]:
        html = render_slide_html(spec, self.theme(state))
        return html, render_png(html, self.config.renderer)

    def execute(self, state: EnvState, call: ToolCall) -> tuple[str, bool]:
        extra = set(call.params) - _SCHEMAS[call.tool]
        try:
            if extra:
                raise _Malformed(f"unexpected parameters {sorted(extra)}")
            return getattr(self, f"_t_{call.tool}")(state, call.params)
        except _Malformed as exc:
            return f"Invalid {call.tool} call: {exc}.", False

    # research
    def _t_web_search(self, state: EnvState, p: Mapping[str, Any]) -> tuple[str, bool]:
        query = _param(p, "query", str)
        results = self.config.search.search(query, state.brief)
        if not results:
            return f"No results for '{query}'.", False
        text = " ".join(r.snippet for r in results)
        state.research_context.append({"query": query, "result": text})
        lines = [f"{i + 1}. {r.title} <{r.url}>: {r.snippet}" for i, r in enumerate(results)]
        return f"Found {len(results)} result(s) for '{query}':\n" + "\n".join(lines), True

    def _t_fetch_url(self, state: EnvState, p: Mapping[str, Any]) -> tuple[str, bool]:
        url = _param(p, "url", str)
        text = self.config.search.fetch(url, state.brief)
        if text is None:
            return f"Could not fetch {url}.", False
        state.research_context.append({"url": url, "result": text})
        return f"Fetched {url}: {text}", True

    # content
    def _t_create_outline(self, state: EnvState, p: Mapping[str, Any]) -> tuple[str, bool]:
        raw = _param(p, "sections", list)
        if not raw:
            raise _Malformed("outline needs at least one section")
        outline = []
        for s in raw:
            if not isinstance(s, dict) or not isinstance(s.get("title"), str) or set(s) - {"title", "bullet_points"}:
                raise _Malformed("outline sections must be {title, bullet_points}")
            outline.append({"title": s["title"].strip(), "bullet_points": _bullets(s.get("bullet_points"))})
        state.outline = outline
        if state.phase == Phase.RESEARCH:
            state.phase = Phase.PLAN
        return f"Outline created with {len(outline)} sections.", True

    def _t_revise_outline(self, state: EnvState, p: Mapping[str, Any]) -> tuple[str, bool]:
        idx = _param(p, "slide_idx", int)
        title = _param(p, "title", str, required=False)
        bullets = p.get("bullet_points")
        if title is None and bullets is None:
            raise _Malformed("nothing to revise")
        if not 0 <= idx < len(state.outline):
            return f"Outline index {idx} out of range (outline has {len(state.outline)} entries).", False
        entry = state.outline[idx]
        if title is not None:
            entry["title"] = title.strip()
        if bullets is not None:
            entry["bullet_points"] = _bullets(bullets)
        return f"Outline entry {idx} revised.", True

    # design
    def _t_generate_slide(self, state: EnvState, p: Mapping[str, Any]) -> tuple[str, bool]:
        idx = _param(p, "slide_idx", int)
        title = _param(p, "title", str)
        sections = _sections(_param(p, "sections", list))
        n = len(state.slides_html)
        if not 0 <= idx <= n:
            return f"Slide index {idx} out of range (deck has {n} slides; next index is {n}).", False
        html, png = self.render(state, SlideSpec.create(idx, title, sections))
        if idx == n:
            state.slides_html.append(html)
            state.slides_png.append(png)
        else:
            state.slides_html[idx] = html
            state.slides_png[idx] = png
        state.phase = _advance(state.phase, Phase.GENERATE)
        return f"Slide {idx} generated and rendered ({len(sections)} sections).", True

    def _t_edit_slide(self, state: EnvState, p: Mapping[str, Any]) -> tuple[str, bool]:
        idx = _param(p, "slide_idx", int)
        title = _param(p, "title", str, required=False)
        raw = _param(p, "sections", list, required=False)
        if title is None and raw is None:
            raise _Malformed("nothing to edit")
        sections = _sections(raw) if raw is not None else None
        if not 0 <= idx < len(state.slides_html):
            return f"Slide index {idx} out of range (deck has {len(state.slides_html)} slides).", False
        cur = parse_slide(state.slides_html[idx]).to_spec(idx)
        spec = SlideSpec.create(
            idx, cur.title if title is None else title, cur.sections if sections is None else sections
        )
        state.slides_html[idx], state.slides_png[idx] = self.render(state, spec)
        if state.phase == Phase.GENERATE:
            state.phase = Phase.REFINE
        return f"Slide {idx} edited and re-rendered ({len(spec.sections)} sections).", True

    def _t_set_theme(self, state: EnvState, p: Mapping[str, Any]) -> tuple[str, bool]:
        name = _param(p, "theme", str)
        colors = p.get("colors", 1.0)
        if isinstance(colors, bool) or not isinstance(colors, (int, float)):
            raise _Malformed("'colors' must be a number")
        if name not in THEMES:
            return f"Unknown theme '{name}'. Available: {', '.join(THEMES)}.", False
        if not 0.0 <= colors <= 1.0:
            return f"Color intensity {colors} out of range [0, 1].", False
        state.theme, state.theme_colors = name, float(colors)
        for i, h in enumerate(state.slides_html):
            state.slides_html[i], state.slides_png[i] = self.render(state, parse_slide(h).to_spec(i))
        return f"Theme set to '{name}' (colors={float(colors):g}); {len(state.slides_html)} slides re-rendered.", True

    # structure
    def _index(self, state: EnvState, p: Mapping[str, Any], name: str = "idx") -> int | None:
        idx = _param(p, name, int)
        return idx if 0 <= idx < len(state.slides_html) else None

    def _t_get_slide_content(self, state: EnvState, p: Mapping[str, Any]) -> tuple[str, bool]:
        idx = self._index(state, p)
        if idx is None:
            return f"Slide index {p['idx']} out of range.", False
        return state.slides_html[idx], True

    def _t_delete_slide(self, state: EnvState, p: Mapping[str, Any]) -> tuple[str, bool]:
        idx = self._index(state, p)
        if idx is None:
            return f"Slide index {p['idx']} out of range.", False
        del state.slides_html[idx]
        del state.slides_png[idx]
        return f"Slide {idx} deleted; {len(state.slides_html)} slides remain.", True

    def _t_duplicate_slide(self, state: EnvState, p: Mapping[str, Any]) -> tuple[str, bool]:
        idx = self._index(state, p)
        if idx is None:
            return f"Slide index {p['idx']} out of range.", False
        state.slides_html.insert(idx + 1, state.slides_html[idx])
        state.slides_png.insert(idx + 1, state.slides_png[idx])
        return f"Slide {idx} duplicated to position {idx + 1}.", True

    def _t_insert_slide(self, state: EnvState, p: Mapping[str, Any]) -> tuple[str, bool]:
        pos = _param(p, "pos", int)
        title = _param(p, "title", str, required=False) or ""
        raw = _param(p, "sections", list, required=False)
        sections = _sections(raw) if raw is not None else []
        n = len(state.slides_html)
        if not 0 <= pos <= n:
            return f"Insert position {pos} out of range (0..{n}).", False
        html, png = self.render(state, SlideSpec.create(pos, title, sections))
        state.slides_html.insert(pos, html)
        state.slides_png.insert(pos, png)
        return f"Slide inserted at position {pos}; deck has {n + 1} slides.", True

    def _t_reorder_slides(self, state: EnvState, p: Mapping[str, Any]) -> tuple[str, bool]:
        order = _param(p, "order", list)
        n = len(state.slides_html)
        if any(isinstance(i, bool) or not isinstance(i, int) for i in order) or sorted(order) != list(range(n)):
            return f"Order {order} is not a permutation of 0..{n - 1}.", False
        state.slides_html = [state.slides_html[i] for i in order]
        state.slides_png = [state.slides_png[i] for i in order]
        return f"Slides reordered to {order}.", True

    # meta
    def _t_review_deck(self, state: EnvState, p: Mapping[str, Any]) -> tuple[str, bool]:
        return review_summary(state), True

    def _t_finalize(self, state: EnvState, p: Mapping[str, Any]) -> tuple[str, bool]:
        if not state.slides_html:
            return "Cannot finalize an empty deck.", False
        state.phase = Phase.DONE
        state.terminated = True
        state.finalized = True
        return f"Deck finalized with {len(state.slides_html)} slides.", True


def review_summary(state: EnvState) -> str:
    n = len(state.slides_html)
    lines = [f"Deck review: {n}/{state.brief.num_slides} slides, theme '{state.theme}', phase {state.phase.value}."]
    for i, h in enumerate(state.slides_html):
        s = parse_slide(h)
        ok = "valid" if validate_html(h).valid else "invalid"
        png = "rendered" if state.slides_png[i] else "not rendered"
        lines.append(
            f"[{i}] {s.title or '(untitled)'}: {s.section_count} sections, {s.word_count} words, {ok}, {png}."
        )
    if state.outline:
        lines.append("Outline: " + "; ".join(o["title"] for o in state.outline))
    return "\n".join(lines)


def execute_tool(state: EnvState, call: ToolCall, config: EnvConfig | None = None) -> tuple[str, bool]:
    return ToolExecutor(config or EnvConfig()).execute(state, call)


# ---------------------------------------------------------------------------
# Environment


def brief_description(brief: SlideBrief) -> str:
    content = json.dumps(brief.content, ensure_ascii=False, sort_keys=True) if brief.content else "{}"
    return (
        f"New brief '{brief.id}': create a {brief.num_slides}-slide presentation on \"{brief.topic}\" "
        f"for {brief.audience}. Target {brief.targets.sections_per_slide} sections and about "
        f"{brief.targets.words_per_slide} words per slide. Content: {content}"
    )


class SlideEnv:
    """Single-episode environment. Not thread-safe; use one instance per runner."""

    def __init__(self, config: EnvConfig | None = None):
        self.config = config or EnvConfig()
        self.executor = ToolExecutor(self.config)
        self.state: EnvState | None = None

    def quality(self, state: EnvState) -> RewardBreakdown:
        return aggregate_rewards(
            state, self.config.judge(), self.config.weights, self.config.renormalize_unavailable
        )

    def _previews(self, state: EnvState) -> tuple[str, ...]:
        show = self.config.previews
        if show is None:
            show = not isinstance(self.config.renderer, StubRenderer)
        if not show:
            return ()
        return tuple(base64.b64encode(thumbnail(p)).decode("ascii") for p in state.slides_png if p)

    def observe(self, result: str, success: bool) -> Observation:
        s = self._require_state()
        return Observation(result, success, len(s.slides_html), s.phase, self._previews(s))

    def _require_state(self) -> EnvState:
        if self.state is None:
            raise ProtocolError("call reset() first")
        return self.state

    def reset(
        self,
        brief: SlideBrief,
        seed_slides: Sequence[str] | None = None,
        episode_id: str | None = None,
    ) -> Observation:
        """Start an episode. ``seed_slides`` pre-loads a deck and enables edit mode."""
        ensure_valid(brief)
        state = EnvState(
            brief=brief,
            theme=brief.theme_hint or "default",
            episode_id=episode_id or uuid.uuid4().hex,
            step_budget=self.config.max_turns or brief.targets.max_turns,
        )
        if seed_slides:
            state.edit_mode = True
            state.slides_html = list(seed_slides)
            state.slides_png = [render_png(h, self.config.renderer) for h in seed_slides]
            state.original_slides_html = list(seed_slides)
        q = self.quality(state).aggregate
        state.quality = state.initial_quality = q
        self.state = state
        return self.observe(brief_description(brief), True)

    def step(self, call: ToolCall | ParseFailure | str | Mapping[str, Any]) -> StepResult:
        state = self._require_state()
        if state.terminated:
            raise ProtocolError(f"episode {state.episode_id} has terminated")
        if isinstance(call, str):
            call = try_parse_tool_call(call)
        elif isinstance(call, Mapping):
            try:
                call = ToolCall.from_dict(call)
            except ToolCallParseError as exc:
                call = ParseFailure(str(exc))

        if isinstance(call, ParseFailure):
            tool, result, success = None, f"Could not parse a tool call: {call.reason}.", False
        else:
            tool = call.tool
            prior = state.tool_uses[tool]
            result, success = self.executor.execute(state, call)
            state.tool_uses[tool] += 1

        q_old = state.quality
        breakdown = self.quality(state)
        q_new = breakdown.aggregate
        if tool is None:
            r_action = self.config.action_rewards.failure
        else:
            r_action = self.config.action_rewards.value(tool, success, prior)
        reward = (q_new - q_old) + r_action

        state.quality = q_new
        state.step_count += 1
        state.cumulative_reward += reward
        if state.step_count >= state.step_budget:
            state.terminated = True
        obs = self.observe(result, success)
        info = {
            "step": state.step_count - 1,
            "tool": tool,
            "success": success,
            "q_prev": q_old,
            "q": q_new,
            "delta_q": q_new - q_old,
            "r_action": r_action,
            "breakdown": breakdown,
            "finalized": state.finalized,
            "truncated": state.terminated and not state.finalized,
        }
        return StepResult(obs, reward, state.terminated, info)

    def observation_text(self, obs: Observation) -> str:
        return render_observation_text(obs, self._require_state())


def step(state: EnvState, call: ToolCall | ParseFailure | str, config: EnvConfig | None = None) -> StepResult:
    """Functional form: advance ``state`` in place by one action."""
    env = SlideEnv(config)
    env.state = state
    return env.step(call)


