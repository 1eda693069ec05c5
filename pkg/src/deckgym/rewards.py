"""Six reward components and their weighted aggregate.

Every scorer takes a deck state (anything exposing ``brief``, ``slides_html``,
``slides_png``, ``research_context`` and ``outline``) and returns a value in
[0, 1]. An empty deck scores 0 on every component.
"""
from __future__ import annotations

import json
import logging
from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import TYPE_CHECKING, Any, Mapping, Protocol, Sequence

from deckgym.judge import (
    HTML_AESTHETIC,
    VISUAL_AESTHETIC,
    JudgeGateway,
    JudgeUnavailable,
    ReconPrediction,
    ReconstructionError,
    deck_text,
)
from deckgym.render import ParsedSlide, parse_slide, validate_html
from deckgym.text import content_set, content_words, flatten_content, jaccard, ngrams, normalize_ws

if TYPE_CHECKING:
    from deckgym.briefs import SlideBrief

logger = logging.getLogger(__name__)

COMPONENTS = (
    "code_rules",
    "render_quality",
    "aesthetic_html",
    "aesthetic_visual",
    "content_quality",
    "spec_reconstruction",
)
JUDGED_COMPONENTS = ("aesthetic_html", "aesthetic_visual", "spec_reconstruction")


class DeckState(Protocol):
    brief: "SlideBrief"
    slides_html: list[str]
    slides_png: list[bytes | None]
    research_context: list[dict[str, str]]
    outline: list[dict[str, Any]]


class RewardUnavailable(RuntimeError):
    """A judged component could not be scored and the policy is fail-closed."""

    def __init__(self, component: str, cause: Exception):
        super().__init__(f"{component} unavailable: {cause}")
        self.component = component
        self.cause = cause


@dataclass(frozen=True)
class ComponentWeights:
    code_rules: float = 1.0
    render_quality: float = 2.0
    aesthetic_html: float = 1.5
    aesthetic_visual: float = 1.5
    content_quality: float = 2.0
    spec_reconstruction: float = 2.0

    def __post_init__(self) -> None:
        vals = self.as_tuple()
        if any(v < 0 for v in vals):
            raise ValueError("component weights must be >= 0")
        if sum(vals) <= 0:
            raise ValueError("component weights must have a positive sum")

    def as_tuple(self) -> tuple[float, ...]:
        return tuple(float(getattr(self, c)) for c in COMPONENTS)

    def as_dict(self) -> dict[str, float]:
        return dict(zip(COMPONENTS, self.as_tuple()))

    def with_overrides(self, overrides: Mapping[str, float]) -> "ComponentWeights":
        unknown = set(overrides) - set(COMPONENTS)
        if unknown:
            raise ValueError(f"unknown reward components: {sorted(unknown)}")
        return ComponentWeights(**{**self.as_dict(), **{k: float(v) for k, v in overrides.items()}})

    @classmethod
    def from_file(cls, path: str | Path) -> "ComponentWeights":
        """Load weights from a JSON object keyed by component name (missing keys keep defaults)."""
        data = json.loads(Path(path).read_text(encoding="utf-8"))
        if isinstance(data, dict) and "weights" in data:
            data = data["weights"]
        return cls().with_overrides(data)


def weighted_mean(scores: Sequence[float], weights: Sequence[float]) -> float:
    total = sum(weights)
    return sum(w * s for w, s in zip(weights, scores)) / total


@dataclass(frozen=True)
class ReconScore:
    s_topic: float = 0.0
    s_audience: float = 0.0
    s_count: float = 0.0
    s_themes: float = 0.0
    diagnostic: str = ""

    @property
    def total(self) -> float:
        return 0.40 * self.s_topic + 0.25 * self.s_audience + 0.15 * self.s_count + 0.20 * self.s_themes


@dataclass(frozen=True)
class RewardBreakdown:
    scores: dict[str, float]
    weights: dict[str, float]
    aggregate: float
    unavailable: tuple[str, ...] = ()

    def __getitem__(self, name: str) -> float:
        return self.scores[name]

    def to_dict(self) -> dict[str, Any]:
        return {
            "scores": dict(self.scores),
            "weights": dict(self.weights),
            "aggregate": self.aggregate,
            "unavailable": list(self.unavailable),
        }

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "RewardBreakdown":
        return cls(dict(d["scores"]), dict(d["weights"]), float(d["aggregate"]), tuple(d.get("unavailable", ())))

    @classmethod
    def from_scores(cls, scores: Mapping[str, float], weights: ComponentWeights | None = None) -> "RewardBreakdown":
        w = weights or ComponentWeights()
        s = {c: float(scores[c]) for c in COMPONENTS}
        return cls(s, w.as_dict(), weighted_mean([s[c] for c in COMPONENTS], w.as_tuple()))


def _parsed(state: DeckState) -> list[ParsedSlide]:
    return [parse_slide(h) for h in state.slides_html]


# ---------------------------------------------------------------------------
# Deterministic components


def code_rules_terms(slide: ParsedSlide, sections_target: int, words_target: int) -> tuple[float, float, float, float]:
    """(title, section, word-ratio, filled) terms for one slide."""
    title = 0.25 if slide.title_present else 0.0
    n = slide.section_count
    s_sec = 0.25 if n == sections_target else (0.10 if n >= 1 else 0.0)
    w = slide.word_count
    ratio = 0.25 * min(w, words_target) / max(w, words_target)
    filled = 0.25 * slide.filled_sections / n if n else 0.0
    return title, s_sec, ratio, filled


def score_code_rules(state: DeckState) -> float:
    if not state.slides_html:
        return 0.0
    t = state.brief.targets
    per = [sum(code_rules_terms(s, t.sections_per_slide, t.words_per_slide)) for s in _parsed(state)]
    return sum(per) / len(per)


def score_render_quality(state: DeckState) -> float:
    n = len(state.slides_html)
    if n == 0:
        return 0.0
    target = state.brief.num_slides
    rendered = sum(1 for p in state.slides_png if p)
    v_html = 1.0 if all(validate_html(h).valid for h in state.slides_html) else 0.0
    return 0.4 * min(n / target, 1.0) + 0.3 * rendered / n + 0.3 * v_html


@dataclass(frozen=True)
class ContentBreakdown:
    topic: float
    grounding: float
    uniqueness: float
    coverage: float

    @property
    def total(self) -> float:
        return 0.35 * self.topic + 0.25 * self.grounding + 0.20 * self.uniqueness + 0.20 * self.coverage


def _research_index(records: Sequence[Mapping[str, str]]) -> tuple[frozenset[str], frozenset[tuple[str, ...]]]:
    """Rare tokens (document frequency 1 across records) and all content-word 4-grams."""
    df: Counter[str] = Counter()
    grams: set[tuple[str, ...]] = set()
    for rec in records:
        cw = content_words(str(rec.get("result", "")))
        df.update(set(cw))
        grams |= ngrams(cw, 4)
    return frozenset(w for w, c in df.items() if c == 1), frozenset(grams)


def content_breakdown(state: DeckState) -> ContentBreakdown:
    slides = _parsed(state)
    if not slides:
        return ContentBreakdown(0.0, 0.0, 0.0, 0.0)
    n = len(slides)
    texts = [s.visible_text() for s in slides]
    sets = [content_set(t) for t in texts]

    topic_words = content_set(state.brief.topic)
    topic = sum(1 for s in sets if s & topic_words) / n

    grounding = 0.0
    if state.research_context:
        rare, grams = _research_index(state.research_context)
        hits = 0
        for t, s in zip(texts, sets):
            if s & rare or ngrams(content_words(t), 4) & grams:
                hits += 1
        grounding = hits / n

    uniqueness = len({normalize_ws(t).lower() for t in texts}) / n

    coverage = 0.0
    if state.outline:
        covered = 0
        for entry in state.outline:
            need = content_set(str(entry.get("title", "")))
            if need and any(need <= s for s in sets):
                covered += 1
        coverage = covered / len(state.outline)
    return ContentBreakdown(topic, grounding, uniqueness, coverage)


def score_content_quality(state: DeckState) -> float:
    return content_breakdown(state).total


# ---------------------------------------------------------------------------
# Judged components


def score_aesthetic_html(state: DeckState, judge: JudgeGateway) -> float:
    if not state.slides_html:
        return 0.0
    vals = [judge.judge_slide(HTML_AESTHETIC, h) for h in state.slides_html]
    return sum(vals) / len(vals)


def score_aesthetic_visual(state: DeckState, judge: JudgeGateway) -> float:
    if not state.slides_html:
        return 0.0
    vals = [judge.judge_slide(VISUAL_AESTHETIC, p, html=h) if p else 0.0 for h, p in zip(state.slides_html, state.slides_png)]
    return sum(vals) / len(vals)


def audience_score(actual: str, predicted: str) -> float:
    a, p = actual.strip().lower(), predicted.strip().lower()
    if a == p:
        return 1.0
    if a and p and (a in p or p in a):
        return 0.5
    return jaccard(content_set(a), content_set(p))


def compare_reconstruction(brief: "SlideBrief", pred: ReconPrediction) -> ReconScore:
    topic_words = content_set(brief.topic)
    themes = list(pred.key_themes)
    s_themes = sum(1 for t in themes if content_set(t) & topic_words) / len(themes) if themes else 0.0
    if pred.num_slides <= 0:
        s_count = 0.0
    else:
        s_count = min(pred.num_slides, brief.num_slides) / max(pred.num_slides, brief.num_slides)
    return ReconScore(
        s_topic=jaccard(topic_words, content_set(pred.topic)),
        s_audience=audience_score(brief.audience, pred.audience),
        s_count=s_count,
        s_themes=s_themes,
    )


def score_spec_reconstruction(state: DeckState, judge: JudgeGateway) -> ReconScore:
    """Reconstruct the brief from slide text alone and compare to the real one."""
    if not state.slides_html:
        return ReconScore(diagnostic="empty deck")
    text = deck_text(_parsed(state))
    try:
        pred = judge.reconstruct_brief(text)
    except ReconstructionError as exc:
        logger.info("reconstruction failed: %s", exc)
        return ReconScore(diagnostic=f"reconstruction failed: {exc}")
    return compare_reconstruction(state.brief, pred)


# ---------------------------------------------------------------------------
# Aggregate


def aggregate_rewards(
    state: DeckState,
    judge: JudgeGateway,
    weights: ComponentWeights | None = None,
    renormalize_unavailable: bool = False,
) -> RewardBreakdown:
    """All six components and their weighted mean.

    A judge outage raises RewardUnavailable unless ``renormalize_unavailable``
    is set, in which case the failed components are dropped from the mean.
    """
    w = weights or ComponentWeights()
    scores: dict[str, float] = {
        "code_rules": score_code_rules(state),
        "render_quality": score_render_quality(state),
        "content_quality": score_content_quality(state),
    }
    judged = {
        "aesthetic_html": lambda: score_aesthetic_html(state, judge),
        "aesthetic_visual": lambda: score_aesthetic_visual(state, judge),
        "spec_reconstruction": lambda: score_spec_reconstruction(state, judge).total,
    }
    unavailable = []
    for name, fn in judged.items():
        try:
            scores[name] = fn()
        except JudgeUnavailable as exc:
            if not renormalize_unavailable:
                raise RewardUnavailable(name, exc) from exc
            unavailable.append(name)
            scores[name] = 0.0
    ordered = {c: scores[c] for c in COMPONENTS}
    active = [c for c in COMPONENTS if c not in unavailable]
    wd = w.as_dict()
    if sum(wd[c] for c in active) <= 0:
        raise RewardUnavailable("aggregate", RuntimeError("no weighted component available"))
    agg = weighted_mean([ordered[c] for c in active], [wd[c] for c in active])
    return RewardBreakdown(ordered, wd, agg, tuple(unavailable))


def brief_text(brief: "SlideBrief") -> str:
    """Brief fields as plain text, for grounding fixtures and verbatim-embedding decks."""
    return " ".join([brief.topic, brief.audience, flatten_content(brief.content)])


__all__ = [
    "COMPONENTS",
    "ComponentWeights",
    "ContentBreakdown",
    "ReconScore",
    "RewardBreakdown",
    "RewardUnavailable",
    "aggregate_rewards",
    "audience_score",
    "code_rules_terms",
    "compare_reconstruction",
    "content_breakdown",
    "score_aesthetic_html",
    "score_aesthetic_visual",
    "score_code_rules",
    "score_content_quality",
    "score_render_quality",
    "score_spec_reconstruction",
    "weighted_mean",
]
