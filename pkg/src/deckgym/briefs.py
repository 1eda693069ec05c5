"""Presentation briefs: schema, validation, and catalog loading."""
from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from importlib import resources
from pathlib import Path
from typing import Any, Iterator, Mapping

logger = logging.getLogger(__name__)

DEFAULT_SECTIONS_PER_SLIDE = 3
DEFAULT_WORDS_PER_SLIDE = 60
DEFAULT_MAX_TURNS = 35
MAX_NUM_SLIDES = 64

BRIEF_FIELDS = ("topic", "audience", "num_slides", "confidence", "content", "theme_hint", "targets")


class BriefValidationError(ValueError):
    """A brief violates its schema or invariants."""

    def __init__(self, message: str, violations: list[str] | None = None):
        super().__init__(message)
        self.violations = violations or []


@dataclass(frozen=True)
class BriefTargets:
    sections_per_slide: int = DEFAULT_SECTIONS_PER_SLIDE
    words_per_slide: int = DEFAULT_WORDS_PER_SLIDE
    max_turns: int = DEFAULT_MAX_TURNS


@dataclass(frozen=True)
class SlideBrief:
    id: str
    topic: str
    audience: str
    num_slides: int
    confidence: float
    content: Any = field(default_factory=dict)
    theme_hint: str | None = None
    targets: BriefTargets = field(default_factory=BriefTargets)

    def to_dict(self) -> dict[str, Any]:
        d = asdict(self)
        if d["theme_hint"] is None:
            del d["theme_hint"]
        return d

    @classmethod
    def from_dict(cls, data: Mapping[str, Any], default_id: str | None = None) -> "SlideBrief":
        """Build a brief from a JSON document. Raises BriefValidationError on shape errors.

        Range invariants are not checked here; use :func:`validate_brief`.
        """
        if not isinstance(data, Mapping):
            raise BriefValidationError("brief document must be a JSON object")
        unknown = set(data) - set(BRIEF_FIELDS) - {"id"}
        if unknown:
            raise BriefValidationError(f"unknown brief fields: {sorted(unknown)}")
        missing = [k for k in ("topic", "audience", "num_slides", "confidence") if k not in data]
        if missing:
            raise BriefValidationError(f"missing brief fields: {missing}")
        brief_id = data.get("id", default_id)
        if not brief_id:
            raise BriefValidationError("brief has no id")
        targets_raw = data.get("targets") or {}
        if not isinstance(targets_raw, Mapping):
            raise BriefValidationError("targets must be an object")
        bad = set(targets_raw) - {"sections_per_slide", "words_per_slide", "max_turns"}
        if bad:
            raise BriefValidationError(f"unknown targets fields: {sorted(bad)}")
        try:
            targets = BriefTargets(**{k: int(v) for k, v in targets_raw.items()})
            num_slides = _as_int(data["num_slides"])
            confidence = float(data["confidence"])
        except (TypeError, ValueError) as exc:
            raise BriefValidationError(f"bad numeric field: {exc}") from exc
        return cls(
            id=str(brief_id),
            topic=str(data["topic"]),
            audience=str(data["audience"]),
            num_slides=num_slides,
            confidence=confidence,
            content=data.get("content") or {},
            theme_hint=data.get("theme_hint"),
            targets=targets,
        )


def _as_int(value: Any) -> int:
    if isinstance(value, bool) or (isinstance(value, float) and not value.is_integer()):
        raise ValueError(f"expected integer, got {value!r}")
    return int(value)


@dataclass(frozen=True)
class ValidationReport:
    violations: tuple[str, ...] = ()

    @property
    def ok(self) -> bool:
        return not self.violations

    def __bool__(self) -> bool:
        return self.ok


def validate_brief(brief: SlideBrief) -> ValidationReport:
    from deckgym.render import THEMES

    v: list[str] = []
    if not 1 <= brief.num_slides <= MAX_NUM_SLIDES:
        v.append("num_slides out of range")
    if not 0.0 <= brief.confidence <= 1.0:
        v.append("confidence out of range")
    if not brief.topic.strip():
        v.append("topic is empty")
    if brief.theme_hint is not None and brief.theme_hint not in THEMES:
        v.append(f"unknown theme_hint {brief.theme_hint!r}")
    t = brief.targets
    if t.sections_per_slide < 1:
        v.append("targets.sections_per_slide must be >= 1")
    if t.words_per_slide < 1:
        v.append("targets.words_per_slide must be >= 1")
    if t.max_turns < 1:
        v.append("targets.max_turns must be >= 1")
    return ValidationReport(tuple(v))


def ensure_valid(brief: SlideBrief) -> None:
    report = validate_brief(brief)
    if not report.ok:
        raise BriefValidationError(
            f"brief {brief.id!r} is invalid: {'; '.join(report.violations)}", list(report.violations)
        )


@dataclass(frozen=True)
class CatalogError:
    source: str
    message: str


@dataclass(frozen=True)
class BriefCatalog:
    briefs: tuple[SlideBrief, ...]
    source_path: str
    errors: tuple[CatalogError, ...] = ()

    def __len__(self) -> int:
        return len(self.briefs)

    def __iter__(self) -> Iterator[SlideBrief]:
        return iter(self.briefs)

    def get(self, brief_id: str) -> SlideBrief:
        for b in self.briefs:
            if b.id == brief_id:
                return b
        raise KeyError(brief_id)

    def ids(self) -> list[str]:
        return [b.id for b in self.briefs]


def _documents(path: Path) -> Iterator[tuple[str, str, Any]]:
    """Yield (source, default_id, parsed-or-exception) for each brief document under path."""
    files = sorted(path.glob("*.json")) if path.is_dir() else [path]
    for f in files:
        try:
            data = json.loads(f.read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            yield str(f), f.stem, exc
            continue
        if isinstance(data, list):
            for i, item in enumerate(data):
                yield f"{f}[{i}]", f"{f.stem}-{i}", item
        else:
            yield str(f), f.stem, data


def load_catalog(path: str | Path) -> BriefCatalog:
    """Load every brief document in a directory (``*.json``) or a single JSON file.

    A file may hold one brief object or a list of them. Unparseable or invalid
    entries land in ``catalog.errors``; duplicate ids raise.
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"brief path does not exist: {path}")
    seen: dict[str, str] = {}
    briefs: list[SlideBrief] = []
    errors: list[CatalogError] = []
    for source, default_id, doc in _documents(path):
        if isinstance(doc, Exception):
            errors.append(CatalogError(source, f"unparseable: {doc}"))
            continue
        try:
            brief = SlideBrief.from_dict(doc, default_id=default_id)
        except BriefValidationError as exc:
            errors.append(CatalogError(source, str(exc)))
            continue
        report = validate_brief(brief)
        if not report.ok:
            errors.append(CatalogError(source, "; ".join(report.violations)))
            continue
        if brief.id in seen:
            raise BriefValidationError(
                f"duplicate brief id {brief.id!r} in {seen[brief.id]} and {source}",
                [seen[brief.id], source],
            )
        seen[brief.id] = source
        briefs.append(brief)
    for e in errors:
        logger.warning("skipping brief %s: %s", e.source, e.message)
    briefs.sort(key=lambda b: b.id)
    return BriefCatalog(tuple(briefs), str(path), tuple(errors))


def builtin_catalog_path() -> Path:
    return Path(str(resources.files("deckgym") / "data" / "briefs"))


def builtin_catalog() -> BriefCatalog:
    """The 48 bundled business briefs."""
    return load_catalog(builtin_catalog_path())
