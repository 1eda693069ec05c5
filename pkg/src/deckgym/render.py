"""Slide HTML rendering, structural validation, PNG adapters and theme palettes.

A stored slide is a self-contained markup fragment: one ``.slide`` element
carrying its own scoped ``<style>`` block, a ``.title`` and one ``.section``
(with ``.heading`` and ``.body``) per section. Fragments concatenate into
``deck.html`` byte-for-byte.
"""
from __future__ import annotations

import hashlib
import html as htmlmod
import io
import logging
import math
import subprocess
from dataclasses import dataclass, field, replace
from fractions import Fraction
from functools import cached_property, lru_cache
from html.parser import HTMLParser
from typing import Protocol, Sequence

from deckgym.text import normalize_ws, whitespace_tokens

logger = logging.getLogger(__name__)

RGB = tuple[int, int, int]

SLIDE_WIDTH = 1280
SLIDE_HEIGHT = 720
THUMBNAIL_WIDTH = 256
MARKER_KEY = "deckgym-marker"


@dataclass(frozen=True)
class ThemePalette:
    name: str
    bg: RGB
    text: RGB
    accent: RGB
    secondary: RGB
    colors: float = 1.0

    def with_colors(self, colors: float) -> "ThemePalette":
        return replace(self, colors=colors)


THEMES: dict[str, ThemePalette] = {
    "default": ThemePalette("default", (255, 255, 255), (33, 33, 33), (41, 98, 255), (100, 181, 246)),
    "dark": ThemePalette("dark", (30, 30, 30), (240, 240, 240), (0, 200, 83), (76, 175, 80)),
    "corporate": ThemePalette("corporate", (245, 245, 245), (44, 62, 80), (52, 73, 94), (149, 165, 166)),
    "creative": ThemePalette("creative", (255, 253, 231), (33, 33, 33), (255, 87, 34), (255, 167, 38)),
    "tech": ThemePalette("tech", (18, 18, 18), (224, 224, 224), (0, 229, 255), (29, 233, 182)),
}

PALETTE_ROLES = ("bg", "text", "accent", "secondary")


def _round_half_up(x: Fraction) -> int:
    return math.floor(x + Fraction(1, 2))


def luma(rgb: RGB) -> int:
    r, g, b = rgb
    return _round_half_up(Fraction(299 * r + 587 * g + 114 * b, 1000))


def interpolate_color(rgb: RGB, colors: float) -> RGB:
    if not 0.0 <= colors <= 1.0:
        raise ValueError(f"colors must be in [0, 1], got {colors}")
    t = Fraction(colors)
    y = luma(rgb)
    return tuple(_round_half_up(y + (c - y) * t) for c in rgb)  # type: ignore[return-value]


def interpolate_palette(theme: ThemePalette) -> dict[str, RGB]:
    """Concrete colors for a palette at its ``colors`` intensity.

    ``colors=1.0`` reproduces the palette constants; ``0.0`` maps every color to
    its luma gray.
    """
    return {role: interpolate_color(getattr(theme, role), theme.colors) for role in PALETTE_ROLES}


def get_theme(name: str, colors: float = 1.0) -> ThemePalette:
    if name not in THEMES:
        raise KeyError(f"unknown theme {name!r}; expected one of {sorted(THEMES)}")
    if not 0.0 <= colors <= 1.0:
        raise ValueError(f"colors must be in [0, 1], got {colors}")
    return THEMES[name].with_colors(colors)


# ---------------------------------------------------------------------------
# Rendering


@dataclass(frozen=True)
class Section:
    heading: str = ""
    body: str = ""


@dataclass(frozen=True)
class SlideSpec:
    slide_idx: int
    title: str
    sections: tuple[Section, ...] = ()

    @classmethod
    def create(cls, slide_idx: int, title: str, sections: Sequence[Section | dict] = ()) -> "SlideSpec":
        secs = []
        for s in sections:
            if isinstance(s, dict):
                s = Section(str(s.get("heading", "") or ""), str(s.get("body", "") or ""))
            secs.append(Section(s.heading.strip(), s.body.strip()))
        return cls(slide_idx, title.strip(), tuple(secs))

    def visible_text(self) -> str:
        parts = [self.title]
        for s in self.sections:
            parts += [s.heading, s.body]
        return " ".join(p for p in parts if p)


@dataclass(frozen=True)
class RenderedSlide:
    html: str
    png: bytes | None
    valid_html: bool
    word_count: int
    section_count: int
    filled_sections: int


def _css_rgb(rgb: RGB) -> str:
    return f"rgb({rgb[0]},{rgb[1]},{rgb[2]})"


def _palette_id(theme: ThemePalette) -> str:
    colors = interpolate_palette(theme)
    key = theme.name + ";" + ";".join(_css_rgb(colors[r]) for r in PALETTE_ROLES)
    return "p" + hashlib.sha256(key.encode()).hexdigest()[:10]


@lru_cache(maxsize=256)
def _slide_css(theme: ThemePalette, n_sections: int) -> tuple[str, str]:
    c = interpolate_palette(theme)
    pid = _palette_id(theme)
    scope = f'.slide[data-palette="{pid}"]'
    cols = max(1, min(n_sections, 3))
    css = (
        f"{scope}{{box-sizing:border-box;width:{SLIDE_WIDTH}px;height:{SLIDE_HEIGHT}px;"
        f"padding:56px 72px;overflow:hidden;background:{_css_rgb(c['bg'])};color:{_css_rgb(c['text'])};"
        "font-family:'Helvetica Neue',Arial,sans-serif;display:flex;flex-direction:column;}"
        f"{scope} .title{{margin:0 0 32px;font-size:44px;font-weight:700;line-height:1.15;"
        f"color:{_css_rgb(c['accent'])};border-bottom:4px solid {_css_rgb(c['secondary'])};padding-bottom:16px;}}"
        f"{scope} .sections{{display:grid;grid-template-columns:repeat({cols},1fr);gap:28px;}}"
        f"{scope} .section{{border-left:4px solid {_css_rgb(c['secondary'])};padding-left:18px;}}"
        f"{scope} .heading{{margin:0 0 10px;font-size:24px;font-weight:600;color:{_css_rgb(c['accent'])};}}"
        f"{scope} .body{{margin:0;font-size:18px;line-height:1.5;}}"
    )
    return pid, css


def render_slide_html(spec: SlideSpec, theme: ThemePalette) -> str:
    esc = htmlmod.escape
    pid, css = _slide_css(theme, len(spec.sections))
    out = [
        f'<div class="slide" data-theme="{esc(theme.name)}" data-palette="{pid}">',
        f"<style>{css}</style>",
        f'<h1 class="title">{esc(spec.title)}</h1>',
        '<div class="sections">',
    ]
    for s in spec.sections:
        out.append(
            f'<div class="section"><h2 class="heading">{esc(s.heading)}</h2>'
            f'<p class="body">{esc(s.body)}</p></div>'
        )
    out.append("</div>")
    out.append("</div>")
    return "\n".join(out)


def render_slide(spec: SlideSpec, theme: ThemePalette, renderer: "Renderer | None" = None) -> RenderedSlide:
    html = render_slide_html(spec, theme)
    valid = validate_html(html).valid
    png = render_png(html, renderer) if renderer is not None else None
    return RenderedSlide(
        html=html,
        png=png,
        valid_html=valid,
        word_count=whitespace_tokens(spec.visible_text()),
        section_count=len(spec.sections),
        filled_sections=sum(1 for s in spec.sections if s.body),
    )


# ---------------------------------------------------------------------------
# Parsing and validation

_VOID = frozenset("area base br col embed hr img input link meta param source track wbr".split())
_RAW_TEXT = frozenset(("style", "script"))


@dataclass
class _Node:
    tag: str
    classes: frozenset[str]
    start: int
    text: list[str] = field(default_factory=list)


@dataclass(frozen=True)
class ParsedSection:
    heading: str | None
    body: str | None


@dataclass(frozen=True)
class ParsedSlide:
    """Text content recovered from slide markup."""

    title: str | None
    sections: tuple[ParsedSection, ...]

    @property
    def title_present(self) -> bool:
        return bool(self.title)

    @property
    def section_count(self) -> int:
        return len(self.sections)

    @cached_property
    def filled_sections(self) -> int:
        return sum(1 for s in self.sections if s.body)

    def visible_text(self) -> str:
        parts = [self.title or ""]
        for s in self.sections:
            parts += [s.heading or "", s.body or ""]
        return " ".join(p for p in parts if p)

    @cached_property
    def word_count(self) -> int:
        return whitespace_tokens(self.visible_text())

    def to_spec(self, slide_idx: int = 0) -> SlideSpec:
        return SlideSpec.create(
            slide_idx, self.title or "", [Section(s.heading or "", s.body or "") for s in self.sections]
        )


class _SlideParser(HTMLParser):
    """Collects class-tagged text and structural findings in one pass."""

    def __init__(self) -> None:
        super().__init__(convert_charrefs=True)
        self.stack: list[_Node] = []
        self.findings: list[str] = []
        self.slides: list[dict] = []
        self._slide: dict | None = None
        self._section: dict | None = None
        self._slide_depth = -1
        self._section_depth = -1
        self._capture: tuple[str, int] | None = None
        self._buf: list[str] = []
        self._raw_depth = 0
        self._line_offsets = [0]

    def feed_document(self, doc: str) -> None:
        offsets = [0]
        for line in doc.splitlines(keepends=True):
            offsets.append(offsets[-1] + len(line))
        self._line_offsets = offsets
        self.feed(doc)
        if self.rawdata and "<" in self.rawdata:
            self.findings.append("truncated markup at end of document")
        self.close()
        for node in reversed(self.stack):
            self.findings.append(f"unclosed element <{node.tag}>")

    def _abs_offset(self) -> int:
        line, col = self.getpos()
        return self._line_offsets[line - 1] + col

    def handle_starttag(self, tag, attrs):
        classes = frozenset()
        for k, v in attrs:
            if k == "class" and v:
                classes = frozenset(v.split())
        if tag in _RAW_TEXT:
            self._raw_depth += 1
        if tag in _VOID:
            self._check_classes(tag, classes)
            return
        depth = len(self.stack)
        self.stack.append(_Node(tag, classes, self._abs_offset()))
        self._check_classes(tag, classes, depth)

    def handle_startendtag(self, tag, attrs):
        classes = frozenset()
        for k, v in attrs:
            if k == "class" and v:
                classes = frozenset(v.split())
        self._check_classes(tag, classes, None)

    def _check_classes(self, tag, classes, depth=None):
        if "slide" in classes:
            if self._slide is not None:
                self.findings.append("nested .slide element")
            elif depth is not None:
                self._slide = {"title": [], "sections": [], "start": self._abs_offset()}
                self._slide_depth = depth
            else:
                self.findings.append("empty self-closed .slide element")
        if "title" in classes:
            if self._slide is None:
                self.findings.append(".title outside .slide")
            elif depth is not None:
                self._begin_capture("title", depth)
            else:
                self._slide["title"].append("")
        if "section" in classes:
            if self._slide is None:
                self.findings.append(".section outside .slide")
            elif self._section is not None:
                self.findings.append("nested .section element")
            elif depth is not None:
                self._section = {"heading": [], "body": []}
                self._section_depth = depth
        for role in ("heading", "body"):
            if role in classes:
                if self._section is None:
                    if self._slide is not None:
                        self.findings.append(f".{role} outside .section")
                elif depth is not None:
                    self._begin_capture(role, depth)
                else:
                    self._section[role].append("")

    def _begin_capture(self, role: str, depth: int) -> None:
        if self._capture is not None:
            self.findings.append(f".{role} nested inside .{self._capture[0]}")
            return
        self._capture = (role, depth)
        self._buf = []

    def handle_endtag(self, tag):
        if tag in _VOID:
            return
        if not self.stack or self.stack[-1].tag != tag:
            if any(n.tag == tag for n in self.stack):
                while self.stack and self.stack[-1].tag != tag:
                    node = self.stack.pop()
                    self.findings.append(f"unclosed element <{node.tag}>")
                    self._close_depth(len(self.stack), node)
            else:
                self.findings.append(f"unexpected end tag </{tag}>")
                return
        node = self.stack.pop()
        if tag in _RAW_TEXT:
            self._raw_depth = max(0, self._raw_depth - 1)
        self._close_depth(len(self.stack), node)

    def _close_depth(self, depth: int, node: _Node) -> None:
        if self._capture is not None and self._capture[1] == depth:
            role = self._capture[0]
            text = normalize_ws("".join(self._buf))
            if role == "title" and self._slide is not None:
                self._slide["title"].append(text)
            elif self._section is not None:
                self._section[role].append(text)
            self._capture = None
        if self._section is not None and self._section_depth == depth:
            if self._slide is not None:
                self._slide["sections"].append(self._section)
            self._section = None
        if self._slide is not None and self._slide_depth == depth:
            start = self._slide["start"]
            line, col = self.getpos()
            end_start = self._line_offsets[line - 1] + col
            self._slide["span"] = (start, end_start)
            self.slides.append(self._slide)
            self._slide = None

    def handle_data(self, data):
        if self._raw_depth:
            return
        if self._capture is not None:
            self._buf.append(data)


@dataclass(frozen=True)
class HtmlValidation:
    valid: bool
    findings: tuple[str, ...]


@lru_cache(maxsize=8192)
def _parse(doc: str) -> tuple[tuple[str, ...], tuple[ParsedSlide, ...], tuple[tuple[int, int], ...]]:
    p = _SlideParser()
    p.feed_document(doc)
    findings = list(p.findings)
    slides = []
    spans = []
    if not p.slides:
        findings.append("missing .slide element")
    for i, s in enumerate(p.slides):
        if not s["title"]:
            findings.append(f"slide {i}: missing .title element")
        elif len(s["title"]) > 1:
            findings.append(f"slide {i}: multiple .title elements")
        sections = []
        for j, sec in enumerate(s["sections"]):
            if len(sec["heading"]) != 1:
                findings.append(f"slide {i} section {j}: expected one .heading")
            if len(sec["body"]) != 1:
                findings.append(f"slide {i} section {j}: expected one .body")
            sections.append(
                ParsedSection(sec["heading"][0] if sec["heading"] else None, sec["body"][0] if sec["body"] else None)
            )
        slides.append(ParsedSlide(s["title"][0] if s["title"] else None, tuple(sections)))
        spans.append(s["span"])
    return tuple(findings), tuple(slides), tuple(spans)


def validate_html(doc: str) -> HtmlValidation:
    """Structural check: markup parses cleanly and every ``.slide`` holds one ``.title``."""
    findings, _, _ = _parse(doc)
    return HtmlValidation(not findings, findings)


def parse_slide(doc: str) -> ParsedSlide:
    """Text content of the first ``.slide`` in ``doc`` (empty slide if none)."""
    _, slides, _ = _parse(doc)
    return slides[0] if slides else ParsedSlide(None, ())


def parse_slides(doc: str) -> tuple[ParsedSlide, ...]:
    return _parse(doc)[1]


def extract_slide_fragments(doc: str) -> list[str]:
    """Raw source of every top-level ``.slide`` element, end tag included."""
    out = []
    for start, end_start in _parse(doc)[2]:
        end = doc.index(">", end_start) + 1
        out.append(doc[start:end])
    return out


# ---------------------------------------------------------------------------
# PNG rendering


class Renderer(Protocol):
    def render(self, html: str) -> bytes | None: ...


def _png_bytes(width: int, height: int, color: RGB, text: dict[str, str] | None = None) -> bytes:
    from PIL import Image
    from PIL.PngImagePlugin import PngInfo

    img = Image.new("RGB", (width, height), color)
    info = PngInfo()
    for k, v in (text or {}).items():
        info.add_text(k, v)
    buf = io.BytesIO()
    img.save(buf, format="PNG", pnginfo=info)
    return buf.getvalue()


class StubRenderer:
    """Browser-free renderer: a small marker PNG iff the markup validates.

    The marker embeds the markup digest, so distinct slides give distinct bytes.
    """

    width = THUMBNAIL_WIDTH
    height = THUMBNAIL_WIDTH * SLIDE_HEIGHT // SLIDE_WIDTH

    def render(self, html: str) -> bytes | None:
        return _stub_png(html, self.width, self.height)


@lru_cache(maxsize=4096)
def _stub_png(html: str, width: int, height: int) -> bytes | None:
    if not validate_html(html).valid:
        return None
    digest = hashlib.sha256(html.encode("utf-8")).hexdigest()
    color = tuple(int(digest[i : i + 2], 16) for i in (0, 2, 4))
    return _png_bytes(width, height, color, {MARKER_KEY: digest})  # type: ignore[arg-type]


class SubprocessRenderer:
    """Renders through an external worker: markup on stdin, PNG on stdout.

    A nonzero exit, timeout or non-PNG output counts as a render failure. Calls
    are serialized so one worker browser is never driven concurrently.
    """

    def __init__(self, command: Sequence[str], timeout: float = 30.0):
        import threading

        self.command = list(command)
        self.timeout = timeout
        self._lock = threading.Lock()

    def render(self, html: str) -> bytes | None:
        with self._lock:
            try:
                proc = subprocess.run(
                    self.command,
                    input=as_document(html).encode("utf-8"),
                    capture_output=True,
                    timeout=self.timeout,
                )
            except (subprocess.TimeoutExpired, OSError) as exc:
                logger.warning("render worker failed: %s", exc)
                return None
        if proc.returncode != 0 or not proc.stdout.startswith(b"\x89PNG"):
            logger.warning("render worker exit %s: %s", proc.returncode, proc.stderr[-400:])
            return None
        return proc.stdout


def browser_renderer(timeout: float = 30.0) -> SubprocessRenderer:
    """Headless-browser adapter backed by ``python -m deckgym.screenshot``."""
    import sys

    return SubprocessRenderer([sys.executable, "-m", "deckgym.screenshot"], timeout=timeout)


def render_png(html: str, renderer: Renderer) -> bytes | None:
    try:
        return renderer.render(html)
    except Exception as exc:  # adapter crash is a render failure, not a fatal error
        logger.warning("renderer raised %r", exc)
        return None


def as_document(fragment: str, title: str = "slide") -> str:
    return (
        '<!DOCTYPE html>\n<html lang="en">\n<head>\n<meta charset="utf-8">\n'
        f"<title>{htmlmod.escape(title)}</title>\n<style>body{{margin:0;}}</style>\n</head>\n<body>\n"
        f"{fragment}\n</body>\n</html>\n"
    )


@lru_cache(maxsize=4096)
def thumbnail(png: bytes, width: int = THUMBNAIL_WIDTH) -> bytes:
    from PIL import Image

    img = Image.open(io.BytesIO(png))
    if img.width <= width:
        return png
    height = max(1, round(img.height * width / img.width))
    buf = io.BytesIO()
    img.convert("RGB").resize((width, height), Image.LANCZOS).save(buf, format="PNG")
    return buf.getvalue()


def png_size(png: bytes) -> tuple[int, int]:
    from PIL import Image

    return Image.open(io.BytesIO(png)).size
