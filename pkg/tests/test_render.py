from __future__ import annotations

import sys
import zipfile
from fractions import Fraction

import pytest
from hypothesis import given, settings, strategies as st

from deckgym.export import deck_html, deck_pptx, export_deck, pptx_slide_parts
from deckgym.render import (
    THEMES,
    Section,
    SlideSpec,
    StubRenderer,
    SubprocessRenderer,
    extract_slide_fragments,
    get_theme,
    interpolate_palette,
    luma,
    parse_slide,
    parse_slides,
    png_size,
    render_png,
    render_slide,
    validate_html,
)
from deckgym.text import whitespace_tokens

Q4 = SlideSpec.create(
    3,
    "Q4 Revenue Performance",
    [Section("Revenue Growth", "Revenue grew 23% year-over-year to $4.2M"),
     Section("Key Drivers", "Enterprise expansion and new logos")],
)


def test_table_palettes_exact():
    assert THEMES["default"].accent == (41, 98, 255)
    assert interpolate_palette(get_theme("default"))["accent"] == (41, 98, 255)
    expected = {
        "default": ((255, 255, 255), (33, 33, 33), (41, 98, 255), (100, 181, 246)),
        "dark": ((30, 30, 30), (240, 240, 240), (0, 200, 83), (76, 175, 80)),
        "corporate": ((245, 245, 245), (44, 62, 80), (52, 73, 94), (149, 165, 166)),
        "creative": ((255, 253, 231), (33, 33, 33), (255, 87, 34), (255, 167, 38)),
        "tech": ((18, 18, 18), (224, 224, 224), (0, 229, 255), (29, 233, 182)),
    }
    for name, roles in expected.items():
        assert tuple(interpolate_palette(get_theme(name)).values()) == roles


def _half_up(x: Fraction) -> int:
    return int(x + Fraction(1, 2)) if x >= 0 else -int(-x + Fraction(1, 2))


def test_midpoint_hand_computed():
    r, g, b = 41, 98, 255
    y = _half_up(Fraction(299 * r + 587 * g + 114 * b, 1000))  # 98.845 -> 99
    assert y == 99 == luma((r, g, b))
    mid = tuple(_half_up(Fraction(y + c, 2)) for c in (r, g, b))
    assert mid == (70, 99, 177)
    assert interpolate_palette(get_theme("default", 0.5))["accent"] == mid


@pytest.mark.parametrize("name", sorted(THEMES))
def test_grayscale_endpoint(name):
    for r, g, b in interpolate_palette(get_theme(name, 0.0)).values():
        assert r == g == b


def test_colors_out_of_range():
    with pytest.raises(ValueError):
        get_theme("default", 1.2)
    with pytest.raises(KeyError):
        get_theme("neon")


def test_q4_example_structure():
    rs = render_slide(Q4, get_theme("default"))
    assert rs.html.count('class="title"') == 1
    assert rs.html.count('class="section"') == 2
    assert rs.section_count == 2 and rs.filled_sections == 2 and rs.valid_html
    assert rs.word_count == whitespace_tokens(Q4.visible_text())


def test_degenerate_spec():
    rs = render_slide(SlideSpec.create(0, "", []), get_theme("dark"))
    assert rs.word_count == 0 and rs.filled_sections == 0 and rs.section_count == 0
    assert rs.valid_html


def test_deterministic_bytes():
    a = render_slide(Q4, get_theme("tech"), StubRenderer())
    b = render_slide(Q4, get_theme("tech"), StubRenderer())
    assert a.html == b.html and a.png == b.png


def test_validate_rejects():
    v = validate_html("<div>hello</div>")
    assert not v.valid and any(".slide" in f for f in v.findings)
    html = render_slide(Q4, get_theme("default")).html
    broken = html[: len(html) // 2]
    v = validate_html(broken)
    assert not v.valid
    assert any("unclosed" in f or "parse" in f or "end" in f for f in v.findings), v.findings


def test_stub_renderer_contract():
    html = render_slide(Q4, get_theme("default")).html
    png = render_png(html, StubRenderer())
    assert png is not None and png.startswith(b"\x89PNG")
    assert render_png("<div>hello</div>", StubRenderer()) is None


FAKE_WORKER = r"""
import io, sys
from PIL import Image
html = sys.stdin.buffer.read().decode()
if "FAIL" in html:
    sys.exit(1)
buf = io.BytesIO()
Image.new("RGB", (1280, 720), (255, 255, 255)).save(buf, format="PNG")
sys.stdout.buffer.write(buf.getvalue())
"""


def test_subprocess_adapter_protocol(tmp_path):
    worker = tmp_path / "worker.py"
    worker.write_text(FAKE_WORKER)
    r = SubprocessRenderer([sys.executable, str(worker)], timeout=30)
    png = render_png(render_slide(Q4, get_theme("default")).html, r)
    assert png is not None and png_size(png) == (1280, 720)
    assert r.render("FAIL") is None
    assert SubprocessRenderer(["/nonexistent/worker"]).render("<p>") is None


def test_browser_adapter_real():
    pytest.importorskip("playwright")
    from deckgym.render import browser_renderer

    png = browser_renderer(timeout=60).render(render_slide(Q4, get_theme("default")).html)
    if png is None:
        pytest.skip("no browser executable available")
    assert png_size(png) == (1280, 720)


def test_screenshot_worker_fails_cleanly(monkeypatch, capsys):
    import io

    from deckgym import screenshot

    monkeypatch.setattr(sys, "stdin", io.TextIOWrapper(io.BytesIO(b"")))
    assert screenshot.main([]) != 0


def test_export_counts_and_round_trip(tmp_path):
    slides = [render_slide(SlideSpec.create(i, f"Slide {i}", [Section("H", f"body {i}")]), get_theme("default")).html
              for i in range(7)]
    paths = export_deck(slides, tmp_path / "out", "Demo")
    doc = paths["deck_html"].read_text()
    assert validate_html(doc).valid
    assert doc.count('class="slide"') == 7
    assert extract_slide_fragments(doc) == slides
    assert len(parse_slides(doc)) == 7
    assert len(pptx_slide_parts(paths["deck_pptx"].read_bytes())) == 7


def test_single_slide_pptx_opens(tmp_path):
    html = render_slide(Q4, get_theme("default")).html
    data = deck_pptx([parse_slide(html)])
    assert pptx_slide_parts(data) == ["/ppt/slides/slide1.xml"]
    assert zipfile.ZipFile(__import__("io").BytesIO(data)).testzip() is None
    pptx = pytest.importorskip("pptx")
    p = tmp_path / "d.pptx"
    p.write_bytes(data)
    prs = pptx.Presentation(str(p))
    assert len(prs.slides) == 1
    texts = " ".join(sh.text_frame.text for sh in prs.slides[0].shapes if sh.has_text_frame)
    assert "Q4 Revenue Performance" in texts and "Key Drivers" in texts


def test_empty_export_rejected(tmp_path):
    with pytest.raises(ValueError):
        export_deck([], tmp_path)
    assert "deck-nav" in deck_html([])


text = st.text(alphabet=st.characters(blacklist_categories=("Cs",)), max_size=40)
specs = st.builds(
    lambda t, secs: SlideSpec.create(0, t, [Section(h, b) for h, b in secs]),
    text,
    st.lists(st.tuples(text, text), max_size=5),
)


@settings(max_examples=150, deadline=None)
@given(specs, st.sampled_from(sorted(THEMES)), st.floats(0, 1))
def test_renderer_validator_closure(spec, theme, colors):
    rs = render_slide(spec, get_theme(theme, colors))
    assert validate_html(rs.html).valid
    assert rs.filled_sections <= rs.section_count
    parsed = parse_slide(rs.html)
    assert parsed.section_count == len(spec.sections)
    assert parsed.word_count == rs.word_count
