"""Deck export: ``deck.html`` for browsing and a text-only ``deck.pptx``."""
from __future__ import annotations

import html as htmlmod
import os
import tempfile
import zipfile
from pathlib import Path
from typing import Sequence
from xml.sax.saxutils import escape as xml_escape

from deckgym.render import ParsedSlide, parse_slide

_DECK_CSS = (
    "body{margin:0;background:#3a3a3a;font-family:Arial,sans-serif;}"
    ".deck-nav{position:sticky;top:0;z-index:1;padding:8px 16px;background:#111;}"
    ".deck-nav a{color:#eee;margin-right:12px;text-decoration:none;}"
    ".deck-page{display:flex;justify-content:center;padding:24px 0;}"
)


def atomic_write(path: Path, data: bytes) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def deck_html(slides_html: Sequence[str], title: str = "Deck") -> str:
    """Concatenate slide fragments, verbatim, under a minimal navigation bar."""
    nav = " ".join(f'<a href="#slide-{i + 1}">{i + 1}</a>' for i in range(len(slides_html)))
    pages = "\n".join(
        f'<section class="deck-page" id="slide-{i + 1}">\n{frag}\n</section>' for i, frag in enumerate(slides_html)
    )
    return (
        '<!DOCTYPE html>\n<html lang="en">\n<head>\n<meta charset="utf-8">\n'
        f"<title>{htmlmod.escape(title)}</title>\n<style>{_DECK_CSS}</style>\n</head>\n<body>\n"
        f'<nav class="deck-nav">{nav}</nav>\n<main class="deck">\n{pages}\n</main>\n</body>\n</html>\n'
    )


# ---------------------------------------------------------------------------
# PPTX

_NS = (
    'xmlns:a="http://schemas.openxmlformats.org/drawingml/2006/main" '
    'xmlns:r="http://schemas.openxmlformats.org/officeDocument/2006/relationships" '
    'xmlns:p="http://schemas.openxmlformats.org/presentationml/2006/main"'
)
_REL_NS = "http://schemas.openxmlformats.org/package/2006/relationships"
_R = "http://schemas.openxmlformats.org/officeDocument/2006/relationships"
_CT = "application/vnd.openxmlformats-officedocument"
_HDR = '<?xml version="1.0" encoding="UTF-8" standalone="yes"?>\n'

SLIDE_CX, SLIDE_CY = 12192000, 6858000

_EMPTY_TREE = (
    '<p:nvGrpSpPr><p:cNvPr id="1" name=""/><p:cNvGrpSpPr/><p:nvPr/></p:nvGrpSpPr>'
    '<p:grpSpPr><a:xfrm><a:off x="0" y="0"/><a:ext cx="0" cy="0"/>'
    '<a:chOff x="0" y="0"/><a:chExt cx="0" cy="0"/></a:xfrm></p:grpSpPr>'
)

_THEME = (
    _HDR + '<a:theme xmlns:a="http://schemas.openxmlformats.org/drawingml/2006/main" name="deckgym">'
    "<a:themeElements><a:clrScheme name=\"deckgym\">"
    '<a:dk1><a:srgbClr val="212121"/></a:dk1><a:lt1><a:srgbClr val="FFFFFF"/></a:lt1>'
    '<a:dk2><a:srgbClr val="2C3E50"/></a:dk2><a:lt2><a:srgbClr val="F5F5F5"/></a:lt2>'
    '<a:accent1><a:srgbClr val="2962FF"/></a:accent1><a:accent2><a:srgbClr val="64B5F6"/></a:accent2>'
    '<a:accent3><a:srgbClr val="00C853"/></a:accent3><a:accent4><a:srgbClr val="4CAF50"/></a:accent4>'
    '<a:accent5><a:srgbClr val="FF5722"/></a:accent5><a:accent6><a:srgbClr val="FFA726"/></a:accent6>'
    '<a:hlink><a:srgbClr val="2962FF"/></a:hlink><a:folHlink><a:srgbClr val="34495E"/></a:folHlink>'
    "</a:clrScheme>"
    '<a:fontScheme name="deckgym"><a:majorFont><a:latin typeface="Arial"/><a:ea typeface=""/><a:cs typeface=""/>'
    '</a:majorFont><a:minorFont><a:latin typeface="Arial"/><a:ea typeface=""/><a:cs typeface=""/></a:minorFont>'
    "</a:fontScheme>"
    '<a:fmtScheme name="deckgym"><a:fillStyleLst>'
    + '<a:solidFill><a:schemeClr val="phClr"/></a:solidFill>' * 3
    + "</a:fillStyleLst><a:lnStyleLst>"
    + '<a:ln w="9525"><a:solidFill><a:schemeClr val="phClr"/></a:solidFill></a:ln>' * 3
    + "</a:lnStyleLst><a:effectStyleLst>"
    + "<a:effectStyle><a:effectLst/></a:effectStyle>" * 3
    + "</a:effectStyleLst><a:bgFillStyleLst>"
    + '<a:solidFill><a:schemeClr val="phClr"/></a:solidFill>' * 3
    + "</a:bgFillStyleLst></a:fmtScheme></a:themeElements></a:theme>"
)


def _rels(items: Sequence[tuple[str, str, str]]) -> str:
    body = "".join(f'<Relationship Id="{i}" Type="{_R}/{t}" Target="{target}"/>' for i, t, target in items)
    return _HDR + f'<Relationships xmlns="{_REL_NS}">{body}</Relationships>'


def _text_box(shape_id: int, name: str, y: int, cy: int, paragraphs: Sequence[tuple[str, int, bool]]) -> str:
    paras = "".join(
        f'<a:p><a:r><a:rPr lang="en-US" sz="{size}" b="{int(bold)}" dirty="0"/>'
        f"<a:t>{xml_escape(text)}</a:t></a:r></a:p>"
        for text, size, bold in paragraphs
    ) or "<a:p/>"
    return (
        f'<p:sp><p:nvSpPr><p:cNvPr id="{shape_id}" name="{name}"/><p:cNvSpPr txBox="1"/><p:nvPr/></p:nvSpPr>'
        f'<p:spPr><a:xfrm><a:off x="457200" y="{y}"/><a:ext cx="{SLIDE_CX - 914400}" cy="{cy}"/></a:xfrm>'
        '<a:prstGeom prst="rect"><a:avLst/></a:prstGeom></p:spPr>'
        f'<p:txBody><a:bodyPr wrap="square"><a:normAutofit/></a:bodyPr><a:lstStyle/>{paras}</p:txBody></p:sp>'
    )


def _slide_xml(slide: ParsedSlide) -> str:
    body: list[tuple[str, int, bool]] = []
    for s in slide.sections:
        if s.heading:
            body.append((s.heading, 2000, True))
        if s.body:
            body.append((s.body, 1600, False))
    shapes = _text_box(2, "Title", 365125, 1325563, [(slide.title or "", 3600, True)])
    shapes += _text_box(3, "Body", 1825625, 4351338, body)
    return (
        _HDR + f"<p:sld {_NS}><p:cSld><p:spTree>{_EMPTY_TREE}{shapes}</p:spTree></p:cSld>"
        "<p:clrMapOvr><a:masterClrMapping/></p:clrMapOvr></p:sld>"
    )


def deck_pptx(slides: Sequence[ParsedSlide]) -> bytes:
    """A minimal Open-XML presentation with one text-only slide per entry."""
    import io

    n = len(slides)
    overrides = [
        ("/ppt/presentation.xml", f"{_CT}.presentationml.presentation.main+xml"),
        ("/ppt/slideMasters/slideMaster1.xml", f"{_CT}.presentationml.slideMaster+xml"),
        ("/ppt/slideLayouts/slideLayout1.xml", f"{_CT}.presentationml.slideLayout+xml"),
        ("/ppt/theme/theme1.xml", f"{_CT}.theme+xml"),
    ] + [(f"/ppt/slides/slide{i + 1}.xml", f"{_CT}.presentationml.slide+xml") for i in range(n)]
    content_types = (
        _HDR + '<Types xmlns="http://schemas.openxmlformats.org/package/2006/content-types">'
        '<Default Extension="rels" ContentType="application/vnd.openxmlformats-package.relationships+xml"/>'
        '<Default Extension="xml" ContentType="application/xml"/>'
        + "".join(f'<Override PartName="{p}" ContentType="{c}"/>' for p, c in overrides)
        + "</Types>"
    )
    sld_ids = "".join(f'<p:sldId id="{256 + i}" r:id="rId{i + 3}"/>' for i in range(n))
    presentation = (
        _HDR + f"<p:presentation {_NS}>"
        '<p:sldMasterIdLst><p:sldMasterId id="2147483648" r:id="rId1"/></p:sldMasterIdLst>'
        f"<p:sldIdLst>{sld_ids}</p:sldIdLst>"
        f'<p:sldSz cx="{SLIDE_CX}" cy="{SLIDE_CY}"/><p:notesSz cx="6858000" cy="9144000"/>'
        "</p:presentation>"
    )
    master = (
        _HDR + f"<p:sldMaster {_NS}><p:cSld><p:spTree>{_EMPTY_TREE}</p:spTree></p:cSld>"
        '<p:clrMap bg1="lt1" tx1="dk1" bg2="lt2" tx2="dk2" accent1="accent1" accent2="accent2" '
        'accent3="accent3" accent4="accent4" accent5="accent5" accent6="accent6" hlink="hlink" folHlink="folHlink"/>'
        '<p:sldLayoutIdLst><p:sldLayoutId id="2147483649" r:id="rId1"/></p:sldLayoutIdLst></p:sldMaster>'
    )
    layout = (
        _HDR + f'<p:sldLayout {_NS} preserve="1"><p:cSld name="Blank"><p:spTree>{_EMPTY_TREE}</p:spTree></p:cSld>'
        "<p:clrMapOvr><a:masterClrMapping/></p:clrMapOvr></p:sldLayout>"
    )
    parts = {
        "[Content_Types].xml": content_types,
        "_rels/.rels": _rels([("rId1", "officeDocument", "ppt/presentation.xml")]),
        "ppt/presentation.xml": presentation,
        "ppt/_rels/presentation.xml.rels": _rels(
            [("rId1", "slideMaster", "slideMasters/slideMaster1.xml"), ("rId2", "theme", "theme/theme1.xml")]
            + [(f"rId{i + 3}", "slide", f"slides/slide{i + 1}.xml") for i in range(n)]
        ),
        "ppt/slideMasters/slideMaster1.xml": master,
        "ppt/slideMasters/_rels/slideMaster1.xml.rels": _rels(
            [("rId1", "slideLayout", "../slideLayouts/slideLayout1.xml"), ("rId2", "theme", "../theme/theme1.xml")]
        ),
        "ppt/slideLayouts/slideLayout1.xml": layout,
        "ppt/slideLayouts/_rels/slideLayout1.xml.rels": _rels(
            [("rId1", "slideMaster", "../slideMasters/slideMaster1.xml")]
        ),
        "ppt/theme/theme1.xml": _THEME,
    }
    for i, slide in enumerate(slides):
        parts[f"ppt/slides/slide{i + 1}.xml"] = _slide_xml(slide)
        parts[f"ppt/slides/_rels/slide{i + 1}.xml.rels"] = _rels(
            [("rId1", "slideLayout", "../slideLayouts/slideLayout1.xml")]
        )
    buf = io.BytesIO()
    with zipfile.ZipFile(buf, "w", zipfile.ZIP_DEFLATED) as zf:
        for name, xml in parts.items():
            zf.writestr(name, xml)
    return buf.getvalue()


def pptx_slide_parts(data: bytes) -> list[str]:
    """Slide part names listed in a package's content types."""
    import io
    import re

    with zipfile.ZipFile(io.BytesIO(data)) as zf:
        ct = zf.read("[Content_Types].xml").decode("utf-8")
    return re.findall(r'PartName="(/ppt/slides/slide\d+\.xml)"', ct)


def export_deck(slides_html: Sequence[str], out_dir: str | Path, title: str = "Deck") -> dict[str, Path]:
    """Write ``deck.html`` and ``deck.pptx`` atomically into ``out_dir``."""
    if not slides_html:
        raise ValueError("cannot export an empty deck")
    out = Path(out_dir)
    html_path, pptx_path = out / "deck.html", out / "deck.pptx"
    atomic_write(html_path, deck_html(slides_html, title).encode("utf-8"))
    atomic_write(pptx_path, deck_pptx([parse_slide(h) for h in slides_html]))
    return {"deck_html": html_path, "deck_pptx": pptx_path}
