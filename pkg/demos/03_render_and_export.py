"""Render one slide in every theme, then export a small deck to HTML and PPTX."""
from __future__ import annotations

import argparse
from pathlib import Path

from deckgym.export import export_deck
from deckgym.render import THEMES, Section, SlideSpec, get_theme, interpolate_palette, render_slide, validate_html


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out", default="demo_out/render", help="output directory")
    args = ap.parse_args()

    spec = SlideSpec.create(0, "Q4 Revenue Performance", [
        Section("Revenue Growth", "Revenue grew 23% year-over-year to $4.2M"),
        Section("Key Drivers", "Enterprise expansion and new logos"),
    ])
    for name in THEMES:
        for colors in (1.0, 0.5, 0.0):
            accent = interpolate_palette(get_theme(name, colors))["accent"]
            print(f"{name:<10} colors={colors:.1f} accent={accent}")

    slides = [render_slide(SlideSpec.create(i, f"Slide {i + 1}", spec.sections), get_theme("corporate")).html
              for i in range(3)]
    paths = export_deck(slides, Path(args.out), "Render demo")
    doc = paths["deck_html"].read_text(encoding="utf-8")
    print("\ndeck.html valid:", validate_html(doc).valid)
    for k, p in paths.items():
        print(f"{k}: {p} ({p.stat().st_size} bytes)")


if __name__ == "__main__":
    main()
