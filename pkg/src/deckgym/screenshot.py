"""Headless-browser render worker: an HTML document on stdin, a 1280x720 PNG on stdout.

Run as ``python -m deckgym.screenshot``. Needs the optional ``playwright``
dependency and an installed Chromium; any failure exits nonzero so the
calling renderer records a render failure.
"""
from __future__ import annotations

import argparse
import sys

from deckgym.render import SLIDE_HEIGHT, SLIDE_WIDTH


def screenshot(html: str, width: int = SLIDE_WIDTH, height: int = SLIDE_HEIGHT, timeout_ms: int = 20000) -> bytes:
    from playwright.sync_api import sync_playwright

    with sync_playwright() as p:
        browser = p.chromium.launch()
        try:
            page = browser.new_page(viewport={"width": width, "height": height})
            page.set_content(html, wait_until="load", timeout=timeout_ms)
            return page.screenshot(type="png", clip={"x": 0, "y": 0, "width": width, "height": height})
        finally:
            browser.close()


def main(argv: list[str] | None = None) -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--width", type=int, default=SLIDE_WIDTH)
    ap.add_argument("--height", type=int, default=SLIDE_HEIGHT)
    ap.add_argument("--timeout-ms", type=int, default=20000)
    args = ap.parse_args(argv)
    html = sys.stdin.buffer.read().decode("utf-8", errors="replace")
    if not html.strip():
        print("empty input", file=sys.stderr)
        return 2
    try:
        png = screenshot(html, args.width, args.height, args.timeout_ms)
    except ImportError:
        print("playwright is not installed (pip install deckgym[browser])", file=sys.stderr)
        return 3
    except Exception as exc:  # browser crash, timeout, missing executable
        print(f"screenshot failed: {exc}", file=sys.stderr)
        return 1
    sys.stdout.buffer.write(png)
    sys.stdout.buffer.flush()
    return 0


if __name__ == "__main__":
    sys.exit(main())
