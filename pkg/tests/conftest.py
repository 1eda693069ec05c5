from __future__ import annotations

import socket

import pytest

from deckgym.briefs import BriefTargets, SlideBrief, builtin_catalog
from deckgym.env import EnvState
from deckgym.render import Section, SlideSpec, StubRenderer, get_theme, render_slide

SERIES_B = {
    "topic": "Series B Funding Pitch - AI-Powered Supply Chain Platform",
    "audience": "venture capitalists",
    "num_slides": 10,
    "confidence": 1.0,
    "content": {
        "company": "ChainMind AI",
        "problem": "Supply chain disruptions cost $184B annually",
        "solution": "AI predicting disruptions 14 days ahead",
        "traction": {"arr": "$4.2M", "growth": "312% YoY"},
        "ask": "$25M at $100M pre-money",
    },
}


@pytest.fixture
def series_b() -> SlideBrief:
    return SlideBrief.from_dict(SERIES_B, default_id="series-b")


@pytest.fixture(scope="session")
def catalog():
    return builtin_catalog()


def make_brief(num_slides: int = 7, sections: int = 3, words: int = 60, max_turns: int = 35, **kw) -> SlideBrief:
    base = dict(
        id="fixture",
        topic="Electric Vehicle Market Analysis",
        audience="investors",
        num_slides=num_slides,
        confidence=0.8,
        content={"market_size": "EV sales reached 14 million units", "leader": "BYD and Tesla lead share"},
        targets=BriefTargets(sections, words, max_turns),
    )
    base.update(kw)
    return SlideBrief(**base)


def slide_html(title: str, sections: list[tuple[str, str]], theme: str = "default") -> str:
    spec = SlideSpec.create(0, title, [Section(h, b) for h, b in sections])
    return render_slide(spec, get_theme(theme)).html


def deck_state(brief: SlideBrief, slides: list[str], rendered: list[bool] | None = None, **kw) -> EnvState:
    stub = StubRenderer()
    pngs = [stub.render(h) if (rendered is None or rendered[i]) else None for i, h in enumerate(slides)]
    return EnvState(brief=brief, slides_html=list(slides), slides_png=pngs, **kw)


@pytest.fixture
def no_network(monkeypatch):
    """Any socket use fails the test."""

    class _Blocked(socket.socket):
        def __init__(self, *a, **k):
            raise AssertionError("network access attempted")

    def _blocked(*a, **k):
        raise AssertionError("network access attempted")

    monkeypatch.setattr(socket, "socket", _Blocked)
    monkeypatch.setattr(socket, "create_connection", _blocked)
    yield


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if results:
        terminalreporter.section("acceptance criteria")
        for n in sorted(results):
            terminalreporter.write_line(results[n])
