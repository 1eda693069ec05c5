"""Score a good deck and a sloppy deck component by component."""
from __future__ import annotations

from deckgym.briefs import builtin_catalog
from deckgym.env import EnvState
from deckgym.harness import brief_slide_plan
from deckgym.judge import offline_gateway
from deckgym.render import Section, SlideSpec, StubRenderer, get_theme, render_slide
from deckgym.rewards import COMPONENTS, aggregate_rewards


def deck(brief, plan, theme="corporate"):
    stub = StubRenderer()
    html = [render_slide(SlideSpec.create(i, s["title"], [Section(x["heading"], x["body"]) for x in s["sections"]]),
                         get_theme(theme)).html for i, s in enumerate(plan)]
    return EnvState(brief=brief, slides_html=html, slides_png=[stub.render(h) for h in html])


def main() -> None:
    brief = next(iter(builtin_catalog()))
    judge = offline_gateway()
    good = deck(brief, brief_slide_plan(brief))
    sloppy = deck(brief, [{"title": "", "sections": [{"heading": "", "body": "lorem ipsum dolor"}]}] * 2, "default")
    rows = {"restating deck": aggregate_rewards(good, judge), "sloppy deck": aggregate_rewards(sloppy, judge)}
    print(f"{'component':<22}" + "".join(f"{k:>16}" for k in rows))
    for c in COMPONENTS:
        print(f"{c:<22}" + "".join(f"{b.scores[c]:>16.3f}" for b in rows.values()))
    print(f"{'aggregate':<22}" + "".join(f"{b.aggregate:>16.3f}" for b in rows.values()))
    print(f"\njudge cache entries: {len(judge.cache)}")


if __name__ == "__main__":
    main()
