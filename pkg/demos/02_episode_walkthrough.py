"""Step through one episode by hand and watch phases, observations and rewards."""
from __future__ import annotations

import argparse

from deckgym.briefs import builtin_catalog
from deckgym.env import SlideEnv


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--brief", default=None, help="brief id (default: first in catalog)")
    args = ap.parse_args()

    cat = builtin_catalog()
    brief = cat.get(args.brief) if args.brief else next(iter(cat))
    env = SlideEnv()
    obs = env.reset(brief)
    print(obs.result, "\n")

    facts = list(brief.content.items())[:3]
    calls = [
        {"tool": "web_search", "query": brief.topic},
        {"tool": "create_outline", "sections": [{"title": brief.topic}, {"title": "Details"}]},
        {"tool": "generate_slide", "slide_idx": 0, "title": brief.topic,
         "sections": [{"heading": str(k).title(), "body": str(v)} for k, v in facts]},
        "I think the deck looks good.",  # prose instead of a tool call
        {"tool": "reorder_slides", "order": [1, 0]},  # not a permutation of one slide
        {"tool": "edit_slide", "slide_idx": 0, "title": f"{brief.topic} Overview"},
        {"tool": "review_deck"},
        {"tool": "finalize"},
    ]
    actions = 0.0
    for call in calls:
        r = env.step(call)
        actions += r.info["r_action"]
        i = r.info
        print(f"{str(i['tool']):<16} ok={r.observation.success!s:<5} phase={r.observation.phase.value:<9}"
              f" dQ={i['delta_q']:+.4f} r_action={i['r_action']:+.2f} reward={r.reward:+.4f}")
    s = env.state
    print(f"\nfinal quality {s.quality:.4f}; cumulative reward {s.cumulative_reward:.4f}")
    print(f"(Q_final - Q_initial) + sum r_action = {s.quality - s.initial_quality:.4f} + {actions:.2f}"
          f" = {s.quality - s.initial_quality + actions:.4f}")


if __name__ == "__main__":
    main()
