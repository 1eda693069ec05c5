"""Evaluate a competent agent against a review-only agent on every brief."""
from __future__ import annotations

import argparse
from pathlib import Path

from deckgym.briefs import builtin_catalog
from deckgym.harness import CompetentAgent, EpisodeConfig, EvalConfig, ReviewAgent, evaluate, export_rollouts


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out", default="demo_out/eval")
    ap.add_argument("--workers", type=int, default=4)
    args = ap.parse_args()

    out = Path(args.out)
    rep = evaluate({"competent": CompetentAgent, "review": ReviewAgent}, builtin_catalog(),
                   EvalConfig(EpisodeConfig(out_dir=out / "decks"), workers=args.workers))
    print(rep.table())
    print("\nhead to head:", rep.head_to_head["competent"]["review"])
    rep.write(out / "report.json")
    export_rollouts(rep.trajectories, out / "rollouts.jsonl")
    print(f"wrote {out / 'report.json'} and {out / 'rollouts.jsonl'}")


if __name__ == "__main__":
    main()
