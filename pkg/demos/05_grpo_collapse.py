"""Train the toy policy with beta=0 and watch review_deck take over, then mitigate."""
from __future__ import annotations

import argparse

from deckgym.grpo import CollapseConfig, run_collapse_experiment


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--steps", type=int, default=400)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    rep = run_collapse_experiment(CollapseConfig(steps=args.steps, seed=args.seed, mitigation=True))
    print(rep.table())
    top = sorted(rep.baseline.final_distribution.items(), key=lambda kv: -kv[1])[:3]
    print("\nbeta=0 final action mass:", ", ".join(f"{k} {v:.3f}" for k, v in top))
    print(f"terminal P(review_deck): beta=0 {rep.baseline.final_p_review:.3f}, "
          f"mitigated {rep.mitigated.final_p_review:.3f}")


if __name__ == "__main__":
    main()
