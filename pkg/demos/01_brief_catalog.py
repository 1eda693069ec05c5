"""Browse the built-in brief catalog and validate a hand-written brief."""
from __future__ import annotations

import argparse

from deckgym.briefs import SlideBrief, builtin_catalog, validate_brief


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--show", type=int, default=5, help="how many briefs to list")
    args = ap.parse_args()

    cat = builtin_catalog()
    print(f"{len(cat)} briefs loaded from {cat.source_path}")
    for b in list(cat)[: args.show]:
        print(f"  {b.id:<32} {b.num_slides:>2} slides  conf {b.confidence:.2f}  for {b.audience}")

    draft = SlideBrief.from_dict({"topic": "  ", "audience": "ops team", "num_slides": 80, "confidence": 0.5},
                                 default_id="draft")
    report = validate_brief(draft)
    print("\ndraft brief valid:", report.ok)
    for v in report.violations:
        print("  -", v)


if __name__ == "__main__":
    main()
