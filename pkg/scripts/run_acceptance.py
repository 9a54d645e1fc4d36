"""Run the acceptance criteria and write one CSV per criterion.

    python3 scripts/run_acceptance.py --profile reduced --criteria 1,2,3
"""

import argparse
import sys
from pathlib import Path

from percohom import acceptance as acc


def main():
    p = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("--profile", choices=sorted(acc.PROFILES), default="full")
    p.add_argument("--criteria", default=None, help="comma-separated numbers, default 1-12")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--out", default="acceptance-out")
    a = p.parse_args()
    crit = tuple(int(c) for c in a.criteria.split(",")) if a.criteria else tuple(range(1, 13))
    out = Path(a.out)
    out.mkdir(parents=True, exist_ok=True)
    verdicts = acc.run_all(acc.PROFILES[a.profile], a.seed, a.workers, crit, out, echo=lambda s: print(s, flush=True))
    return 0 if all(v.passed for v in verdicts) else 1


if __name__ == "__main__":
    sys.exit(main())
