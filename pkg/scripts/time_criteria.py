"""Wall time of each criterion against its budget, full profile, one worker."""

import sys

from percohom import acceptance as acc

for k in [int(a) for a in sys.argv[1:]] or range(1, 12):
    v = acc.run_criterion(k, acc.FULL, 0, 1)
    print(f"{k:2d} {v.runtime:8.1f}s budget {acc.BUDGET[k]:5d}s  {'PASS' if v.passed else 'FAIL'}", flush=True)
