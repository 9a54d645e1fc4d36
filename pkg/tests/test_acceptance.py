"""Full-size acceptance criteria, one test each; the pass/fail table is printed in the summary."""

import pytest

from percohom import acceptance as acc

from conftest import VERDICT_LINES

pytestmark = pytest.mark.acceptance


@pytest.mark.parametrize("k", range(1, 12))
def test_criterion(k):
    v = acc.run_criterion(k, acc.FULL, seed=0, workers=1)
    line = v.line()
    VERDICT_LINES.append(line)
    print(line)
    assert v.passed, line


def test_criterion_12_determinism():
    v = acc.determinism(acc.REDUCED, seed=0)
    line = v.line()
    VERDICT_LINES.append(line)
    print(line)
    assert v.passed, line
