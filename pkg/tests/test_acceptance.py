"""One test per acceptance criterion at full tolerance.

Each result line is printed as it completes and repeated in the terminal
summary, so a plain ``pytest -v`` run shows every PASS/FAIL line.
"""

import pytest

from mmvlab.acceptance import CRITERIA

LINES = []


@pytest.mark.slow
@pytest.mark.parametrize("criterion", CRITERIA, ids=[f"criterion_{k + 1}" for k in range(len(CRITERIA))])
def test_criterion(criterion, capsys):
    result = criterion()
    line = result.line() + f" ({result.seconds:.1f}s)"
    LINES.append(line)
    with capsys.disabled():
        print("\n" + line)
    assert result.passed, line
