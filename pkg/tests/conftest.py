import itertools
import math

import numpy as np
import pytest


class ScriptedRng:
    """Stand-in stream that replays a fixed cycle of uniforms."""

    batch_shape = ()

    def __init__(self, values):
        self._it = itertools.cycle([float(v) for v in values])

    def uniform(self, shape=()):
        shape = (shape,) if isinstance(shape, int) else tuple(shape)
        n = math.prod(shape)
        vals = np.array([next(self._it) for _ in range(n)])
        return float(vals[0]) if shape == () else vals.reshape(shape)


@pytest.fixture
def scripted():
    return ScriptedRng


ACCEPTANCE_LINES = []


def report(number, ok, detail):
    line = f"criterion {number:>2}: {'PASS' if ok else 'FAIL'}  {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    return ok


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split(":")[0].split()[1])):
            terminalreporter.write_line(line)
