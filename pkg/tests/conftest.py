import numpy as np
import pytest

from stainforge.synth import REFERENCE_HE


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def he_true():
    return REFERENCE_HE.copy()


def render_from_conc(conc, m):
    """RGB patch whose OD is exactly ``conc @ m`` (no quantization)."""
    from stainforge.color import od_to_rgb

    return od_to_rgb(np.asarray(conc) @ np.asarray(m))


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("tests.test_acceptance")
    lines = getattr(mod, "RESULTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
