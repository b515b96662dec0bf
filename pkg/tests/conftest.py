import numpy as np
import pytest

from ctxfusion.synthgen import DatasetSpec


@pytest.fixture
def tiny_spec():
    return DatasetSpec(image_size=16, n_classes=4, n_supercategories=3, samples_per_class=8,
                       seed=3)


@pytest.fixture
def rng():
    return np.random.default_rng(0)


def pytest_terminal_summary(terminalreporter):
    """One line per acceptance criterion, when the acceptance module ran."""
    import sys
    mod = sys.modules.get("test_acceptance")
    if mod is None or not getattr(mod, "REPORT", None):
        return
    terminalreporter.section("acceptance criteria")
    for cid in sorted(mod.REPORT, key=lambda c: (c[0], int(c[1:]))):
        ok, detail = mod.REPORT[cid]
        terminalreporter.write_line(f"{cid:>4} {'PASS' if ok else 'FAIL'}  {detail}")
