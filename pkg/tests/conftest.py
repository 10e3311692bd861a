import numpy as np
import pytest

from bedgraph.raster_io import FEATURE_NAMES, RasterGrid, RegionDataset, rasterize_picks, RadarPickSet


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def make_region(height=20, width=24, seed=0, picks=None, cell_size=1.0):
    """Small random region with unit cells; handy for plumbing tests."""
    r = np.random.default_rng(seed)
    grids = {n: RasterGrid(r.normal(size=(height, width)), cell_size) for n in FEATURE_NAMES}
    ref = RasterGrid(r.normal(size=(height, width)) * 10 + 100, cell_size)
    if picks is None:
        n = max(3, height * width // 10)
        picks = RadarPickSet(r.uniform(0, width - 1, n) * cell_size, r.uniform(0, height - 1, n) * cell_size,
                             r.normal(size=n) * 10 + 100)
    values, mask, kept, dropped = rasterize_picks(picks, ref)
    return RegionDataset(grids, ref, values, mask, kept, dropped)


@pytest.fixture
def small_region():
    return make_region()


ACCEPTANCE_LINES = {}


def record_acceptance(number, title, checks):
    """Store one PASS/FAIL line for an acceptance criterion and return the verdict.

    ``checks`` is a list of (label, ok, detail) tuples.
    """
    ok = all(c[1] for c in checks)
    details = "; ".join(f"{label}={'ok' if good else 'FAIL'} ({detail})" for label, good, detail in checks)
    line = f"criterion {number} [{title}]: {'PASS' if ok else 'FAIL'} - {details}"
    ACCEPTANCE_LINES[number] = line
    print(line)
    return ok


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for number in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[number])
