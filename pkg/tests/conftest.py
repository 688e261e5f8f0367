from __future__ import annotations

import datetime as dt

import numpy as np
import pytest

from harvestmig.calendar import StudyCalendar
from harvestmig.ingest import DistrictGeometry

ACCEPTANCE_LINES: list[str] = []


def square(district_id: str, x0: float, y0: float, size: float = 0.1, province: str = "P01") -> DistrictGeometry:
    ring = np.array([[x0, y0], [x0 + size, y0], [x0 + size, y0 + size], [x0, y0 + size], [x0, y0]])
    return DistrictGeometry(district_id, province, [[ring]])


@pytest.fixture
def two_squares():
    return [square("D01", 65.0, 33.0), square("D02", 65.1, 33.0)]


@pytest.fixture
def cal2015():
    return StudyCalendar(dt.date(2015, 1, 1), dt.date(2015, 12, 31))


SMALL_WORLD = dict(seed=1, nx=5, ny=6, subscribers_per_district=300, move_prob_30d=0.1, amplitude=0.06)


@pytest.fixture(scope="session")
def small_world():
    """(world, panel builder, detected peaks) for a 30-district world with a harvest pulse."""
    from harvestmig.phenology import peaks_from_frame
    from harvestmig.pipeline import builder, metrics_from_world, world_panel_inputs
    from harvestmig.synth import WorldConfig, build_world
    world = build_world(WorldConfig(**SMALL_WORLD))
    b = builder(metrics_from_world(world, (15, 30, 45)), world_panel_inputs(world))
    peaks, _ = peaks_from_frame(world.ndvi)
    return world, b, peaks


@pytest.fixture
def acceptance():
    """Record one PASS/FAIL line per acceptance criterion."""
    def record(name: str, ok: bool, detail: str = ""):
        line = f"{'PASS' if ok else 'FAIL'}  {name}" + (f"  ({detail})" if detail else "")
        ACCEPTANCE_LINES.append(line)
        print(line)
        return ok
    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
