import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from greenscape.ingest import ClassMap, TerrainPolicy  # noqa: E402


@pytest.fixture
def class_map():
    return ClassMap(
        entries=((0, "road"), (3, "building"), (7, "vegetation"), (9, "sky"), (11, "terrain")),
        vegetation_classes=frozenset({"vegetation"}),
        terrain_classes=frozenset({"terrain"}),
        sky_classes=frozenset({"sky"}),
    )


@pytest.fixture
def include_all():
    return TerrainPolicy("include_all")


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
