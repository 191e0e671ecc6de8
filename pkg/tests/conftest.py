"""Shared fixtures: kernel tables are expensive, so build each once."""
from __future__ import annotations

import pytest

from regfrac.gagliardo import assemble, build_near_table
from regfrac.geometry import Ball, Box, GridSpec, make_mask


@pytest.fixture(scope="session")
def table1():
    return build_near_table(1, 0.25)


@pytest.fixture(scope="session")
def table2():
    return build_near_table(2, 0.75)


@pytest.fixture(scope="session")
def ball_form(table2):
    grid = GridSpec(cells=(16, 16), spacing=1 / 8, origin=(-1.0, -1.0))
    mask = make_mask(grid, Ball(center=(0.0, 0.0), radius=0.9))
    return assemble(mask, 0.75, table=table2)


@pytest.fixture(scope="session")
def box_form(table2):
    grid = GridSpec(cells=(10, 10), spacing=0.1, origin=(0.0, 0.0))
    mask = make_mask(grid, Box(lo=(0.0, 0.0), hi=(1.0, 1.0)))
    return assemble(mask, 0.75, table=table2)
