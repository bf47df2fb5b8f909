from __future__ import annotations

import numpy as np
import pytest

from anchor_sim.core import Point3
from anchor_sim.executive import default_shell
from anchor_sim.reachability import DualEllipsoidShell, Ellipsoid


@pytest.fixture(scope="session")
def sim_shell():
    """The trial arm's fitted shell; computed once per session and cached."""
    return default_shell()


@pytest.fixture()
def analytic_shell():
    """Hand-built shell with known geometry for alignment-term tests."""
    outer = Ellipsoid(Point3(0.12, 0.0, 0.35),
                      np.diag([1 / 0.55 ** 2, 1 / 0.50 ** 2, 1 / 0.40 ** 2]))
    inner = Ellipsoid(Point3(0.05, 0.0, 0.32),
                      np.diag([1 / 0.18 ** 2, 1 / 0.18 ** 2, 1 / 0.15 ** 2]))
    return DualEllipsoidShell(outer=outer, inner=inner)
