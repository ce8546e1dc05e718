import sys

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from vislocuq.core import Frame, Pose2, Traversal
from vislocuq.synth import make_paper_scenario

settings.register_profile(
    "default", deadline=None, max_examples=60, suppress_health_check=[HealthCheck.too_slow]
)
settings.load_profile("default")


@pytest.fixture(scope="session")
def small_scenario():
    """A 300 m version of the nine-database scenario, fast enough for unit tests."""
    return make_paper_scenario(seed=7, route_length=300.0)


def make_frame(fid, x=0.0, y=0.0, heading=0.0, condition="sunny", descriptor=(0.0, 0.0),
               traversal_id=None, t=None, corruption=0.0):
    return Frame(
        frame_id=fid,
        traversal_id=fid if traversal_id is None else traversal_id,
        t=float(fid) if t is None else t,
        pose=Pose2(x, y, heading),
        condition=condition,
        descriptor=np.asarray(descriptor, dtype=np.float64),
        corruption=corruption,
    )


def straight_traversal(tid, n, condition="sunny", spacing=1.0, offset=0.0, dim=4, scale=10.0):
    """Frames along the x axis whose descriptor encodes position only."""
    frames = []
    for i in range(n):
        x = i * spacing + offset
        desc = np.zeros(dim)
        desc[0] = x / scale
        frames.append(
            Frame(tid * 1000 + i, tid, float(i), Pose2(x, 0.0, 0.0), condition, desc)
        )
    return Traversal(tid, frames)


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    if mod is None or not mod.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(mod.RESULTS):
        terminalreporter.write_line(mod.format_line(n))
