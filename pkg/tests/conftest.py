import sys

import numpy as np
import pytest

from densefusion.geometry import Pose, random_pose


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def random_poses(rng, n, max_translation=1.0):
    return [random_pose(rng, max_translation=max_translation) for _ in range(n)]


def pose_close(a: Pose, b: Pose, tol=1e-9):
    d = np.linalg.norm(a.matrix - b.matrix) + np.linalg.norm(a.translation - b.translation)
    return d < tol


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    if mod is not None and mod.RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in sorted(mod.RESULTS):
            terminalreporter.write_line(line)
