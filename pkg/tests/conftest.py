import numpy as np
import pytest

from bestanp.geometry import Pose, so3_exp
from bestanp.harness import random_pose, simulate_correspondences, trial_rng
from bestanp.sonar import FovSpec, NoiseModel


def make_trial(n, sigma_d=0.0, sigma_theta=0.0, seed=0, *path, pose=None, mechanism="on_tangent"):
    rng = trial_rng(seed, *path)
    return simulate_correspondences(n, FovSpec(), NoiseModel(sigma_d, sigma_theta, mechanism), rng, pose=pose)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


ACCEPTANCE_LINES: list[str] = []


def report(criterion: int, ok: bool, detail: str) -> bool:
    line = f"[{'PASS' if ok else 'FAIL'}] criterion {criterion:2d}: {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    return ok


def pytest_configure(config):
    config.addinivalue_line("markers", "acceptance: end-to-end acceptance criteria")


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split("criterion")[1].split(":")[0])):
            terminalreporter.write_line(line)
