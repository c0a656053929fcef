import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from cellmap.core_geom import PoseSE3, se3_exp
from cellmap.lattice import cached_lattice

settings.register_profile(
    "default", max_examples=60, deadline=None, suppress_health_check=[HealthCheck.too_slow]
)
settings.load_profile("default")


@pytest.fixture(scope="session")
def lattice():
    return cached_lattice(50000)


@pytest.fixture(scope="session")
def small_lattice():
    return cached_lattice(2000)


def random_pose(rng, t_scale=2.0, max_angle=np.pi * 0.9) -> PoseSE3:
    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    angle = rng.uniform(0, max_angle)
    return se3_exp(np.concatenate([rng.normal(size=3) * t_scale, axis * angle]))


def perturb(pose: PoseSE3, rng, t: float, deg: float) -> PoseSE3:
    d = rng.normal(size=3)
    a = rng.normal(size=3)
    xi = np.concatenate([t * d / np.linalg.norm(d), np.radians(deg) * a / np.linalg.norm(a)])
    return se3_exp(xi) @ pose


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if results:
        terminalreporter.section("acceptance")
        for n in sorted(results):
            terminalreporter.write_line(results[n])
