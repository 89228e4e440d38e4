import math

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from chns.assembly import StepContext
from chns.materials import CHI_SEGREGATING, FloryHugginsParams, MaterialModel, load_viscosity_model
from chns.mesh import MeshConfig, build_channel_mesh
from chns.spaces import Discretization

settings.register_profile("default", deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture(scope="session")
def materials():
    return MaterialModel(FloryHugginsParams(CHI_SEGREGATING), load_viscosity_model())


@pytest.fixture(scope="session")
def small_disc():
    """4 x 6 channel of size 1 x 1.5: cheap but with interior and wall dofs."""
    return Discretization(build_channel_mesh(MeshConfig(4, 6, 1.0, 1.5)))


@pytest.fixture(scope="session")
def small_ctx(small_disc, materials):
    return StepContext(0.01, 0.001, 0.1, (0.01, 0.0), materials, small_disc)


def random_state(disc, rng, amp_u=0.05, amp_phi=0.3):
    from chns.assembly import SystemState

    return SystemState(
        phi=0.5 + rng.uniform(-amp_phi, amp_phi, disc.n1),
        mu=rng.normal(scale=0.05, size=disc.n1),
        u=rng.normal(scale=amp_u, size=2 * disc.n2),
        p=rng.normal(scale=0.01, size=disc.n1),
        r=float(rng.normal(scale=1e-3)),
    )


def integrate(disc, fn):
    """Quadrature of fn(x, y) over the mesh with the discretization's volume rule."""
    x, y = disc.qp_xy[..., 0], disc.qp_xy[..., 1]
    return float(np.sum(disc.wdet * fn(x, y)))


SQRT2 = math.sqrt(2.0)


# criterion number -> (passed, detail); filled by test_acceptance.py
ACCEPTANCE: dict = {}


def record_criterion(number: int, passed: bool, detail: str) -> None:
    prev = ACCEPTANCE.get(number)
    if prev is not None:
        passed = passed and prev[0]
        detail = f"{prev[1]}; {detail}"
    ACCEPTANCE[number] = (bool(passed), detail)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for number in sorted(ACCEPTANCE):
        passed, detail = ACCEPTANCE[number]
        terminalreporter.write_line(f"criterion {number}: {'PASS' if passed else 'FAIL'} ({detail})")
