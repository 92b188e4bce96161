import numpy as np
import pytest

from mittscm.forward import ExcitationPlan, ForwardModel, make_synthetic_measurements
from mittscm.mesh import Disk, PhantomSpec, build_disk_mesh

THREE_DISKS = PhantomSpec((Disk((-0.35, 0.3), 0.25), Disk((0.35, 0.3), 0.22), Disk((0.15, -0.55), 0.15)))


@pytest.fixture(scope="session")
def coarse_mesh():
    return build_disk_mesh(1.0, 0.2, 14)


@pytest.fixture(scope="session")
def small_problem(coarse_mesh):
    """Two frequencies, 14 coils, nondimensional coupling 0.1, noise-free data."""
    plan = ExcitationPlan.standard(2, 14)
    osc = 0.1 / (plan.omegas[0] * 20.0)
    model = ForwardModel(coarse_mesh, 1.0, osc)
    meas = make_synthetic_measurements(coarse_mesh, 1.0, THREE_DISKS, plan, 0.0, 0, omega_scale=osc)
    return model, plan, meas


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
