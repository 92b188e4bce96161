import dataclasses
import math

import numpy as np
import pytest

from mittscm import data
from mittscm.data import FormatError
from mittscm.fem import NodalField
from mittscm.forward import MU0, ExcitationPlan, MeasurementSet
from mittscm.mesh import Annulus, Disk, build_disk_mesh
from mittscm.tscm import IterationRecord, RunLog, StageRecord


def test_preset_constants_are_pinned():
    p = data.preset("exp1-3disks")
    assert p.phantom.sigma1 == 20.0 and p.phantom.sigma2 == 2.0
    assert p.reg.sigma1 == 20.0 and p.reg.sigma2 == 2.0
    assert p.reg.alpha == 1e-5 and p.reg.beta == 1e-5
    assert p.eps is None
    t = p.tscm
    assert (t.delta1, t.delta2, t.tau1, t.tau2, t.s_init, t.delta_lambda) == (1.0, 0.01, 1e-5, 1e-6, 2.0, 0.1)
    assert p.plan.coils == tuple(range(28))
    assert p.plan.amplitudes == (1.0,) * 28
    assert p.plan.omegas == tuple(2 * math.pi * 2.0**e for e in (15, 16, 17, 18))
    assert p.noise_ladder == (0.01, 0.05, 0.10, 0.20)
    assert p.mesh.n_arcs == 28


def test_smoothing_defaults_to_h_squared():
    p = data.preset("exp1-3disks")
    mesh = build_disk_mesh(1.0, 0.2, 28)
    rp = p.reg_params(mesh)
    assert rp.eps_tv == rp.eps_heaviside == mesh.h**2


def test_nondimensional_coupling():
    p = data.preset("exp1-3disks")
    # mu_inv = 1 is ten times omega_0 * sigma_max in the effective frequency unit
    assert p.mu_inv == 1.0
    assert math.isclose(p.omega_scale * p.plan.omegas[0] * p.phantom.sigma1, 0.1)
    si = data.preset("exp1-si")
    assert si.mu_inv == 1.0 / MU0 and si.omega_scale == 1.0


def test_preset_geometry():
    three = data.preset("exp1-3disks").phantom
    assert len(three.inclusions) == 3 and all(isinstance(d, Disk) for d in three.inclusions)
    torus = data.preset("exp2-torus").phantom
    kinds = sorted(type(x).__name__ for x in torus.inclusions)
    assert kinds == ["Annulus", "Disk"]
    ann = next(x for x in torus.inclusions if isinstance(x, Annulus))
    disk = next(x for x in torus.inclusions if isinstance(x, Disk))
    gap = math.dist(ann.center, disk.center) - ann.outer_radius - disk.radius
    assert abs(gap) < 1e-12  # touching
    assert data.preset("lsm-baseline").initial_guess is not None
    dl = data.preset("dlambda-study")
    assert dl.n_lambda == (1, 2, 4, 8, 16) and len(dl.plan.omegas) == 2 and dl.noise_level == 0.01


def test_unknown_preset():
    with pytest.raises(KeyError):
        data.preset("nope")


@pytest.mark.parametrize("name", data.PRESET_NAMES)
def test_presets_round_trip_bit_identically(name, tmp_path):
    p = data.preset(name)
    path = tmp_path / "p.ini"
    data.save_preset(p, path)
    q = data.load_preset(path)
    assert q == p
    assert data.dumps_preset(q) == path.read_text()


def test_overrides():
    p = data.preset("exp1-3disks").with_overrides({"tscm.max_inner_iters": "7", "mesh.target_h": "0.2"})
    assert p.tscm.max_inner_iters == 7 and p.mesh.target_h == 0.2
    with pytest.raises(KeyError):
        data.preset("exp1-3disks").with_overrides({"tscm.bogus": "1"})
    with pytest.raises(KeyError):
        data.preset("exp1-3disks").with_overrides({"nosection.x": "1"})
    with pytest.raises(FormatError):
        data.preset("exp1-3disks").with_overrides({"tscm.tau1": "-1"})


def test_resolve_preset_from_name_or_file(tmp_path):
    path = tmp_path / "x.ini"
    data.save_preset(data.preset("exp2-torus"), path)
    assert data.resolve_preset(str(path)) == data.preset("exp2-torus")
    assert data.resolve_preset("exp2-torus") == data.preset("exp2-torus")


def test_preset_errors_name_position(tmp_path):
    text = data.dumps_preset(data.preset("exp1-3disks"))
    with pytest.raises(FormatError, match="version 9"):
        data.loads_preset(text.replace(" v1", " v9", 1))
    with pytest.raises(FormatError, match=":1:"):
        data.loads_preset("[preset]\nname = x\n")
    with pytest.raises(FormatError, match="missing section"):
        data.loads_preset(text[: text.index("[tscm]")])
    with pytest.raises(FormatError, match="unknown keys"):
        data.loads_preset(text + "extra = 1\n")


@pytest.fixture
def meas():
    plan = ExcitationPlan((1.0, 2.5), (0, 3), (1.0, 0.5))
    rng = np.random.default_rng(0)
    vals = rng.standard_normal((2, 2, 5)) + 1j * rng.standard_normal((2, 2, 5))
    return MeasurementSet(plan, vals, 0.05, 7)


def test_measurements_round_trip(meas, tmp_path):
    path = tmp_path / "m.txt"
    data.save_measurements(meas, path)
    back = data.load_measurements(path)
    assert back.plan == meas.plan and back.rho == 0.05 and back.seed == 7
    assert np.array_equal(back.values, meas.values)
    assert data.dumps_measurements(back) == path.read_text()


def test_measurements_truncation_and_version(meas):
    text = data.dumps_measurements(meas)
    lines = text.splitlines()
    with pytest.raises(FormatError, match="truncated"):
        data.loads_measurements("\n".join(lines[:-3]) + "\n")
    with pytest.raises(FormatError, match="version"):
        data.loads_measurements(text.replace(" v1", " v2", 1))
    with pytest.raises(FormatError, match=":7:"):
        data.loads_measurements(text.replace(lines[6], "1.0 oops", 1))
    with pytest.raises(FormatError, match="empty"):
        data.loads_measurements("")
    with pytest.raises(FormatError, match="trailing"):
        data.loads_measurements(text + "1 2\n")


def test_field_round_trip(coarse_mesh, tmp_path, rng):
    for vals in (rng.standard_normal(coarse_mesh.n_nodes), rng.standard_normal(coarse_mesh.n_nodes) * (1 + 2j)):
        f = NodalField(coarse_mesh, vals)
        path = tmp_path / "f.txt"
        data.save_field(f, path)
        back = data.load_field(coarse_mesh, path)
        assert np.array_equal(back.values, vals)
    with pytest.raises(FormatError, match="nodes"):
        data.loads_field(build_disk_mesh(1.0, 0.5, 4), path.read_text())
    with pytest.raises(FormatError, match="truncated"):
        data.loads_field(coarse_mesh, "\n".join(path.read_text().splitlines()[:10]))


def test_runlog_round_trip(tmp_path):
    log = RunLog(
        [IterationRecord(1, 0.0, 1.5, 0.25, 1.75, 3.0, 0.0, 2.0, 0.125), IterationRecord(2, 0.1, 1.0, 0.5, 1.5, 1.0, 2.0, 4.0, 0.5)],
        [StageRecord(0.0, 1, "max_iters", 1.75), StageRecord(0.1, 1, "step", 1.5)],
        [(1, 0.9), (2, 0.8)],
        0.8,
    )
    path = tmp_path / "r.txt"
    data.save_runlog(log, path)
    back = data.load_runlog(path)
    assert back == log
    assert data.dumps_runlog(back) == path.read_text()
    with pytest.raises(FormatError, match="truncated"):
        data.loads_runlog("\n".join(path.read_text().splitlines()[:4]))


def test_seeded_dataset_reverifies_noise_level(tmp_path):
    p = data.preset("exp1-3disks").with_overrides({"mesh.target_h": "0.2", "mesh.n_arcs": "14"})
    p = dataclasses.replace(p, plan=ExcitationPlan.standard(2, 14))
    problem = data.build_problem(p)
    m = problem.measurements(0.05, 7)
    path = tmp_path / "m.txt"
    data.save_measurements(m, path)
    back = data.load_measurements(path)
    clean = problem.measurements(0.0, 7)
    assert back.seed == 7 and back.rho == 0.05
    stat = data.noise_statistic(problem.mesh, back, clean.values)
    assert 0.8 * 0.05 < stat < 1.2 * 0.05
    again = problem.measurements(back.rho, back.seed)
    assert np.array_equal(again.values, back.values)
