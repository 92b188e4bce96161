import math

import numpy as np
import pytest

from mittscm import fem
from mittscm.fem import NodalField, SolverError
from mittscm.forward import ForwardModel
from mittscm.mesh import Disk, PhantomSpec, indicator_field, signed_distance_field
from mittscm.reg import ContinuationState, RegParams
from mittscm.tscm import (
    RUNLOG_COLUMNS,
    TscmAbort,
    TscmConfig,
    initialize,
    line_search,
    lambda_schedule,
    relative_error,
    run_lsm_baseline,
    run_tscm,
    stage_iterations,
)

from conftest import THREE_DISKS


@pytest.fixture(scope="module")
def params(coarse_mesh):
    return RegParams.for_mesh(coarse_mesh)


def tiny_config(**kw):
    kw.setdefault("max_inner_iters", 4)
    return TscmConfig(**kw)


@pytest.mark.parametrize(
    "dl, expected",
    [
        (1.0, [0.0, 1.0]),
        (0.5, [0.0, 0.5, 1.0]),
        (0.25, [0.0, 0.25, 0.5, 0.75, 1.0]),
        (0.3, [0.0, 0.3, 0.6, 0.8999999999999999, 1.0]),
    ],
)
def test_lambda_schedule(dl, expected):
    assert lambda_schedule(dl) == expected


def test_default_schedule_has_eleven_stages():
    lams = lambda_schedule(TscmConfig().delta_lambda)
    assert len(lams) == 11 and lams[0] == 0.0 and lams[-1] == 1.0
    assert np.allclose(np.diff(lams), 0.1)


@pytest.mark.parametrize("dl", [0.0, -0.1, 1.5])
def test_schedule_rejects_bad_increment(dl):
    with pytest.raises(ValueError):
        lambda_schedule(dl)


@pytest.mark.parametrize(
    "kw", [dict(delta_lambda=0), dict(tau1=0), dict(delta2=-1), dict(sigma_min=0), dict(max_inner_iters=-1)]
)
def test_config_validation(kw):
    with pytest.raises(ValueError):
        TscmConfig(**kw)


def test_config_for_stages():
    assert lambda_schedule(TscmConfig.for_stages(5).delta_lambda) == [0.0, 0.25, 0.5, 0.75, 1.0]
    with pytest.raises(ValueError):
        TscmConfig.for_stages(1)


def test_initial_state(coarse_mesh, params):
    st = initialize(coarse_mesh, TscmConfig(), params)
    assert st.lam == 0.0
    assert np.all(st.phi == -1.0)
    assert np.all(st.sigma_l2 == 0.01)
    assert np.all(st.sigma == 0.01)


def test_relative_error_cases(coarse_mesh):
    exact = indicator_field(coarse_mesh, THREE_DISKS)
    assert relative_error(exact, exact) == 0.0
    assert relative_error(np.zeros(coarse_mesh.n_nodes), exact) == pytest.approx(1.0)
    assert relative_error(3.0 * exact.values, exact) == pytest.approx(2.0)
    const = NodalField(coarse_mesh, np.full(coarse_mesh.n_nodes, 4.0))
    assert relative_error(np.full(coarse_mesh.n_nodes, 5.0), const) == pytest.approx(0.25)
    with pytest.raises(ZeroDivisionError):
        relative_error(exact, NodalField(coarse_mesh, np.zeros(coarse_mesh.n_nodes)))


# ----------------------------------------------------------------------------
# line search


def test_line_search_accepts_first_descending_trial():
    calls = []

    def f(s):
        calls.append(s)
        return (s - 0.3) ** 2

    s, ok, k = line_search(f, 2.0, 0.09 - 1e-9, 1e-6, 40)
    assert ok and k == 2 and s == 0.5
    assert calls == [2.0, 1.0, 0.5]


def test_line_search_treats_none_as_rejection():
    s, ok, k = line_search(lambda s: None if s > 0.1 else 0.0, 1.0, 1.0, 1e-6, 40)
    assert ok and s == 0.0625 and k == 4


def test_line_search_fails_below_tau2():
    calls = []

    def f(s):
        calls.append(s)
        return 1.0

    s, ok, k = line_search(f, 1.0, 1.0, 0.1, 40)
    assert not ok
    assert calls == [1.0, 0.5, 0.25, 0.125]
    assert s <= 0.1


def test_line_search_respects_halving_cap():
    s, ok, k = line_search(lambda s: 1.0, 1.0, 0.0, 1e-12, 3)
    assert not ok and k == 3


# ----------------------------------------------------------------------------
# optimizer runs


def test_stationary_state_takes_no_iterations(small_problem):
    model, plan, meas = small_problem
    mesh = model.mesh
    p = RegParams.for_mesh(mesh, alpha=0.0, beta=0.0)
    exact = indicator_field(mesh, THREE_DISKS)
    st = ContinuationState.create(mesh, np.full(mesh.n_nodes, -1.0), exact.values, 0.0, p)
    state, log = run_tscm(model, p, meas, plan, tiny_config(), initial_state=st, lambdas=[0.0])
    assert log.n_iterations == 0
    assert log.stages[0].reason == "gradient"
    assert np.array_equal(state.sigma, exact.values)


@pytest.fixture(scope="module")
def smoke_run(small_problem, params):
    model, plan, meas = small_problem
    exact = indicator_field(model.mesh, THREE_DISKS)
    return run_tscm(model, params, meas, plan, tiny_config(delta_lambda=0.5), exact_sigma=exact, timing=False)


def test_smoke_run_structure(smoke_run):
    state, log = smoke_run
    assert [s.lam for s in log.stages] == [0.0, 0.5, 1.0]
    assert all(0 < s.iters <= 4 for s in log.stages)
    assert log.n_iterations == sum(s.iters for s in log.stages)
    assert [r.n for r in log.records] == list(range(1, log.n_iterations + 1))
    assert len(log.errors) == log.n_iterations
    assert math.isfinite(log.final_error)
    assert state.lam == 1.0
    assert stage_iterations(log) == {s.lam: s.iters for s in log.stages}


def test_objective_strictly_decreases_within_stages(smoke_run):
    _, log = smoke_run
    for lam in {r.lam for r in log.records}:
        totals = [r.total for r in log.records if r.lam == lam]
        assert all(b < a for a, b in zip(totals, totals[1:]))


def test_step_sizes_follow_doubling_rule(smoke_run):
    _, log = smoke_run
    cfg = TscmConfig()
    for lam in {r.lam for r in log.records}:
        steps = [r.step for r in log.records if r.lam == lam]
        assert steps[0] <= cfg.s_init
        assert math.log2(cfg.s_init / steps[0]) == int(math.log2(cfg.s_init / steps[0]))
        for a, b in zip(steps, steps[1:]):
            ratio = math.log2(b / a)
            assert ratio == int(ratio) and ratio <= 1


def test_sigma_l2_stays_admissible(smoke_run):
    state, _ = smoke_run
    assert state.sigma_l2.min() >= TscmConfig().sigma_min


def test_runlog_csv(smoke_run):
    _, log = smoke_run
    lines = log.to_csv(timing=False).splitlines()
    assert lines[0].split(",") == RUNLOG_COLUMNS
    assert len(lines) == log.n_iterations + 1
    assert all(line.endswith(",0.0") for line in lines[1:])
    assert log.stages_csv().splitlines()[0] == "lambda,iters"


def test_unit_increment_gives_two_stages(small_problem, params):
    model, plan, meas = small_problem
    _, log = run_tscm(model, params, meas, plan, tiny_config(delta_lambda=1.0, max_inner_iters=2))
    assert [s.lam for s in log.stages] == [0.0, 1.0]


def test_final_stage_equals_level_set_baseline(small_problem, params):
    model, plan, meas = small_problem
    mesh = model.mesh
    phi0 = signed_distance_field(mesh, PhantomSpec((Disk((0.0, 0.0), 0.3),))).values
    st = ContinuationState.create(mesh, phi0, np.full(mesh.n_nodes, 0.01), 1.0, params)
    cfg = tiny_config()
    a, la = run_tscm(model, params, meas, plan, cfg, initial_state=st, lambdas=[1.0], timing=False)
    b, lb = run_lsm_baseline(model, params, meas, plan, cfg, PhantomSpec((Disk((0.0, 0.0), 0.3),)), timing=False)
    assert np.array_equal(a.sigma, b.sigma)
    assert la.to_csv(False) == lb.to_csv(False)


def test_baseline_requires_initial_shape(small_problem, params):
    model, plan, meas = small_problem
    with pytest.raises(ValueError):
        run_lsm_baseline(model, params, meas, plan, tiny_config())


def test_runs_are_deterministic_across_workers(small_problem, params):
    model, plan, meas = small_problem
    cfg = tiny_config(delta_lambda=0.5, max_inner_iters=3)
    _, a = run_tscm(model, params, meas, plan, cfg, timing=False)
    _, b = run_tscm(model, params, meas, plan, cfg, timing=False)
    threaded = ForwardModel(model.mesh, model.mu_inv, model.omega_scale, workers=2)
    _, c = run_tscm(threaded, params, meas, plan, cfg, timing=False)
    assert a.to_csv(False) == b.to_csv(False) == c.to_csv(False)
    assert a.stages_csv() == c.stages_csv()


def test_solver_failure_aborts_with_partial_log(small_problem, params, monkeypatch):
    model, plan, meas = small_problem
    real = fem.solve
    count = {"n": 0, "limit": math.inf}

    def flaky(system, conjugate=False):
        count["n"] += 1
        if count["n"] > count["limit"]:
            raise SolverError("forced failure", 1.0)
        return real(system, conjugate)

    monkeypatch.setattr(fem, "solve", flaky)
    # solves needed for one accepted iteration, then fail on the next
    run_tscm(model, params, meas, plan, tiny_config(max_inner_iters=1), lambdas=[0.0])
    count["n"], count["limit"] = 0, count["n"]
    with pytest.raises(TscmAbort) as info:
        run_tscm(model, params, meas, plan, tiny_config(delta_lambda=0.5))
    assert info.value.runlog.n_iterations >= 1
    assert isinstance(info.value.state, ContinuationState)
