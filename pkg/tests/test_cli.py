import dataclasses

import pytest

from mittscm import cli, data, fem
from mittscm.fem import SolverError
from mittscm.forward import ExcitationPlan
from mittscm.tscm import TscmConfig


@pytest.fixture(scope="module")
def tiny_preset(tmp_path_factory):
    base = data.preset("lsm-baseline")
    p = dataclasses.replace(
        base,
        name="tiny",
        plan=ExcitationPlan.standard(1, 14),
        mesh=data.MeshParams(1.0, 0.25, 14, 1),
        tscm=TscmConfig(delta_lambda=0.5, max_inner_iters=2),
        n_lambda=(2, 3),
        seeds=(1, 2),
    )
    path = tmp_path_factory.mktemp("preset") / "tiny.ini"
    data.save_preset(p, path)
    return path


def run(*argv):
    return cli.main([str(a) for a in argv])


def test_gen_data_writes_one_file_per_level(tiny_preset, tmp_path):
    out = tmp_path / "d"
    assert run("gen-data", "--preset", tiny_preset, "--out", out) == cli.EXIT_OK
    files = sorted(p.name for p in out.glob("measurements_*.txt"))
    assert files == [f"measurements_rho{r:g}.txt" for r in (0.01, 0.05, 0.1, 0.2)]
    assert (out / "manifest.txt").is_file()
    assert data.load_measurements(out / "measurements_rho0.05.txt").rho == 0.05


def test_gen_data_zero_noise_is_clean(tiny_preset, tmp_path):
    out = tmp_path / "d"
    assert run("gen-data", "--preset", tiny_preset, "--out", out, "--rho", "0") == cli.EXIT_OK
    meas = data.load_measurements(out / "measurements_rho0.txt")
    problem = data.build_problem(data.load_preset(tiny_preset))
    clean = problem.measurements(0.0, None)
    assert (meas.values == clean.values).all()


def test_existing_output_needs_overwrite(tiny_preset, tmp_path):
    out = tmp_path / "d"
    assert run("gen-data", "--preset", tiny_preset, "--out", out, "--rho", "0") == cli.EXIT_OK
    assert run("gen-data", "--preset", tiny_preset, "--out", out, "--rho", "0") == cli.EXIT_CONFIG
    assert run("gen-data", "--preset", tiny_preset, "--out", out, "--rho", "0", "--overwrite") == cli.EXIT_OK


def test_run_writes_outputs_and_manifest_rerun_is_identical(tiny_preset, tmp_path, capsys):
    a, b = tmp_path / "a", tmp_path / "b"
    assert run("run", "--preset", tiny_preset, "--out", a, "--no-timing") == cli.EXIT_OK
    for name in ("sigma.txt", "phi.txt", "sigma_l2.txt", "runlog.csv", "stages.csv", "runlog.txt", "summary.txt"):
        assert (a / name).is_file(), name
    summary = (a / "summary.txt").read_text()
    assert "final_error" in summary and "stages = 3" in summary
    assert run("run", "--manifest", a / "manifest.txt", "--out", b) == cli.EXIT_OK
    for name in ("runlog.txt", "runlog.csv", "sigma.txt", "manifest.txt"):
        assert (a / name).read_bytes() == (b / name).read_bytes(), name


def test_run_with_data_file_and_stage_count(tiny_preset, tmp_path):
    d = tmp_path / "d"
    assert run("gen-data", "--preset", tiny_preset, "--out", d, "--rho", "0.01") == cli.EXIT_OK
    out = tmp_path / "r"
    rc = run("run", "--preset", tiny_preset, "--data", d / "measurements_rho0.01.txt", "--n-lambda", 2, "--out", out)
    assert rc == cli.EXIT_OK
    assert "stages = 2" in (out / "summary.txt").read_text()
    assert "data_sha256" in (out / "manifest.txt").read_text()


def test_baseline_runs_single_stage(tiny_preset, tmp_path):
    out = tmp_path / "b"
    assert run("baseline", "--preset", tiny_preset, "--out", out) == cli.EXIT_OK
    assert "stages = 1" in (out / "summary.txt").read_text()


def test_report_emits_csv(tiny_preset, tmp_path):
    r = tmp_path / "r"
    assert run("run", "--preset", tiny_preset, "--out", r) == cli.EXIT_OK
    rep = tmp_path / "rep"
    assert run("report", r, "--out", rep) == cli.EXIT_OK
    for name in ("runlog.csv", "stages.csv", "errors.csv", "convergence.gp", "summary.txt"):
        assert (rep / name).is_file()
    assert run("report", tmp_path) == cli.EXIT_CONFIG


def test_sweep_dlambda(tiny_preset, tmp_path, capsys):
    out = tmp_path / "s"
    assert run("sweep", "--study", "dlambda", "--preset", tiny_preset, "--out", out) == cli.EXIT_OK
    rows = (out / "runs.csv").read_text().splitlines()
    assert rows[0] == "n_lambda,seed,error,iterations,stage_iters"
    assert len(rows) == 1 + 2 * 2
    assert (out / "aggregate.csv").is_file()


def test_sweep_is_independent_of_process_count(tiny_preset):
    p = data.load_preset(tiny_preset)
    serial = cli.sweep(p, "noise", [1], values=[0.01, 0.1])
    parallel = cli.sweep(p, "noise", [1], values=[0.01, 0.1], processes=2)
    assert serial == parallel


def test_verify_passes(tmp_path, capsys):
    assert run("verify", "--out", tmp_path / "v") == cli.EXIT_OK
    assert "FAIL" not in (tmp_path / "v" / "verify.txt").read_text()


def test_verify_negative_control_fails(capsys):
    assert run("verify", "--negative-control") == cli.EXIT_VERIFY


@pytest.mark.parametrize(
    "argv",
    [
        ["run", "--preset", "no-such-preset", "--out", "{tmp}/x"],
        ["run", "--preset", "exp1-3disks", "--set", "tscm.nope=1", "--out", "{tmp}/x"],
        ["run", "--preset", "exp1-3disks", "--set", "tscm.tau1=-1", "--out", "{tmp}/x"],
        ["run", "--preset", "exp1-3disks", "--set", "novalue", "--out", "{tmp}/x"],
        ["run", "--out", "{tmp}/x"],
        ["sweep", "--study", "noise", "--preset", "nope", "--out", "{tmp}/x"],
    ],
)
def test_configuration_errors_exit_2(argv, tmp_path, capsys):
    assert run(*[a.format(tmp=tmp_path) for a in argv]) == cli.EXIT_CONFIG
    assert "configuration error" in capsys.readouterr().err


def test_bad_worker_environment(tmp_path, monkeypatch, capsys):
    monkeypatch.setenv(cli.WORKERS_ENV, "many")
    assert run("verify") == cli.EXIT_CONFIG


def test_mismatched_data_file(tiny_preset, tmp_path, capsys):
    d = tmp_path / "d"
    assert run("gen-data", "--preset", tiny_preset, "--set", "mesh.target_h=0.2", "--out", d, "--rho", "0") == 0
    rc = run("run", "--preset", tiny_preset, "--data", d / "measurements_rho0.txt", "--out", tmp_path / "r")
    assert rc == cli.EXIT_CONFIG


def test_solver_failure_exits_3_and_keeps_partial_log(tiny_preset, tmp_path, monkeypatch, capsys):
    real = fem.solve
    count = {"n": 0}

    def flaky(system, conjugate=False):
        count["n"] += 1
        if count["n"] > 40:
            raise SolverError("forced failure", 1.0)
        return real(system, conjugate)

    monkeypatch.setattr(fem, "solve", flaky)
    out = tmp_path / "r"
    assert run("run", "--preset", tiny_preset, "--out", out) == cli.EXIT_SOLVER
    assert (out / "ABORTED").is_file()
    assert (out / "runlog.txt").is_file() and (out / "manifest.txt").is_file()
    assert "solver failure" in capsys.readouterr().err
