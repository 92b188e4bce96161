"""Topology-to-shape continuation optimizer and the level-set baseline.

The outer loop raises ``lam`` from 0 to 1 in steps of ``delta_lambda``; each
stage runs steepest descent on ``(sigma_l2, phi)`` with one shared step size.
The step is doubled after a line search that succeeded at its first trial and
halved until the objective strictly decreases.
"""

from __future__ import annotations

import csv
import io
import logging
import time
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from . import fem
from .fem import SolverError, values_of
from .forward import ExcitationPlan, ForwardModel, MeasurementSet
from .mesh import Mesh, PhantomSpec, signed_distance_field
from .reg import ContinuationState, Gradients, ObjectiveValue, RegParams, objective, total_gradients

log = logging.getLogger(__name__)

RUNLOG_COLUMNS = ["n", "lambda", "fidelity", "reg", "total", "gnorm2_sl2", "gnorm2_phi", "step", "seconds"]
STAGE_COLUMNS = ["lambda", "iters"]


@dataclass(frozen=True)
class TscmConfig:
    delta_lambda: float = 0.1
    tau1: float = 1e-5
    tau2: float = 1e-6
    delta1: float = 1.0
    delta2: float = 0.01
    s_init: float = 2.0
    max_inner_iters: int = 500
    k_max_halvings: int = 40
    sigma_min: float = 1e-3

    def __post_init__(self):
        if not 0 < self.delta_lambda <= 1:
            raise ValueError("delta_lambda must lie in (0, 1]")
        if self.tau1 <= 0 or self.tau2 <= 0:
            raise ValueError("tau1 and tau2 must be positive")
        if self.delta1 <= 0 or self.delta2 <= 0:
            raise ValueError("delta1 and delta2 must be positive")
        if self.sigma_min <= 0:
            raise ValueError("sigma_min must be positive")
        if self.s_init <= 0 or self.max_inner_iters < 0 or self.k_max_halvings < 0:
            raise ValueError("invalid step or iteration caps")

    @classmethod
    def for_stages(cls, n_lambda: int, **kw) -> "TscmConfig":
        """Configuration with ``n_lambda`` stages ``lam = k / (n_lambda - 1)``."""
        if n_lambda < 2:
            raise ValueError("use run_lsm_baseline for a single lambda = 1 stage")
        return cls(delta_lambda=1.0 / (n_lambda - 1), **kw)


class TscmAbort(RuntimeError):
    """A solver failure inside the optimizer; carries the last state and log."""

    def __init__(self, message: str, state: ContinuationState, runlog: "RunLog"):
        super().__init__(message)
        self.state = state
        self.runlog = runlog


@dataclass
class IterationRecord:
    n: int
    lam: float
    fidelity: float
    reg: float
    total: float
    gnorm2_sl2: float
    gnorm2_phi: float
    step: float
    seconds: float


@dataclass
class StageRecord:
    lam: float
    iters: int
    reason: str
    total: float


@dataclass
class RunLog:
    records: list[IterationRecord] = field(default_factory=list)
    stages: list[StageRecord] = field(default_factory=list)
    errors: list[tuple[int, float]] = field(default_factory=list)
    final_error: Optional[float] = None

    @property
    def n_iterations(self) -> int:
        return len(self.records)

    def to_csv(self, timing: bool = True) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(RUNLOG_COLUMNS)
        for r in self.records:
            row = [r.n, repr(r.lam), repr(r.fidelity), repr(r.reg), repr(r.total)]
            row += [repr(r.gnorm2_sl2), repr(r.gnorm2_phi), repr(r.step)]
            row.append(repr(r.seconds) if timing else "0.0")
            w.writerow(row)
        return buf.getvalue()

    def stages_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(STAGE_COLUMNS)
        for s in self.stages:
            w.writerow([repr(s.lam), s.iters])
        return buf.getvalue()


def lambda_schedule(delta_lambda: float) -> list[float]:
    """``0, dl, 2 dl, ...`` with the last value clamped to exactly 1."""
    if not 0 < delta_lambda <= 1:
        raise ValueError("delta_lambda must lie in (0, 1]")
    lams = []
    k = 0
    while True:
        lam = k * delta_lambda
        if lam >= 1.0 - 1e-12:
            lams.append(1.0)
            return lams
        lams.append(lam)
        k += 1


def initialize(mesh: Mesh, config: TscmConfig, params: RegParams) -> ContinuationState:
    """Weak phase everywhere: ``phi = -delta1``, ``sigma_l2 = delta2``, ``lam = 0``."""
    phi = np.full(mesh.n_nodes, -config.delta1)
    sl2 = np.full(mesh.n_nodes, config.delta2)
    return ContinuationState.create(mesh, phi, sl2, 0.0, params)


def relative_error(sigma_result, sigma_exact, mesh: Optional[Mesh] = None) -> float:
    """``|s - s_exact|_{L2} / |s_exact|_{L2}`` with consistent mass norms."""
    if mesh is None:
        mesh = sigma_exact.mesh
    a, b = values_of(sigma_result), values_of(sigma_exact)
    den = fem.l2_norm(mesh, b)
    if den == 0:
        raise ZeroDivisionError("exact conductivity has zero L2 norm")
    return fem.l2_norm(mesh, a - b) / den


# --------------------------------------------------------------------------
# line search


@dataclass(eq=False)
class LineSearchResult:
    step: float
    accepted: bool
    halvings: int
    state: Optional[ContinuationState] = None
    value: Optional[ObjectiveValue] = None


def line_search(
    trial_fn: Callable[[float], Optional[float]],
    s_trial: float,
    current: float,
    tau2: float,
    k_max: int,
) -> tuple[float, bool, int]:
    """Halve ``s_trial`` until ``trial_fn(s) < current``.

    ``trial_fn`` returns the objective at step ``s`` or ``None`` for an
    infeasible step.  Returns ``(step, accepted, halvings)``; when no step
    down to ``tau2`` (or ``k_max`` halvings) descends, ``accepted`` is false.
    """
    s = s_trial
    for k in range(k_max + 1):
        val = trial_fn(s)
        if val is not None and val < current:
            return s, True, k
        if k == k_max or s / 2 <= tau2:
            return s / 2, False, k
        s /= 2
    raise AssertionError("unreachable")


class _Problem:
    """Binds data, parameters and a forward model; counts evaluations."""

    def __init__(self, params, measurements, plan, model, config):
        self.params = params
        self.measurements = measurements
        self.plan = plan
        self.model = model
        self.config = config
        self.evals = 0

    def value(self, state: ContinuationState, gradient=False, evaluation=None) -> ObjectiveValue:
        self.evals += 1
        return objective(
            state, self.params, self.measurements, self.plan, self.model, gradient=gradient, evaluation=evaluation
        )

    def gradient(self, state: ContinuationState, val: ObjectiveValue) -> tuple[ObjectiveValue, Gradients]:
        if val.evaluation.gradient is None:
            val = objective(
                state, self.params, self.measurements, self.plan, self.model, gradient=True, evaluation=val.evaluation
            )
        return val, total_gradients(state, self.params, val.evaluation.gradient)


def _descent_step(problem: _Problem, state, grads: Gradients, s_trial: float, current: float) -> LineSearchResult:
    cache: dict[float, tuple[ContinuationState, ObjectiveValue]] = {}
    params = problem.params

    smin = problem.config.sigma_min

    def trial(s):
        # sigma_l2 is kept in the admissible set sigma >= sigma_min
        sl2 = np.maximum(state.sigma_l2 - s * grads.sigma_l2, smin)
        new = state.update(params, sigma_l2=sl2, phi=state.phi - s * grads.phi)
        if not np.all(new.sigma > 0):
            return None
        val = problem.value(new)
        cache[s] = (new, val)
        return val.total

    cfg = problem.config
    s, ok, k = line_search(trial, s_trial, current, cfg.tau2, cfg.k_max_halvings)
    if not ok:
        return LineSearchResult(s, False, k)
    new, val = cache[s]
    return LineSearchResult(s, True, k, new, val)


def inner_descent(
    state: ContinuationState,
    params: RegParams,
    measurements: MeasurementSet,
    plan: ExcitationPlan,
    config: TscmConfig,
    runlog: RunLog,
    model: ForwardModel,
    *,
    exact_sigma=None,
    timing: bool = True,
    _problem: Optional[_Problem] = None,
) -> ContinuationState:
    """Steepest descent at fixed ``lam``; appends to ``runlog``."""
    problem = _problem or _Problem(params, measurements, plan, model, config)
    mesh = state.mesh
    tau1_sq = config.tau1**2
    s = config.s_init
    grow = False
    iters = 0
    t0 = time.perf_counter()
    try:
        val = problem.value(state, gradient=True)
    except SolverError as exc:
        raise TscmAbort(str(exc), state, runlog) from exc
    while True:
        val, grads = problem.gradient(state, val)
        g_l2, g_phi = grads.norm2(mesh)
        if g_l2 + g_phi <= tau1_sq:
            reason = "gradient"
            break
        if iters >= config.max_inner_iters:
            reason = "max_iters"
            log.info("lambda=%g: inner iteration cap %d hit", state.lam, config.max_inner_iters)
            break
        trial = 2.0 * s if grow else s
        try:
            ls = _descent_step(problem, state, grads, trial, val.total)
        except SolverError as exc:
            raise TscmAbort(str(exc), state, runlog) from exc
        s = ls.step
        if not ls.accepted:
            reason = "step" if s <= config.tau2 else "halvings"
            break
        grow = ls.halvings == 0
        state, val = ls.state, ls.value
        iters += 1
        n = runlog.n_iterations + 1
        runlog.records.append(
            IterationRecord(
                n,
                state.lam,
                val.fidelity,
                val.reg,
                val.total,
                g_l2,
                g_phi,
                s,
                time.perf_counter() - t0 if timing else 0.0,
            )
        )
        if exact_sigma is not None:
            runlog.errors.append((n, relative_error(state.sigma, exact_sigma, mesh)))
        if s <= config.tau2:
            reason = "step"
            break
    runlog.stages.append(StageRecord(state.lam, iters, reason, val.total))
    log.info("lambda=%.4g: %d iterations, stop=%s, T=%.6g", state.lam, iters, reason, val.total)
    return state


def run_tscm(
    model: ForwardModel,
    params: RegParams,
    measurements: MeasurementSet,
    plan: ExcitationPlan,
    config: TscmConfig,
    *,
    initial_state: Optional[ContinuationState] = None,
    exact_sigma=None,
    timing: bool = True,
    lambdas: Optional[list[float]] = None,
) -> tuple[ContinuationState, RunLog]:
    """Continuation from ``lam = 0`` to ``lam = 1``; ``lambdas`` overrides the schedule."""
    mesh = model.mesh
    state = initial_state if initial_state is not None else initialize(mesh, config, params)
    runlog = RunLog()
    problem = _Problem(params, measurements, plan, model, config)
    for lam in lambdas if lambdas is not None else lambda_schedule(config.delta_lambda):
        state = state.update(params, lam=lam)
        state = inner_descent(
            state, params, measurements, plan, config, runlog, model,
            exact_sigma=exact_sigma, timing=timing, _problem=problem,
        )
    if exact_sigma is not None:
        runlog.final_error = relative_error(state.sigma, exact_sigma, mesh)
    return state, runlog


def run_lsm_baseline(
    model: ForwardModel,
    params: RegParams,
    measurements: MeasurementSet,
    plan: ExcitationPlan,
    config: TscmConfig,
    initial_phantom: Optional[PhantomSpec] = None,
    *,
    initial_state: Optional[ContinuationState] = None,
    exact_sigma=None,
    timing: bool = True,
) -> tuple[ContinuationState, RunLog]:
    """Standard level-set descent at ``lam = 1`` from an initial shape."""
    mesh = model.mesh
    if initial_state is None:
        if initial_phantom is None:
            raise ValueError("the level-set baseline needs an initial phantom or state")
        phi0 = signed_distance_field(mesh, initial_phantom).values
        initial_state = ContinuationState.create(mesh, phi0, np.full(mesh.n_nodes, config.delta2), 1.0, params)
    state = initial_state.update(params, lam=1.0)
    runlog = RunLog()
    state = inner_descent(
        state, params, measurements, plan, config, runlog, model, exact_sigma=exact_sigma, timing=timing
    )
    if exact_sigma is not None:
        runlog.final_error = relative_error(state.sigma, exact_sigma, mesh)
    return state, runlog


def stage_iterations(runlog: RunLog) -> dict[float, int]:
    return {s.lam: s.iters for s in runlog.stages}
