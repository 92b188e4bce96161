"""Oracle suite: gradient checks, convergence order, symmetries and coercivity.

Each check returns a :class:`CheckResult` holding the measured quantity and
its tolerance, so reports can show both.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Callable, Optional

import numpy as np
import scipy.sparse as sp

from . import fem
from .forward import ExcitationPlan, ForwardModel, make_synthetic_measurements
from .mesh import Disk, Mesh, PhantomSpec, build_disk_mesh, indicator_field, signed_distance_field
from .reg import ContinuationState, RegParams, objective, relaxed_reg, total_gradients, tv_value


@dataclass(frozen=True)
class CheckResult:
    name: str
    value: float
    tolerance: float
    passed: bool
    detail: str = ""

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        extra = f"  ({self.detail})" if self.detail else ""
        return f"{status} {self.name}: {self.value:.3e} (tol {self.tolerance:.1e}){extra}"


def _below(name, value, tol, detail="") -> CheckResult:
    return CheckResult(name, float(value), tol, bool(value < tol), detail)


# --------------------------------------------------------------------------
# finite differences


def central_difference(fun: Callable[[float], float], t: float) -> float:
    """Richardson-extrapolated central difference of ``fun`` at 0 (error O(t^4))."""
    d1 = (fun(t) - fun(-t)) / (2 * t)
    d2 = (fun(t / 2) - fun(-t / 2)) / t
    return (4 * d2 - d1) / 3


def relative_gap(a: float, b: float, floor: float = 1e-300) -> float:
    """``|a - b| / |b|``, or 0 when both are below ``floor``."""
    if abs(a) < floor and abs(b) < floor:
        return 0.0
    return abs(a - b) / max(abs(b), floor)


@dataclass(eq=False)
class GradientProblem:
    """A small inverse problem used by the gradient oracles."""

    mesh: Mesh
    model: ForwardModel
    plan: ExcitationPlan
    measurements: object
    params: RegParams
    phi: np.ndarray
    sigma_l2: np.ndarray

    def state(self, lam: float, phi=None, sigma_l2=None, params=None) -> ContinuationState:
        return ContinuationState.create(
            self.mesh,
            self.phi if phi is None else phi,
            self.sigma_l2 if sigma_l2 is None else sigma_l2,
            lam,
            params or self.params,
        )

    def total(self, state, params=None) -> float:
        return objective(state, params or self.params, self.measurements, self.plan, self.model).total


def gradient_problem(target_h: float = 0.2, n_arcs: int = 14, n_omega: int = 2, seed: int = 0) -> GradientProblem:
    """Coarse mesh, three-disk data with 1% noise, a generic interior state."""
    mesh = build_disk_mesh(1.0, target_h, n_arcs)
    plan = ExcitationPlan.standard(n_omega, n_arcs)
    osc = 0.1 / (plan.omegas[0] * 20.0)
    model = ForwardModel(mesh, 1.0, osc)
    phantom = PhantomSpec((Disk((-0.35, 0.3), 0.25), Disk((0.35, 0.3), 0.22), Disk((0.15, -0.55), 0.15)))
    meas = make_synthetic_measurements(mesh, 1.0, phantom, plan, 0.01, seed, omega_scale=osc)
    params = RegParams.for_mesh(mesh, mass_term="half_square")
    rng = np.random.default_rng(seed)
    phi = signed_distance_field(mesh, PhantomSpec((Disk((0.1, 0.0), 0.45),))).values
    phi = phi + 0.05 * rng.standard_normal(mesh.n_nodes)
    x, y = mesh.nodes.T
    sl2 = 3.0 + 2.0 * np.cos(2 * x) * np.sin(y + 0.3) + 0.2 * rng.random(mesh.n_nodes)
    return GradientProblem(mesh, model, plan, meas, params, phi, sl2)


def _directions(mesh: Mesh, n: int, seed: int, interior: bool) -> list[np.ndarray]:
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(n):
        h = rng.standard_normal(mesh.n_nodes)
        if interior:
            h[mesh.is_boundary_node] = 0.0
        out.append(h / math.sqrt(fem.l2_inner(mesh, h, h)))
    return out


def fidelity_gradient_errors(
    gp: GradientProblem, n_dirs: int = 5, seed: int = 1, t: float = 1e-3, flip_sign: bool = False
) -> list[float]:
    """Relative FD errors of the adjoint fidelity gradient in ``sigma``."""
    sigma = gp.sigma_l2
    ev = gp.model.evaluate(sigma, gp.plan, gp.measurements, gradient=True)
    g = -ev.gradient if flip_sign else ev.gradient
    errs = []
    for h in _directions(gp.mesh, n_dirs, seed, interior=False):

        def f(s):
            return gp.model.evaluate(sigma + s * h, gp.plan, gp.measurements).value

        errs.append(relative_gap(fem.l2_inner(gp.mesh, g, h), central_difference(f, t)))
    return errs


def composite_gradient_errors(
    gp: GradientProblem,
    lam: float,
    variable: str,
    n_dirs: int = 5,
    seed: int = 2,
    t: float = 1e-3,
    params: Optional[RegParams] = None,
    flip_sign: bool = False,
) -> list[float]:
    """Relative FD errors of ``grad_phi`` or ``grad_sigma_l2`` of the full objective.

    ``phi`` directions vanish on the boundary when ``params.zero_boundary``
    since the regularizer gradient is an H^1_0 representer.
    """
    params = params or gp.params
    state = gp.state(lam, params=params)
    val = objective(state, params, gp.measurements, gp.plan, gp.model, gradient=True)
    grads = total_gradients(state, params, val.evaluation.gradient)
    g = grads.phi if variable == "phi" else grads.sigma_l2
    if flip_sign:
        g = -g
    interior = variable == "phi" and params.zero_boundary
    errs = []
    for h in _directions(gp.mesh, n_dirs, seed, interior):

        def f(s):
            if variable == "phi":
                st = gp.state(lam, phi=gp.phi + s * h, params=params)
            else:
                st = gp.state(lam, sigma_l2=gp.sigma_l2 + s * h, params=params)
            return gp.total(st, params)

        fd = central_difference(f, t)
        an = fem.l2_inner(gp.mesh, g, h)
        scale = max(abs(fd), abs(an))
        errs.append(0.0 if scale < 1e-14 * max(1.0, abs(val.total)) else relative_gap(an, fd))
    return errs


def gradient_checks(gp: Optional[GradientProblem] = None, flip_sign: bool = False) -> list[CheckResult]:
    gp = gp or gradient_problem()
    out = [_below("fd_fidelity_sigma", max(fidelity_gradient_errors(gp, flip_sign=flip_sign)), 1e-4)]
    for lam in (0.0, 0.5, 1.0):
        for var in ("phi", "sigma_l2"):
            errs = composite_gradient_errors(gp, lam, var, flip_sign=flip_sign)
            out.append(_below(f"fd_{var}_lambda{lam:g}", max(errs), 1e-3, "5 directions"))
    free = replace(gp.params, zero_boundary=False)
    errs = composite_gradient_errors(gp, 0.5, "phi", params=free, flip_sign=flip_sign)
    out.append(_below("fd_phi_lambda0.5_h1", max(errs), 1e-3, "unconstrained boundary"))
    return out


# --------------------------------------------------------------------------
# manufactured solution


def _mms_exact(p):
    return p[..., 0] ** 2 + 1j * p[..., 1] ** 2


def _mms_grad(p):
    return np.stack([2 * p[..., 0], 2j * p[..., 1]], axis=-1)


_GAUSS3 = (np.array([0.5 - math.sqrt(15) / 10, 0.5, 0.5 + math.sqrt(15) / 10]), np.array([5, 8, 5]) / 18)


def mms_error(target_h: float, mu_inv: float = 1.0, omega: float = 1.0) -> tuple[float, float]:
    """L2 error of the P1 solution for ``A = x^2 + i y^2`` with ``sigma = 2 + x``.

    Volume source and Neumann data are computed from the exact solution on
    the polygonal domain, so the only error is the discretization error.
    Returns ``(mesh.h, error)``.
    """
    mesh = build_disk_mesh(1.0, target_h, 4)
    sigma = 2.0 + mesh.nodes[:, 0]
    system = fem.assemble_system(mesh, mu_inv, omega, sigma)
    pts, bary, w = fem.quadrature_points(mesh)
    s_q = 2.0 + pts[..., 0]
    f = -mu_inv * (2 + 2j) + 1j * omega * s_q * _mms_exact(pts)
    rhs = np.zeros(mesh.n_nodes, dtype=complex)
    np.add.at(rhs, mesh.triangles, np.einsum("tq,qi->ti", w * f, bary))
    a, b = mesh.boundary_edges.T
    pa, pb = mesh.nodes[a], mesh.nodes[b]
    length = np.linalg.norm(pb - pa, axis=1)
    tangent = (pb - pa) / length[:, None]
    normal = np.column_stack([tangent[:, 1], -tangent[:, 0]])  # outward for a ccw loop
    s, ws = _GAUSS3
    for sk, wk in zip(s, ws):
        q = pa + sk * (pb - pa)
        g = mu_inv * np.einsum("ed,ed->e", _mms_grad(q), normal)
        np.add.at(rhs, a, wk * length * g * (1 - sk))
        np.add.at(rhs, b, wk * length * g * sk)
    A = fem.solve(system.with_rhs(rhs))
    Ah = np.einsum("qi,ti->tq", bary, A[mesh.triangles])
    err = math.sqrt(float(np.sum(w * np.abs(Ah - _mms_exact(pts)) ** 2)))
    return mesh.h, err


def mms_ratios(h0: float = 0.2, levels: int = 3) -> list[float]:
    errs = [mms_error(h0 / 2**k)[1] for k in range(levels)]
    return [errs[k] / errs[k + 1] for k in range(levels - 1)]


def convergence_check() -> CheckResult:
    ratios = mms_ratios()
    worst = max(abs(r - 4.0) for r in ratios)
    ok = all(3.5 <= r <= 4.5 for r in ratios)
    return CheckResult("fem_l2_order", worst, 0.5, ok, "ratios " + ", ".join(f"{r:.3f}" for r in ratios))


# --------------------------------------------------------------------------
# symmetry and structure


def symmetry_checks(target_h: float = 0.2, n_arcs: int = 14) -> list[CheckResult]:
    mesh = build_disk_mesh(1.0, target_h, n_arcs)
    rng = np.random.default_rng(3)
    sigma = 1.0 + rng.random(mesh.n_nodes)
    system = fem.assemble_system(mesh, 1.0, 2.0, sigma)
    S = system.matrix
    sym = sp.linalg.norm(S - S.T) / sp.linalg.norm(S)
    out = [_below("system_complex_symmetric", sym, 1e-14)]

    # reciprocity: int_{arc j} A_i = int_{arc i} A_j for the symmetric system
    plan = ExcitationPlan((2.0,), tuple(range(n_arcs)))
    model = ForwardModel(mesh, 1.0, 1.0)
    sol = model.impedance_map(sigma, plan)
    loads = np.column_stack([fem.neumann_load(mesh, c) for c in plan.coils])
    R = loads.T @ sol.states[0].T
    out.append(_below("reciprocity", np.abs(R - R.T).max() / np.abs(R).max(), 1e-10))

    # rotating the conductivity by one coil arc permutes nodes and coils
    perm = mesh.rotation_permutation(1)
    sol_rot = model.impedance_map(sigma[np.argsort(perm)], plan)
    A = sol.states[0]
    A_rot = sol_rot.states[0]
    gap = 0.0
    for c in range(n_arcs):
        gap = max(gap, np.abs(A_rot[(c + 1) % n_arcs][perm] - A[c]).max())
    out.append(_below("rotation_equivariance", gap / np.abs(A).max(), 1e-10))
    return out


def coercivity_check(n_fields: int = 100, seed: int = 4) -> CheckResult:
    """``R_W(w) >= C |w|_W^2`` with ``C = 1``: the discrete norm makes it an identity."""
    mesh = build_disk_mesh(1.0, 0.2, 14)
    m = fem.lumped_mass(mesh)
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(n_fields):
        w = rng.standard_normal(mesh.n_nodes) * rng.uniform(0.1, 10)
        norm2 = float(np.sum(m * w * w))
        worst = max(worst, (norm2 - relaxed_reg(mesh, w)) / norm2)
    return CheckResult("relaxed_reg_coercivity", worst, 1e-14, worst <= 1e-14, f"{n_fields} random fields, C = 1")


def tv_perimeter_check(target_h: float = 0.025, radius: float = 0.3) -> CheckResult:
    mesh = build_disk_mesh(1.0, target_h, 28)
    phantom = PhantomSpec((Disk((0.0, 0.0), radius),))
    s = indicator_field(mesh, phantom).values
    tv = tv_value(mesh, s, mesh.h**2)
    ref = (phantom.sigma1 - phantom.sigma2) * 2 * math.pi * radius
    return _below("tv_sharp_disk_perimeter", abs(tv - ref) / ref, 0.10, f"TV={tv:.4g}, jump*perimeter={ref:.4g}")


def run_all(flip_sign: bool = False) -> list[CheckResult]:
    """The full oracle suite; ``flip_sign`` negates analytic gradients (negative control)."""
    results = gradient_checks(flip_sign=flip_sign)
    results.append(convergence_check())
    results += symmetry_checks()
    results.append(coercivity_check())
    results.append(tv_perimeter_check())
    return results


def report(results: list[CheckResult]) -> str:
    lines = [r.line() for r in results]
    n_fail = sum(not r.passed for r in results)
    lines.append(f"{len(results) - n_fail}/{len(results)} checks passed")
    return "\n".join(lines) + "\n"
