"""Impedance map, multi-frequency fidelity and its adjoint gradient.

Frequencies enter the PDE as ``omega * omega_scale``.  With
``omega_scale = 1`` and ``mu_inv = 1 / mu_0`` the model is in SI units; the
built-in presets instead use a nondimensional frequency unit (see
:mod:`mittscm.data`).
"""

from __future__ import annotations

import functools
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import fem
from .fem import BoundaryTrace, NodalField, SolverError, SparseSystem, values_of
from .mesh import Mesh, PhantomSpec, indicator_field

MU0 = 4e-7 * math.pi


@dataclass(frozen=True)
class ExcitationPlan:
    """Angular frequencies times coil arcs, each coil driven with its amplitude."""

    omegas: tuple[float, ...]
    coils: tuple[int, ...]
    amplitudes: tuple[float, ...] = ()

    def __post_init__(self):
        omegas = tuple(float(w) for w in self.omegas)
        coils = tuple(int(c) for c in self.coils)
        amps = tuple(float(a) for a in self.amplitudes) or (1.0,) * len(coils)
        if not omegas or min(omegas) <= 0 or len(set(omegas)) != len(omegas):
            raise ValueError("omegas must be positive and distinct")
        if not coils or len(set(coils)) != len(coils) or min(coils) < 0:
            raise ValueError("coil indices must be distinct and non-negative")
        if len(amps) != len(coils):
            raise ValueError("one amplitude per coil required")
        object.__setattr__(self, "omegas", omegas)
        object.__setattr__(self, "coils", coils)
        object.__setattr__(self, "amplitudes", amps)

    @classmethod
    def standard(cls, n_omega: int = 1, n_coils: int = 28) -> "ExcitationPlan":
        """``omega_i = 2 pi 2^(15+i)``, unit amplitudes on ``n_coils`` coils."""
        return cls(tuple(2 * math.pi * 2.0 ** (15 + i) for i in range(n_omega)), tuple(range(n_coils)))

    @property
    def shape(self) -> tuple[int, int]:
        return len(self.omegas), len(self.coils)


@dataclass(eq=False)
class ForwardSolution:
    """States ``A`` for every (omega, coil) with the factorized systems."""

    mesh: Mesh
    plan: ExcitationPlan
    states: np.ndarray  # (K, C, N) complex
    systems: list[SparseSystem] = field(repr=False)

    @property
    def traces(self) -> np.ndarray:
        """Boundary traces, shape (K, C, B), boundary-loop order."""
        return self.states[:, :, self.mesh.boundary_nodes]

    def __getitem__(self, key: tuple[float, int]) -> tuple[NodalField, BoundaryTrace]:
        omega, coil = key
        k = self.plan.omegas.index(float(omega))
        c = self.plan.coils.index(int(coil))
        A = NodalField(self.mesh, self.states[k, c])
        return A, fem.boundary_trace(A)


@dataclass(eq=False)
class MeasurementSet:
    """Boundary data ``m`` for every (omega, coil) of a plan, shape (K, C, B)."""

    plan: ExcitationPlan
    values: np.ndarray
    rho: float = 0.0
    seed: Optional[int] = None

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=complex)
        K, C = self.plan.shape
        if self.values.ndim != 3 or self.values.shape[:2] != (K, C):
            raise ValueError(f"measurement array shape {self.values.shape} does not match plan {K}x{C}")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("measurements contain NaN or Inf")

    @property
    def n_boundary(self) -> int:
        return self.values.shape[2]


@functools.lru_cache(maxsize=16)
def coil_loads(mesh: Mesh, plan: ExcitationPlan) -> np.ndarray:
    """Neumann load vectors, one column per coil, shape (N, C); read-only."""
    loads = np.column_stack([fem.neumann_load(mesh, c, a) for c, a in zip(plan.coils, plan.amplitudes)])
    loads = loads.astype(complex)
    loads.setflags(write=False)
    return loads


def _map(workers: int, fn, items):
    if workers <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


def impedance_map(
    mesh: Mesh,
    mu_inv: float,
    sigma,
    plan: ExcitationPlan,
    *,
    omega_scale: float = 1.0,
    workers: int = 1,
) -> ForwardSolution:
    """Solve the forward problem for every (omega, coil); one LU per omega."""
    s = values_of(sigma)
    loads = coil_loads(mesh, plan)

    def one(omega):
        system = fem.assemble_system(mesh, mu_inv, omega * omega_scale, s).with_rhs(loads)
        try:
            A = fem.solve(system)
        except SolverError as exc:
            raise SolverError(f"forward solve failed at omega={omega:g}: {exc}", exc.residual) from exc
        return system, A.T

    out = _map(workers, one, list(plan.omegas))
    states = np.stack([a for _, a in out])
    return ForwardSolution(mesh, plan, states, [sysm for sysm, _ in out])


def _trace_values(traces) -> np.ndarray:
    if isinstance(traces, ForwardSolution):
        return traces.traces
    if isinstance(traces, MeasurementSet):
        return traces.values
    return np.asarray(traces)


def fidelity_terms(mesh: Mesh, traces, measurements: MeasurementSet) -> np.ndarray:
    """Per-(omega, coil) boundary integrals of ``|trace - m|^2``, shape (K, C)."""
    t = _trace_values(traces)
    if t.shape != measurements.values.shape:
        raise ValueError(f"trace index set {t.shape} does not match measurements {measurements.values.shape}")
    r = t - measurements.values
    return np.einsum("b,kcb->kc", mesh.boundary_weights, np.abs(r) ** 2)


def fidelity(mesh: Mesh, traces, measurements: MeasurementSet) -> float:
    """Sum over omegas and coils of ``int_Gamma |trace - m|^2 dS``."""
    terms = fidelity_terms(mesh, traces, measurements)
    # fixed summation order keeps reductions reproducible
    return float(sum(float(x) for x in terms.ravel()))


def adjoint_rhs(mesh: Mesh, residual: np.ndarray) -> np.ndarray:
    """Nodal right-hand side ``-(phi, residual)_Gamma`` for residual traces (..., B)."""
    r = np.asarray(residual)
    rhs = np.zeros(r.shape[:-1] + (mesh.n_nodes,), dtype=complex)
    rhs[..., mesh.boundary_nodes] = -mesh.boundary_weights * r
    return rhs


def solve_adjoint(
    mesh: Mesh,
    mu_inv: float,
    omega: float,
    sigma,
    residual,
    *,
    omega_scale: float = 1.0,
    system: Optional[SparseSystem] = None,
) -> NodalField:
    """Adjoint state ``Z`` for one residual trace ``Lambda(sigma) - m``.

    The adjoint matrix is the complex conjugate of the forward matrix, so a
    factorized forward ``system`` is reused when given.
    """
    if system is None:
        system = fem.assemble_system(mesh, mu_inv, omega * omega_scale, values_of(sigma))
    r = residual.values if isinstance(residual, BoundaryTrace) else np.asarray(residual)
    if r.shape != (len(mesh.boundary_nodes),):
        raise ValueError("residual must live on the boundary loop of the mesh")
    Z = fem.solve(system.with_rhs(adjoint_rhs(mesh, r)), conjugate=True)
    return NodalField(mesh, Z)


def fidelity_sensitivity(mesh: Mesh, states: np.ndarray, adjoints: np.ndarray, omegas: Sequence[float]) -> np.ndarray:
    """Euclidean derivative ``dF/dsigma_k = sum 2 Re[i omega int l_k A conj(Z)]``.

    ``states`` and ``adjoints`` have shape (K, C, N); ``omegas`` are the
    frequencies as they enter the PDE.
    """
    if states.shape != adjoints.shape or len(omegas) != states.shape[0]:
        raise ValueError("states, adjoints and omegas do not cover the same (omega, coil) pairs")
    d = np.zeros(mesh.n_nodes)
    for k, w in enumerate(omegas):
        tp = fem.triple_product_gradient(mesh, states[k], np.conj(adjoints[k]))
        d += 2.0 * np.real(1j * w * tp)
    return d


def grad_fidelity_sigma(mesh: Mesh, states, adjoints, omegas: Sequence[float]) -> NodalField:
    """L2 representer (lumped mass) of the fidelity derivative in ``sigma``."""
    d = fidelity_sensitivity(mesh, np.asarray(states), np.asarray(adjoints), omegas)
    return fem.h1_projection(mesh, d, use_zero_boundary=False)


@dataclass(eq=False)
class FidelityEvaluation:
    value: float
    solution: ForwardSolution
    gradient: Optional[np.ndarray] = None  # lumped-L2 representer
    sensitivity: Optional[np.ndarray] = None  # Euclidean derivative


def evaluate_fidelity(
    mesh: Mesh,
    mu_inv: float,
    sigma,
    plan: ExcitationPlan,
    measurements: MeasurementSet,
    *,
    omega_scale: float = 1.0,
    workers: int = 1,
    solution: Optional[ForwardSolution] = None,
    gradient: bool = False,
) -> FidelityEvaluation:
    """Fidelity value and, optionally, its adjoint gradient.

    A previously computed forward ``solution`` for the same ``sigma`` is reused.
    """
    if solution is None:
        solution = impedance_map(mesh, mu_inv, sigma, plan, omega_scale=omega_scale, workers=workers)
    value = fidelity(mesh, solution, measurements)
    ev = FidelityEvaluation(value, solution)
    if not gradient:
        return ev
    residual = solution.traces - measurements.values

    def one(k):
        rhs = adjoint_rhs(mesh, residual[k]).T
        return fem.solve(solution.systems[k].with_rhs(rhs), conjugate=True).T

    adjoints = np.stack(_map(workers, one, list(range(len(plan.omegas)))))
    eff = [w * omega_scale for w in plan.omegas]
    ev.sensitivity = fidelity_sensitivity(mesh, solution.states, adjoints, eff)
    ev.gradient = fem.h1_projection(mesh, ev.sensitivity, use_zero_boundary=False).values
    return ev


# --------------------------------------------------------------------------
# synthetic data


def transfer_traces(source: Mesh, target: Mesh, values: np.ndarray) -> np.ndarray:
    """Periodic linear interpolation of boundary traces in the polar angle."""
    src_theta = source.boundary_angles
    order = np.argsort(src_theta)
    th = src_theta[order]
    th_ext = np.concatenate([th[-1:] - 2 * np.pi, th, th[:1] + 2 * np.pi])
    vals = np.asarray(values)[..., order]
    vals_ext = np.concatenate([vals[..., -1:], vals, vals[..., :1]], axis=-1)
    x = target.boundary_angles
    flat = vals_ext.reshape(-1, vals_ext.shape[-1])
    out = np.array([np.interp(x, th_ext, f.real) + 1j * np.interp(x, th_ext, f.imag) for f in flat])
    return out.reshape(vals.shape[:-1] + (len(x),))


def add_noise(mesh: Mesh, clean: np.ndarray, rho: float, seed: Optional[int]) -> np.ndarray:
    """Complex Gaussian noise of relative L2(Gamma) level ``rho`` per (omega, coil).

    Each node gets ``rho * |clean|_{L2} / sqrt(2 |Gamma|) * (g_re + i g_im)``,
    so the expected squared noise norm is ``rho^2 |clean|^2``.
    """
    if rho < 0:
        raise ValueError("noise level must be non-negative")
    if rho == 0:
        return clean.copy()
    rng = np.random.default_rng(seed)
    out = clean.copy()
    K, C, B = clean.shape
    for k in range(K):
        for c in range(C):
            scale = rho * fem.boundary_l2_norm(mesh, clean[k, c]) / math.sqrt(2.0 * mesh.perimeter)
            g = rng.standard_normal((2, B))
            out[k, c] = clean[k, c] + scale * (g[0] + 1j * g[1])
    return out


def make_synthetic_measurements(
    mesh: Mesh,
    mu_inv: float,
    phantom: PhantomSpec,
    plan: ExcitationPlan,
    noise_level: float,
    seed: Optional[int],
    *,
    data_mesh: Optional[Mesh] = None,
    omega_scale: float = 1.0,
    workers: int = 1,
) -> MeasurementSet:
    """Noisy boundary data of a phantom on the boundary of ``mesh``.

    With ``data_mesh`` the clean data are simulated there and transferred to
    the boundary of ``mesh``, so data and inversion discretizations differ.
    """
    src = data_mesh if data_mesh is not None else mesh
    sigma = indicator_field(src, phantom)
    sol = impedance_map(src, mu_inv, sigma, plan, omega_scale=omega_scale, workers=workers)
    clean = sol.traces if src is mesh else transfer_traces(src, mesh, sol.traces)
    noisy = add_noise(mesh, clean, noise_level, seed)
    return MeasurementSet(plan, noisy, rho=float(noise_level), seed=seed)


@dataclass(frozen=True, eq=False)
class ForwardModel:
    """Mesh and physical constants shared by all forward and adjoint solves."""

    mesh: Mesh
    mu_inv: float = 1.0 / MU0
    omega_scale: float = 1.0
    workers: int = 1

    def impedance_map(self, sigma, plan: ExcitationPlan) -> ForwardSolution:
        return impedance_map(self.mesh, self.mu_inv, sigma, plan, omega_scale=self.omega_scale, workers=self.workers)

    def evaluate(self, sigma, plan, measurements, *, solution=None, gradient=False) -> FidelityEvaluation:
        return evaluate_fidelity(
            self.mesh,
            self.mu_inv,
            sigma,
            plan,
            measurements,
            omega_scale=self.omega_scale,
            workers=self.workers,
            solution=solution,
            gradient=gradient,
        )

    def synthetic(self, phantom, plan, noise_level, seed, data_mesh=None) -> MeasurementSet:
        return make_synthetic_measurements(
            self.mesh,
            self.mu_inv,
            phantom,
            plan,
            noise_level,
            seed,
            data_mesh=data_mesh,
            omega_scale=self.omega_scale,
            workers=self.workers,
        )
