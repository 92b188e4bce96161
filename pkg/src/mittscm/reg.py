"""Level-set conductivity, the continuation regularizer and objective gradients.

The combined conductivity is ``sigma = lam * sigma_pc(phi) + (1 - lam) * sigma_l2``
with the smoothed two-phase parametrization
``sigma_pc = sigma1 * H_eps(phi) + sigma2 * (1 - H_eps(phi))``.

All gradients are L2 representers with respect to the lumped (nodal) mass
inner product.  In that metric the node-wise chain rules through ``H_eps``
are exact derivatives of the discrete objective.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Optional

import numpy as np

from . import fem
from .fem import NodalField, values_of
from .forward import ExcitationPlan, FidelityEvaluation, ForwardModel, MeasurementSet
from .mesh import Mesh


@dataclass(frozen=True)
class RegParams:
    """Regularization weights and smoothing constants.

    ``mass_term`` selects the zeroth-order part of the level-set regularizer:
    ``"sqrt"`` evaluates ``int sqrt(sigma_pc^2 + eps)``, ``"half_square"`` the
    functional ``1/2 |sigma_pc|^2`` whose derivative is the ``(sigma_pc, h)``
    term used by the gradient in both cases.
    """

    alpha: float = 1e-5
    beta: float = 1e-5
    eps_heaviside: float = 1e-2
    eps_tv: float = 1e-2
    sigma1: float = 20.0
    sigma2: float = 2.0
    mass_term: str = "sqrt"
    zero_boundary: bool = True

    def __post_init__(self):
        if self.alpha < 0 or self.beta < 0:
            raise ValueError("alpha and beta must be non-negative")
        if self.eps_heaviside <= 0 or self.eps_tv <= 0:
            raise ValueError("smoothing parameters must be positive")
        if self.mass_term not in ("sqrt", "half_square"):
            raise ValueError(f"unknown mass_term {self.mass_term!r}")

    @classmethod
    def for_mesh(cls, mesh: Mesh, **kw) -> "RegParams":
        """Parameters with both smoothing constants set to ``h^2``."""
        eps = mesh.h**2
        kw.setdefault("eps_heaviside", eps)
        kw.setdefault("eps_tv", eps)
        return cls(**kw)


def heaviside_eps(phi, eps: float):
    return np.arctan(np.asarray(phi) / eps) / math.pi + 0.5


def delta_eps(phi, eps: float):
    phi = np.asarray(phi)
    return eps / (math.pi * (phi**2 + eps**2))


def sigma_pc(phi, params: RegParams) -> NodalField | np.ndarray:
    """Smoothed piecewise-constant conductivity of a level set."""
    H = heaviside_eps(values_of(phi), params.eps_heaviside)
    vals = params.sigma1 * H + params.sigma2 * (1.0 - H)
    return NodalField(phi.mesh, vals) if isinstance(phi, NodalField) else vals


@dataclass(frozen=True, eq=False)
class ContinuationState:
    """Iterate ``(phi, sigma_l2, lam)`` with the derived combined conductivity."""

    mesh: Mesh
    phi: np.ndarray
    sigma_l2: np.ndarray
    lam: float
    sigma_pc: np.ndarray
    sigma: np.ndarray

    @classmethod
    def create(cls, mesh: Mesh, phi, sigma_l2, lam: float, params: RegParams) -> "ContinuationState":
        if not 0.0 <= lam <= 1.0:
            raise ValueError(f"lambda={lam} outside [0, 1]")
        phi = np.array(values_of(phi), dtype=float)
        sl2 = np.array(values_of(sigma_l2), dtype=float)
        for name, arr in (("phi", phi), ("sigma_l2", sl2)):
            if arr.shape != (mesh.n_nodes,) or not np.all(np.isfinite(arr)):
                raise ValueError(f"{name} must be a finite nodal vector")
        spc = sigma_pc(phi, params)
        sigma = lam * spc + (1.0 - lam) * sl2
        for arr in (phi, sl2, spc, sigma):
            arr.setflags(write=False)
        return cls(mesh, phi, sl2, float(lam), spc, sigma)

    def update(self, params: RegParams, **changes) -> "ContinuationState":
        phi = changes.pop("phi", self.phi)
        sl2 = changes.pop("sigma_l2", self.sigma_l2)
        lam = changes.pop("lam", self.lam)
        if changes:
            raise TypeError(f"unknown fields {sorted(changes)}")
        return ContinuationState.create(self.mesh, phi, sl2, lam, params)

    def field(self, name: str) -> NodalField:
        return NodalField(self.mesh, getattr(self, name))


# --------------------------------------------------------------------------
# regularizer values

# edge midpoints of the reference triangle: exact for quadratics
_MIDPOINTS = np.array([[0.5, 0.5, 0.0], [0.0, 0.5, 0.5], [0.5, 0.0, 0.5]])


def tv_value(mesh: Mesh, values, eps: float) -> float:
    """Smoothed total variation ``int sqrt(|grad s|^2 + eps)`` of a P1 field."""
    g = element_gradients(mesh, values)
    return float(np.sum(mesh.areas * np.sqrt(np.sum(g**2, axis=1) + eps)))


def element_gradients(mesh: Mesh, values) -> np.ndarray:
    v = values_of(values)[mesh.triangles]
    return np.einsum("ti,tid->td", v, mesh.barycentric_gradients)


def smooth_abs_integral(mesh: Mesh, values, eps: float) -> float:
    """``int sqrt(s^2 + eps)`` with the edge-midpoint rule on each triangle."""
    v = values_of(values)[mesh.triangles] @ _MIDPOINTS.T
    return float(np.sum(mesh.areas[:, None] / 3.0 * np.sqrt(v**2 + eps)))


def lumped_sq_norm(mesh: Mesh, values) -> float:
    v = values_of(values)
    return float(np.sum(fem.lumped_mass(mesh) * v * v))


def level_set_reg(mesh: Mesh, spc, params: RegParams) -> float:
    """Bracketed level-set part ``zeroth-order term + J_eps(sigma_pc)``."""
    if params.mass_term == "sqrt":
        zeroth = smooth_abs_integral(mesh, spc, params.eps_tv)
    else:
        zeroth = 0.5 * lumped_sq_norm(mesh, spc)
    return zeroth + tv_value(mesh, spc, params.eps_tv)


def relaxed_reg(mesh: Mesh, sigma_l2) -> float:
    """``|sigma_l2|^2`` in L2 (nodal quadrature)."""
    return lumped_sq_norm(mesh, sigma_l2)


def reg_value(state: ContinuationState, params: RegParams) -> float:
    lam = state.lam
    total = 0.0
    if lam > 0 and params.alpha > 0:
        total += lam * params.alpha * level_set_reg(state.mesh, state.sigma_pc, params)
    if lam < 1 and params.beta > 0:
        total += (1.0 - lam) * params.beta * relaxed_reg(state.mesh, state.sigma_l2)
    return total


# --------------------------------------------------------------------------
# gradients


def tv_derivative(mesh: Mesh, values, eps: float) -> np.ndarray:
    """Euclidean derivative of :func:`tv_value` in the nodal values."""
    g = element_gradients(mesh, values)
    w = 1.0 / np.sqrt(np.sum(g**2, axis=1) + eps)
    return fem.weighted_stiffness_matrix(mesh, w) @ values_of(values)


def grad_reg_sigma_pc(state: ContinuationState, params: RegParams) -> NodalField:
    """Representer of ``lam alpha [(grad s/sqrt(|grad s|^2+eps), grad h) + (s, h)]``.

    Tested against H^1_0 when ``params.zero_boundary`` (the default), so the
    result vanishes on the boundary.
    """
    mesh = state.mesh
    if state.lam == 0 or params.alpha == 0:
        return NodalField(mesh, np.zeros(mesh.n_nodes))
    spc = state.sigma_pc
    r = tv_derivative(mesh, spc, params.eps_tv) + fem.lumped_mass(mesh) * spc
    r *= state.lam * params.alpha
    return fem.h1_projection(mesh, r, use_zero_boundary=params.zero_boundary)


def grad_phi_total(state: ContinuationState, params: RegParams, grad_fid_sigma, grad_reg_pc=None) -> NodalField:
    """``(sigma1 - sigma2) delta_eps(phi) [lam grad_sigma F + grad_sigma_pc R]``."""
    if grad_reg_pc is None:
        grad_reg_pc = grad_reg_sigma_pc(state, params)
    chain = (params.sigma1 - params.sigma2) * delta_eps(state.phi, params.eps_heaviside)
    g = chain * (state.lam * values_of(grad_fid_sigma) + values_of(grad_reg_pc))
    return NodalField(state.mesh, g)


def grad_sigma_l2_total(state: ContinuationState, params: RegParams, grad_fid_sigma) -> NodalField:
    """``(1 - lam) grad_sigma F + 2 (1 - lam) beta sigma_l2``."""
    lam = state.lam
    g = (1.0 - lam) * values_of(grad_fid_sigma) + 2.0 * (1.0 - lam) * params.beta * state.sigma_l2
    return NodalField(state.mesh, g)


# --------------------------------------------------------------------------
# objective


@dataclass(eq=False)
class ObjectiveValue:
    total: float
    fidelity: float
    reg: float
    evaluation: FidelityEvaluation

    def __iter__(self):
        return iter((self.total, self.fidelity, self.reg))


def objective(
    state: ContinuationState,
    params: RegParams,
    measurements: MeasurementSet,
    plan: ExcitationPlan,
    model: ForwardModel,
    *,
    gradient: bool = False,
    evaluation: Optional[FidelityEvaluation] = None,
) -> ObjectiveValue:
    """``T = F(sigma) + R(sigma_pc, sigma_l2, lam)``; unpacks to (total, fidelity, reg)."""
    solution = evaluation.solution if evaluation is not None else None
    ev = model.evaluate(state.sigma, plan, measurements, solution=solution, gradient=gradient)
    reg = reg_value(state, params)
    return ObjectiveValue(ev.value + reg, ev.value, reg, ev)


@dataclass(eq=False)
class Gradients:
    sigma_l2: np.ndarray
    phi: np.ndarray
    fidelity_sigma: np.ndarray

    def norm2(self, mesh: Mesh) -> tuple[float, float]:
        m = fem.lumped_mass(mesh)
        return float(np.sum(m * self.sigma_l2**2)), float(np.sum(m * self.phi**2))


def total_gradients(state: ContinuationState, params: RegParams, grad_fid_sigma: np.ndarray) -> Gradients:
    """Gradients of the continuation functional in ``sigma_l2`` and ``phi``."""
    gl2 = grad_sigma_l2_total(state, params, grad_fid_sigma).values
    gphi = grad_phi_total(state, params, grad_fid_sigma).values
    return Gradients(gl2, gphi, np.asarray(grad_fid_sigma))


def with_params(params: RegParams, **kw) -> RegParams:
    return replace(params, **kw)
