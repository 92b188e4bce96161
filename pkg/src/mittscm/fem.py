"""Complex P1 finite elements for the eddy-current problem.

Systems have the form ``K / mu + i * omega * M(sigma)``, where ``K`` is the P1
stiffness matrix and ``M(sigma)`` the mass matrix weighted by the P1
interpolant of the nodal conductivity (exact cubic quadrature).  Both are
complex symmetric, so one sparse LU factorization serves the forward solves
and, through conjugation, the adjoint solves.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path
from typing import Optional, Union

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .mesh import Mesh

SOLVE_FALLBACK_RTOL = 1e-6
SOLVE_RTOL = 1e-10

# int_T l_i l_j l_k dx / |T| for P1 barycentric coordinates
_TRIPLE = np.empty((3, 3, 3))
for _i in range(3):
    for _j in range(3):
        for _k in range(3):
            _n = len({_i, _j, _k})
            _TRIPLE[_i, _j, _k] = {1: 1 / 10, 2: 1 / 30, 3: 1 / 60}[_n]
_PAIR = (np.ones((3, 3)) + np.eye(3)) / 12.0


class SolverError(RuntimeError):
    """A linear solve failed or did not reach the residual tolerance."""

    def __init__(self, message: str, residual: float = float("nan")):
        super().__init__(message)
        self.residual = residual


@dataclass(frozen=True, eq=False)
class NodalField:
    """One real or complex scalar per mesh node."""

    mesh: Mesh
    values: np.ndarray

    def __post_init__(self):
        vals = np.asarray(self.values)
        if not np.iscomplexobj(vals):
            vals = vals.astype(float, copy=False)
        if vals.shape != (self.mesh.n_nodes,):
            raise ValueError(f"field has shape {vals.shape}, mesh has {self.mesh.n_nodes} nodes")
        if not np.all(np.isfinite(vals)):
            raise ValueError("field contains NaN or Inf")
        object.__setattr__(self, "values", vals)

    @property
    def is_complex(self) -> bool:
        return np.iscomplexobj(self.values)


def values_of(x) -> np.ndarray:
    return x.values if isinstance(x, NodalField) else np.asarray(x)


# --------------------------------------------------------------------------
# element data and global patterns


class _Pattern:
    """Sparsity pattern of a mesh with a scatter map for element matrices."""

    def __init__(self, mesh: Mesh):
        t = mesh.triangles
        n = mesh.n_nodes
        rows = np.repeat(t, 3, axis=1).ravel()
        cols = np.tile(t, (1, 3)).ravel()
        probe = sp.csr_matrix(
            (np.arange(1, len(rows) + 1, dtype=float), (rows, cols)), shape=(n, n)
        )
        probe.sum_duplicates()
        self.indptr = probe.indptr
        self.indices = probe.indices
        # position of every local entry inside the CSR data array
        lookup = sp.csr_matrix(
            (np.arange(probe.nnz, dtype=float) + 1, probe.indices, probe.indptr), shape=(n, n)
        )
        self.scatter = np.asarray(lookup[rows, cols]).ravel().astype(np.int64) - 1
        self.nnz = probe.nnz
        self.n = n

    def build(self, local: np.ndarray) -> sp.csr_matrix:
        data = np.bincount(self.scatter, weights=local.real.ravel(), minlength=self.nnz)
        if np.iscomplexobj(local):
            data = data + 1j * np.bincount(self.scatter, weights=local.imag.ravel(), minlength=self.nnz)
        return sp.csr_matrix((data, self.indices.copy(), self.indptr.copy()), shape=(self.n, self.n))


@lru_cache(maxsize=32)
def _pattern(mesh: Mesh) -> _Pattern:
    return _Pattern(mesh)


def element_stiffness(mesh: Mesh) -> np.ndarray:
    """Local P1 stiffness matrices, shape (T, 3, 3)."""
    g = mesh.barycentric_gradients
    return mesh.areas[:, None, None] * np.einsum("tid,tjd->tij", g, g)


def element_mass(mesh: Mesh, sigma: Optional[np.ndarray] = None) -> np.ndarray:
    """Local mass matrices ``int sigma_h l_i l_j``, exact for P1 ``sigma``."""
    a = mesh.areas[:, None, None]
    if sigma is None:
        return a * _PAIR
    s = np.asarray(sigma)[mesh.triangles]
    return a * np.einsum("ijk,tk->tij", _TRIPLE, s)


@lru_cache(maxsize=32)
def stiffness_matrix(mesh: Mesh) -> sp.csr_matrix:
    return _pattern(mesh).build(element_stiffness(mesh))


@lru_cache(maxsize=32)
def mass_matrix(mesh: Mesh) -> sp.csr_matrix:
    return _pattern(mesh).build(element_mass(mesh))


def weighted_mass_matrix(mesh: Mesh, sigma) -> sp.csr_matrix:
    return _pattern(mesh).build(element_mass(mesh, values_of(sigma)))


def weighted_stiffness_matrix(mesh: Mesh, weights: np.ndarray) -> sp.csr_matrix:
    """Stiffness matrix with one constant weight per triangle."""
    return _pattern(mesh).build(weights[:, None, None] * element_stiffness(mesh))


@lru_cache(maxsize=32)
def lumped_mass(mesh: Mesh) -> np.ndarray:
    """Row sums of the mass matrix (a third of the node patch area)."""
    m = np.asarray(mass_matrix(mesh).sum(axis=1)).ravel()
    m.setflags(write=False)
    return m


def triple_product_gradient(mesh: Mesh, u: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Nodal vector ``d_k = sum_ij int l_k l_i l_j u_i v_j``.

    ``u`` and ``v`` may carry leading batch axes; they are summed over.
    This is the derivative of ``v^T M(sigma) u`` with respect to ``sigma_k``.
    """
    t = mesh.triangles
    ul = np.asarray(u)[..., t]
    vl = np.asarray(v)[..., t]
    local = np.einsum("kij,...ti,...tj->tk", _TRIPLE, vl, ul, optimize=True)
    local = local * mesh.areas[:, None]
    out = np.zeros(mesh.n_nodes, dtype=local.dtype)
    np.add.at(out, t.ravel(), local.ravel())
    return out


# --------------------------------------------------------------------------
# systems


@dataclass(eq=False)
class SparseSystem:
    """Complex-symmetric system matrix with one or more right-hand sides."""

    mesh: Mesh
    matrix: sp.csr_matrix
    rhs: np.ndarray
    omega: float = 0.0
    _lu: Optional[object] = field(default=None, repr=False)

    def factorization(self):
        if self._lu is None:
            try:
                self._lu = spla.splu(self.matrix.tocsc())
            except RuntimeError as exc:
                raise SolverError(f"factorization failed: {exc}") from exc
        return self._lu

    def with_rhs(self, rhs: np.ndarray) -> "SparseSystem":
        return SparseSystem(self.mesh, self.matrix, rhs, self.omega, self._lu)


def assemble_system(mesh: Mesh, mu_inv: float, omega: float, sigma) -> SparseSystem:
    """Assemble ``(mu_inv grad A, grad phi) + (i omega sigma A, phi)`` with zero RHS."""
    s = values_of(sigma)
    if s.shape != (mesh.n_nodes,):
        raise ValueError("sigma must have one value per node")
    if not np.all(s > 0):
        raise ValueError(f"conductivity must be positive, min is {s.min():g}")
    if omega <= 0 or mu_inv <= 0:
        raise ValueError("omega and mu_inv must be positive")
    local = mu_inv * element_stiffness(mesh) + 1j * omega * element_mass(mesh, s)
    mat = _pattern(mesh).build(local)
    return SparseSystem(mesh, mat, np.zeros(mesh.n_nodes, dtype=complex), omega)


def neumann_load(mesh: Mesh, arc_label: int, amplitude: float = 1.0) -> np.ndarray:
    """Load vector of ``<amplitude * chi_arc, phi>_Gamma`` (edge trapezoid rule)."""
    if not 0 <= arc_label < mesh.n_arcs:
        raise KeyError(f"unknown arc label {arc_label}")
    sel = mesh.arc_labels == arc_label
    half = 0.5 * amplitude * mesh.boundary_edge_lengths[sel]
    edges = mesh.boundary_edges[sel]
    load = np.zeros(mesh.n_nodes)
    np.add.at(load, edges[:, 0], half)
    np.add.at(load, edges[:, 1], half)
    return load


def apply_neumann_rhs(system: SparseSystem, arc_label: int, amplitude: float = 1.0) -> SparseSystem:
    load = neumann_load(system.mesh, arc_label, amplitude)
    rhs = system.rhs + (load if system.rhs.ndim == 1 else load[:, None])
    return system.with_rhs(rhs)


def solve(system: SparseSystem, conjugate: bool = False) -> np.ndarray:
    """Solve ``S x = rhs`` (or ``conj(S) x = rhs``) with the cached LU factors.

    Returns the raw value array; columns of a 2-D ``rhs`` are solved together.
    """
    rhs = np.asarray(system.rhs, dtype=complex)
    if not np.any(rhs):
        return np.zeros_like(rhs)
    lu = system.factorization()

    def lu_solve(b):
        return np.conj(lu.solve(np.conj(b))) if conjugate else lu.solve(b)

    mat = system.matrix.conj() if conjugate else system.matrix
    x = lu_solve(rhs)
    res = np.linalg.norm(mat @ x - rhs)
    for _ in range(3):
        # iterative refinement for badly scaled systems
        if not np.isfinite(res) or res <= SOLVE_RTOL * np.linalg.norm(rhs):
            break
        x = x + lu_solve(rhs - mat @ x)
        res = np.linalg.norm(mat @ x - rhs)
    # relative residual, relaxed to a normwise backward error when the
    # system is too ill-conditioned for the plain criterion in double precision
    # a (near) singular system has a tiny backward error but no usable residual
    tol = min(SOLVE_RTOL * (np.linalg.norm(rhs) + _norm1(mat) * np.linalg.norm(x)),
              SOLVE_FALLBACK_RTOL * np.linalg.norm(rhs))
    if not np.isfinite(res) or res > tol:
        raise SolverError(f"residual {res:.3e} exceeds tolerance {tol:.3e}", res)
    return x


def _norm1(mat) -> float:
    return float(abs(mat).sum(axis=0).max())


def solve_field(system: SparseSystem) -> NodalField:
    return NodalField(system.mesh, solve(system))


# --------------------------------------------------------------------------
# boundary traces


@dataclass(frozen=True, eq=False)
class BoundaryTrace:
    """Values at the boundary nodes in loop order, with trapezoid weights."""

    values: np.ndarray
    weights: np.ndarray

    def integral_abs2(self) -> float:
        return float(np.sum(self.weights * np.abs(self.values) ** 2))


def boundary_trace(field) -> BoundaryTrace:
    mesh = field.mesh
    return BoundaryTrace(np.asarray(field.values)[mesh.boundary_nodes], mesh.boundary_weights)


def boundary_l2_norm(mesh: Mesh, values: np.ndarray) -> float:
    return float(np.sqrt(np.sum(mesh.boundary_weights * np.abs(values) ** 2)))


# --------------------------------------------------------------------------
# projections and norms


def h1_projection(
    mesh: Mesh,
    rhs_functional: np.ndarray,
    use_zero_boundary: bool = True,
    bilinear: Union[str, sp.spmatrix] = "lumped",
) -> NodalField:
    """Riesz representer of a nodal functional.

    Solves ``B g = r`` for the Gram matrix ``B`` (lumped mass by default, the
    consistent mass matrix with ``"consistent"``, or any SPD sparse matrix).
    With ``use_zero_boundary`` the boundary rows are eliminated and ``g``
    vanishes on the boundary, i.e. ``r`` is only tested against H^1_0.
    """
    r = np.asarray(rhs_functional, dtype=float)
    if r.shape != (mesh.n_nodes,):
        raise ValueError("rhs must have one entry per node")
    free = ~mesh.is_boundary_node if use_zero_boundary else np.ones(mesh.n_nodes, dtype=bool)
    g = np.zeros(mesh.n_nodes)
    if isinstance(bilinear, str) and bilinear == "lumped":
        g[free] = r[free] / lumped_mass(mesh)[free]
    else:
        B = mass_matrix(mesh) if isinstance(bilinear, str) else sp.csr_matrix(bilinear)
        if isinstance(bilinear, str) and bilinear != "consistent":
            raise ValueError(f"unknown bilinear form {bilinear!r}")
        Bf = B[free][:, free].tocsc()
        try:
            g[free] = spla.spsolve(Bf, r[free])
        except RuntimeError as exc:
            raise SolverError(f"projection solve failed: {exc}") from exc
        if not np.all(np.isfinite(g)):
            raise SolverError("projection system is singular")
    return NodalField(mesh, g)


def l2_norm(mesh: Mesh, values, lumped: bool = False) -> float:
    v = values_of(values)
    if lumped:
        return float(np.sqrt(np.sum(lumped_mass(mesh) * np.abs(v) ** 2)))
    return float(np.sqrt(np.real(np.vdot(v, mass_matrix(mesh) @ v))))


def l2_inner(mesh: Mesh, u, v, lumped: bool = True) -> float:
    """Real L2 inner product of nodal fields (lumped by default)."""
    u, v = values_of(u), values_of(v)
    if lumped:
        return float(np.sum(lumped_mass(mesh) * u * v))
    return float(u @ (mass_matrix(mesh) @ v))


# --------------------------------------------------------------------------
# point evaluation

# degree-5, 7-point rule on the reference triangle: (l1, l2, weight)
_a1, _b1 = 0.059715871789770, 0.470142064105115
_a2, _b2 = 0.797426985353087, 0.101286507323456
DUNAVANT5 = np.array(
    [
        [1 / 3, 1 / 3, 1 / 3, 0.225],
        [_a1, _b1, _b1, 0.132394152788506],
        [_b1, _a1, _b1, 0.132394152788506],
        [_b1, _b1, _a1, 0.132394152788506],
        [_a2, _b2, _b2, 0.125939180544827],
        [_b2, _a2, _b2, 0.125939180544827],
        [_b2, _b2, _a2, 0.125939180544827],
    ]
)


def quadrature_points(mesh: Mesh):
    """Physical points (T, 7, 2), barycentric weights (7, 3) and weights (T, 7)."""
    bary = DUNAVANT5[:, :3]
    p = mesh.nodes[mesh.triangles]
    pts = np.einsum("qi,tid->tqd", bary, p)
    w = mesh.areas[:, None] * DUNAVANT5[None, :, 3]
    return pts, bary, w


def interpolate(mesh: Mesh, values, points: np.ndarray) -> np.ndarray:
    """Evaluate the P1 interpolant at arbitrary points inside the mesh."""
    v = values_of(values)
    pts = np.atleast_2d(points)
    p = mesh.nodes[mesh.triangles]
    out = np.empty(len(pts), dtype=v.dtype)
    # barycentric coordinates through the constant hat-function gradients
    g = mesh.barycentric_gradients
    for n, x in enumerate(pts):
        lam = np.einsum("tid,td->ti", g, x[None, :] - p[:, 0])
        lam[:, 0] = 1.0 - lam[:, 1] - lam[:, 2]
        t = int(np.argmax(lam.min(axis=1)))
        if lam[t].min() < -1e-9:
            raise ValueError(f"point {x} lies outside the mesh")
        out[n] = lam[t] @ v[mesh.triangles[t]]
    return out


# --------------------------------------------------------------------------
# field dumps


def write_field(field: NodalField, path: Union[str, Path]) -> None:
    """One line per node: ``x y value`` (real) or ``x y re im`` (complex)."""
    xy = field.mesh.nodes
    if field.is_complex:
        lines = [f"{x!r} {y!r} {v.real!r} {v.imag!r}" for (x, y), v in zip(xy.tolist(), field.values.tolist())]
    else:
        lines = [f"{x!r} {y!r} {v!r}" for (x, y), v in zip(xy.tolist(), field.values.tolist())]
    Path(path).write_text("\n".join(lines) + "\n")


def read_field(mesh: Mesh, path: Union[str, Path]) -> NodalField:
    lines = Path(path).read_text().splitlines()
    if len(lines) != mesh.n_nodes:
        raise ValueError(f"{path}:{len(lines)}: expected {mesh.n_nodes} lines, found {len(lines)}")
    cols = [ln.split() for ln in lines]
    width = len(cols[0])
    for i, c in enumerate(cols, start=1):
        if len(c) != width:
            raise ValueError(f"{path}:{i}: expected {width} columns")
    arr = np.array(cols, dtype=float)
    vals = arr[:, 2] + 1j * arr[:, 3] if width == 4 else arr[:, 2]
    return NodalField(mesh, vals)
