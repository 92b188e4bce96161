"""Triangular meshes of the disk-shaped imaging domain and inclusion phantoms.

The generator places nodes on concentric rings whose node counts are all
multiples of the number of coil arcs, and stitches neighbouring rings with an
integer-arithmetic zipper.  The resulting triangulation is invariant under a
rotation by one coil arc, which the symmetry checks of the forward solver rely
on.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Sequence, Union

import numpy as np


class MeshError(ValueError):
    """Raised for invalid mesh parameters or malformed mesh files."""


@dataclass(frozen=True, eq=False)
class Mesh:
    """P1 triangulation with a labelled, ordered boundary loop.

    Parameters
    ----------
    nodes : (N, 2) float array
        Node coordinates in meters.
    triangles : (T, 3) int array
        Counterclockwise node triples.
    boundary_edges : (B, 2) int array
        Boundary edges ``(b_k, b_{k+1})`` ordered along the counterclockwise
        boundary loop.
    arc_labels : (B,) int array
        Coil arc label of every boundary edge, in ``0..n_arcs-1``.
    """

    nodes: np.ndarray
    triangles: np.ndarray
    boundary_edges: np.ndarray
    arc_labels: np.ndarray
    radius: float = field(default=float("nan"))

    def __post_init__(self):
        nodes = np.ascontiguousarray(self.nodes, dtype=float)
        tris = np.ascontiguousarray(self.triangles, dtype=np.int64)
        bedges = np.ascontiguousarray(self.boundary_edges, dtype=np.int64)
        arcs = np.ascontiguousarray(self.arc_labels, dtype=np.int64)
        for arr in (nodes, tris, bedges, arcs):
            arr.setflags(write=False)
        object.__setattr__(self, "nodes", nodes)
        object.__setattr__(self, "triangles", tris)
        object.__setattr__(self, "boundary_edges", bedges)
        object.__setattr__(self, "arc_labels", arcs)
        if math.isnan(self.radius):
            object.__setattr__(
                self, "radius", float(np.max(np.hypot(*nodes[self.boundary_nodes].T)))
            )

    @property
    def n_nodes(self) -> int:
        return len(self.nodes)

    @property
    def n_triangles(self) -> int:
        return len(self.triangles)

    @property
    def n_arcs(self) -> int:
        return int(self.arc_labels.max()) + 1

    @cached_property
    def signed_areas(self) -> np.ndarray:
        p = self.nodes[self.triangles]
        e1 = p[:, 1] - p[:, 0]
        e2 = p[:, 2] - p[:, 0]
        return 0.5 * (e1[:, 0] * e2[:, 1] - e1[:, 1] * e2[:, 0])

    @property
    def areas(self) -> np.ndarray:
        return self.signed_areas

    @cached_property
    def area(self) -> float:
        return float(self.areas.sum())

    @cached_property
    def barycentric_gradients(self) -> np.ndarray:
        """Constant gradients of the three P1 hat functions, shape (T, 3, 2)."""
        p = self.nodes[self.triangles]
        # grad(lambda_i) = rot90(p_k - p_j) / (2|T|) for (i, j, k) cyclic
        d = np.roll(p, -2, axis=1) - np.roll(p, -1, axis=1)
        grads = np.stack([-d[..., 1], d[..., 0]], axis=-1)
        return grads / (2.0 * self.signed_areas)[:, None, None]

    @cached_property
    def edges(self) -> np.ndarray:
        """Unique undirected edges, sorted node pairs."""
        t = self.triangles
        e = np.concatenate([t[:, [0, 1]], t[:, [1, 2]], t[:, [2, 0]]])
        return np.unique(np.sort(e, axis=1), axis=0)

    @cached_property
    def h(self) -> float:
        """Maximum edge length over all triangles."""
        d = self.nodes[self.edges[:, 0]] - self.nodes[self.edges[:, 1]]
        return float(np.max(np.hypot(d[:, 0], d[:, 1])))

    @cached_property
    def boundary_nodes(self) -> np.ndarray:
        """Boundary nodes in loop order; node k starts boundary edge k."""
        return self.boundary_edges[:, 0].copy()

    @cached_property
    def boundary_edge_lengths(self) -> np.ndarray:
        d = self.nodes[self.boundary_edges[:, 1]] - self.nodes[self.boundary_edges[:, 0]]
        return np.hypot(d[:, 0], d[:, 1])

    @cached_property
    def boundary_weights(self) -> np.ndarray:
        """Trapezoid weights of the boundary nodes (loop order)."""
        L = self.boundary_edge_lengths
        return 0.5 * (L + np.roll(L, 1))

    @cached_property
    def perimeter(self) -> float:
        return float(self.boundary_edge_lengths.sum())

    @cached_property
    def boundary_angles(self) -> np.ndarray:
        p = self.nodes[self.boundary_nodes]
        return np.mod(np.arctan2(p[:, 1], p[:, 0]), 2 * np.pi)

    @cached_property
    def is_boundary_node(self) -> np.ndarray:
        mask = np.zeros(self.n_nodes, dtype=bool)
        mask[self.boundary_nodes] = True
        return mask

    def arc_length(self, label: int) -> float:
        return float(self.boundary_edge_lengths[self.arc_labels == label].sum())

    def check(self) -> None:
        """Validate the structural invariants; raises :class:`MeshError`."""
        if np.any(self.signed_areas <= 0):
            raise MeshError("mesh has triangles with non-positive signed area")
        b = self.boundary_edges
        if not np.array_equal(b[:, 1], np.roll(b[:, 0], -1)):
            raise MeshError("boundary edges do not form an ordered closed loop")
        if len(np.unique(b[:, 0])) != len(b):
            raise MeshError("boundary loop visits a node twice")
        # boundary edges of the triangulation are exactly the edges used once
        t = self.triangles
        e = np.sort(np.concatenate([t[:, [0, 1]], t[:, [1, 2]], t[:, [2, 0]]]), axis=1)
        uniq, counts = np.unique(e, axis=0, return_counts=True)
        free = {tuple(x) for x in uniq[counts == 1]}
        if free != {tuple(x) for x in np.sort(b, axis=1)}:
            raise MeshError("boundary edges do not cover the triangulation boundary")
        labels = self.arc_labels
        changes = int(np.count_nonzero(labels != np.roll(labels, 1)))
        n_arcs = len(np.unique(labels))
        if n_arcs != self.n_arcs or (n_arcs > 1 and changes != n_arcs):
            raise MeshError("arc labels are not contiguous non-empty arcs")

    def rotation_permutation(self, shift: int) -> np.ndarray:
        """Node permutation ``perm`` with ``nodes[perm[i]] = R nodes[i]``.

        ``R`` rotates by ``shift`` coil arcs counterclockwise.  Only defined on
        meshes generated symmetric by :func:`build_disk_mesh`.
        """
        theta = 2 * np.pi * shift / self.n_arcs
        c, s = math.cos(theta), math.sin(theta)
        rotated = self.nodes @ np.array([[c, s], [-s, c]])
        scale = max(self.h, 1e-300)
        key = lambda p: np.round(p / (1e-6 * scale)).astype(np.int64)  # noqa: E731
        lookup = {tuple(k): i for i, k in enumerate(key(self.nodes))}
        try:
            return np.array([lookup[tuple(k)] for k in key(rotated)], dtype=np.int64)
        except KeyError as exc:
            raise MeshError("mesh is not symmetric under the requested rotation") from exc


def _zip_rings(inner: np.ndarray, outer: np.ndarray) -> list[tuple[int, int, int]]:
    """Triangulate the annulus between two closed rings of node indices.

    Both rings start at angle zero with equally spaced nodes.  Fractions are
    compared with integer cross-multiplication so the pattern repeats exactly
    in every rotational sector.
    """
    p, q = len(inner), len(outer)
    tris = []
    i = j = 0
    while i < p or j < q:
        advance_inner = j == q or (i < p and (i + 1) * q < (j + 1) * p)
        if advance_inner:
            tris.append((inner[i % p], outer[j % q], inner[(i + 1) % p]))
            i += 1
        else:
            tris.append((inner[i % p], outer[j % q], outer[(j + 1) % q]))
            j += 1
    return tris


def build_disk_mesh(
    radius: float = 1.0,
    target_h: float = 0.1,
    n_arcs: int = 28,
    boundary_nodes: int | None = None,
) -> Mesh:
    """Ring-structured triangulation of the disk ``|x| < radius``.

    Parameters
    ----------
    radius : float
        Disk radius.
    target_h : float
        Target edge length; the realised ``mesh.h`` stays below ``1.5 * target_h``.
    n_arcs : int
        Number of equal boundary arcs (coils).  Every ring carries a multiple of
        ``n_arcs`` nodes, so the mesh is invariant under rotation by one arc.
    boundary_nodes : int, optional
        Force the number of boundary nodes (must be a multiple of ``n_arcs``).
    """
    if radius <= 0:
        raise MeshError("radius must be positive")
    if not 0 < target_h < radius:
        raise MeshError("target_h must satisfy 0 < target_h < radius")
    if n_arcs < 1:
        raise MeshError("n_arcs must be >= 1")
    natural = math.ceil(2 * math.pi * radius / target_h)
    if natural < n_arcs:
        raise MeshError(
            f"target_h={target_h} gives {natural} boundary nodes, fewer than n_arcs={n_arcs}"
        )
    n_rings = math.ceil(radius / target_h)
    counts = []
    for k in range(1, n_rings + 1):
        # size ring k by the next radius: edges to ring k+1 then span at most
        # one angular step measured on the outer ring, keeping h <= sqrt(2) target_h
        r = radius * min(k + 1, n_rings) / n_rings
        counts.append(n_arcs * math.ceil(2 * math.pi * r / (target_h * n_arcs)))
    if boundary_nodes is not None:
        if boundary_nodes % n_arcs or boundary_nodes < counts[-1]:
            raise MeshError("boundary_nodes must be a multiple of n_arcs and not coarser")
        counts[-1] = boundary_nodes
    for k in range(len(counts) - 2, -1, -1):
        counts[k] = min(counts[k], counts[k + 1])

    pts = [np.zeros((1, 2))]
    rings = []
    start = 1
    for k, n in enumerate(counts, start=1):
        r = radius * k / n_rings
        theta = 2 * np.pi * np.arange(n) / n
        pts.append(np.column_stack([r * np.cos(theta), r * np.sin(theta)]))
        rings.append(np.arange(start, start + n))
        start += n
    nodes = np.concatenate(pts)

    tris = [(0, rings[0][j], rings[0][(j + 1) % len(rings[0])]) for j in range(len(rings[0]))]
    for a, b in zip(rings[:-1], rings[1:]):
        tris.extend(_zip_rings(a, b))
    tris = np.array(tris, dtype=np.int64)

    outer = rings[-1]
    nb = len(outer)
    bedges = np.column_stack([outer, np.roll(outer, -1)])
    arcs = (np.arange(nb) * n_arcs) // nb
    mesh = Mesh(nodes, tris, bedges, arcs, radius=float(radius))
    mesh.check()
    return mesh


def read_mesh(path: Union[str, Path]) -> Mesh:
    """Read the plain-text mesh format (``nodes N triangles T bedges B`` header)."""
    lines = Path(path).read_text().splitlines()
    if not lines:
        raise MeshError(f"{path}: empty mesh file")
    head = lines[0].split()
    try:
        if head[0::2] != ["nodes", "triangles", "bedges"]:
            raise ValueError
        n, t, b = (int(x) for x in head[1::2])
    except (ValueError, IndexError) as exc:
        raise MeshError(f"{path}:1: bad header {lines[0]!r}") from exc
    if len(lines) < 1 + n + t + b:
        raise MeshError(f"{path}:{len(lines)}: truncated, expected {1 + n + t + b} lines")
    body = [ln.split() for ln in lines[1 : 1 + n + t + b]]
    nodes = np.array(body[:n], dtype=float).reshape(n, 2)
    tris = np.array(body[n : n + t], dtype=np.int64).reshape(t, 3)
    be = np.array(body[n + t :], dtype=np.int64).reshape(b, 3)
    edges, labels = _order_boundary(be[:, :2], be[:, 2])
    mesh = Mesh(nodes, tris, edges, labels)
    mesh.check()
    return mesh


def _order_boundary(edges: np.ndarray, labels: np.ndarray):
    """Chain unordered boundary edges into a counterclockwise loop."""
    nxt = {int(a): (int(b), int(lab)) for (a, b), lab in zip(edges, labels)}
    start = int(edges[0, 0])
    order = []
    node = start
    for _ in range(len(edges)):
        b, lab = nxt[node]
        order.append((node, b, lab))
        node = b
        if node == start:
            break
    if len(order) != len(edges) or node != start:
        raise MeshError("boundary edges do not form a single closed loop")
    arr = np.array(order, dtype=np.int64)
    # rotate the loop so that it begins at the first edge of an arc
    shift = 0
    if len(np.unique(arr[:, 2])) > 1:
        shift = int(np.flatnonzero(arr[:, 2] != np.roll(arr[:, 2], 1))[0])
    arr = np.roll(arr, -shift, axis=0)
    return arr[:, :2], arr[:, 2]


def write_mesh(mesh: Mesh, path: Union[str, Path]) -> None:
    out = [f"nodes {mesh.n_nodes} triangles {mesh.n_triangles} bedges {len(mesh.boundary_edges)}"]
    out += [f"{x!r} {y!r}" for x, y in mesh.nodes.tolist()]
    out += ["{} {} {}".format(*t) for t in mesh.triangles.tolist()]
    out += [f"{a} {b} {lab}" for (a, b), lab in zip(mesh.boundary_edges.tolist(), mesh.arc_labels.tolist())]
    Path(path).write_text("\n".join(out) + "\n")


# --------------------------------------------------------------------------
# phantoms


@dataclass(frozen=True)
class Disk:
    center: tuple[float, float]
    radius: float

    def distance(self, pts: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Return (inside mask, unsigned distance to the circle)."""
        d = np.hypot(pts[:, 0] - self.center[0], pts[:, 1] - self.center[1])
        return d < self.radius, np.abs(d - self.radius)

    @property
    def area(self) -> float:
        return math.pi * self.radius**2

    @property
    def perimeter(self) -> float:
        return 2 * math.pi * self.radius

    @property
    def extent(self) -> float:
        return math.hypot(*self.center) + self.radius


@dataclass(frozen=True)
class Annulus:
    center: tuple[float, float]
    inner_radius: float
    outer_radius: float

    def distance(self, pts: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        d = np.hypot(pts[:, 0] - self.center[0], pts[:, 1] - self.center[1])
        inside = (d > self.inner_radius) & (d < self.outer_radius)
        dist = np.minimum(np.abs(d - self.inner_radius), np.abs(d - self.outer_radius))
        return inside, dist

    @property
    def area(self) -> float:
        return math.pi * (self.outer_radius**2 - self.inner_radius**2)

    @property
    def perimeter(self) -> float:
        return 2 * math.pi * (self.outer_radius + self.inner_radius)

    @property
    def extent(self) -> float:
        return math.hypot(*self.center) + self.outer_radius


Primitive = Union[Disk, Annulus]


@dataclass(frozen=True)
class PhantomSpec:
    """Two-phase conductivity: ``sigma1`` inside the inclusions, ``sigma2`` outside."""

    inclusions: tuple[Primitive, ...] = ()
    sigma1: float = 20.0
    sigma2: float = 2.0

    def __post_init__(self):
        object.__setattr__(self, "inclusions", tuple(self.inclusions))
        if self.sigma1 == self.sigma2:
            raise ValueError("sigma1 and sigma2 must differ")
        if min(self.sigma1, self.sigma2) <= 0:
            raise ValueError("conductivities must be positive")

    def validate(self, domain_radius: float) -> None:
        for inc in self.inclusions:
            if inc.extent >= domain_radius:
                raise ValueError(f"{inc} does not lie strictly inside the domain")

    @property
    def inclusion_area(self) -> float:
        """Total area, assuming the primitives do not overlap."""
        return sum(inc.area for inc in self.inclusions)

    def rotated(self, angle: float) -> "PhantomSpec":
        c, s = math.cos(angle), math.sin(angle)

        def rot(p):
            return (c * p[0] - s * p[1], s * p[0] + c * p[1])

        incs = []
        for inc in self.inclusions:
            if isinstance(inc, Disk):
                incs.append(Disk(rot(inc.center), inc.radius))
            else:
                incs.append(Annulus(rot(inc.center), inc.inner_radius, inc.outer_radius))
        return PhantomSpec(tuple(incs), self.sigma1, self.sigma2)


def inside_mask(points: np.ndarray, phantom: PhantomSpec) -> np.ndarray:
    mask = np.zeros(len(points), dtype=bool)
    for inc in phantom.inclusions:
        mask |= inc.distance(points)[0]
    return mask


def indicator_field(mesh: Mesh, phantom: PhantomSpec):
    """Nodal conductivity ``sigma1`` inside the inclusions and ``sigma2`` elsewhere."""
    from .fem import NodalField

    phantom.validate(mesh.radius)
    inside = inside_mask(mesh.nodes, phantom)
    return NodalField(mesh, np.where(inside, phantom.sigma1, phantom.sigma2))


def signed_distance_values(points: np.ndarray, primitives: Sequence[Primitive], empty: float) -> np.ndarray:
    if not primitives:
        return np.full(len(points), float(empty))
    inside = np.zeros(len(points), dtype=bool)
    dist_in = np.zeros(len(points))
    dist_out = np.full(len(points), np.inf)
    for inc in primitives:
        ins, d = inc.distance(points)
        inside |= ins
        dist_in = np.where(ins, np.maximum(dist_in, d), dist_in)
        dist_out = np.minimum(dist_out, d)
    return np.where(inside, dist_in, -dist_out)


def signed_distance_field(mesh: Mesh, phantom: PhantomSpec):
    """Level set: distance to the inclusion boundary, positive inside.

    Inside overlapping primitives the largest per-primitive distance is used.
    An empty phantom yields the constant ``-mesh.radius``.
    """
    from .fem import NodalField

    phantom.validate(mesh.radius)
    vals = signed_distance_values(mesh.nodes, phantom.inclusions, -mesh.radius)
    return NodalField(mesh, vals)
