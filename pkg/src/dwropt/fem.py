"""Bilinear (Q1) finite elements on structured rectangular grids.

Element integrals of basis-function products are exact (the 2x2 Gauss rule is
exact for every polynomial appearing here).  Variable diffusion tensors are
sampled once per cell or micro subcell (midpoint); advection fields are
sampled at the 2x2 Gauss points.  Every bilinear form in the package is
evaluated through the element machinery in this module, which is what makes
the discrete error identity hold to solver precision.

The advection form is assembled in cellwise skew-symmetrized fashion,
0.5 * [(b . grad u, v) - (b . grad v, u)].  For divergence-free fields that
vanish on the boundary the two variants coincide; the skew form realizes the
adjoint structure of the transport operator exactly at the discrete level.
"""

from __future__ import annotations

from dataclasses import dataclass, field as dc_field
from functools import lru_cache

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import splu

from .errors import ConfigurationError, OutOfDomainError, SingularOperatorError
from .field import CellAveragedAdvection
from .mesh import SIDES

# 1-d exact integrals of the hat functions N0 = 1 - t, N1 = t on [0, 1]
_M1 = np.array([[2.0, 1.0], [1.0, 2.0]]) / 6.0       # int N_i N_j
_S1 = np.array([[1.0, -1.0], [-1.0, 1.0]])           # int N_i' N_j'
_G1 = np.array([[-0.5, -0.5], [0.5, 0.5]])           # int N_i' N_j

_GP = (0.5 - 0.5 / np.sqrt(3.0), 0.5 + 0.5 / np.sqrt(3.0))


def _pack(x_part, y_part):
    """Tensor-product 4x4 block: out[p, q] with p = a + 2b, q = c + 2d."""
    return np.einsum("ac,bd->badc", x_part, y_part).reshape(4, 4)


@lru_cache(maxsize=64)
def q1_blocks(hx, hy):
    """Exact element blocks on an hx x hy rectangle.

    ``k[a, b]`` is the 4x4 matrix of int d_a(phi_p) d_b(phi_q); ``mass`` the
    mass matrix.  Node order: lower-left, lower-right, upper-left, upper-right.
    """
    k = np.empty((2, 2, 4, 4))
    k[0, 0] = (hy / hx) * _pack(_S1, _M1)
    k[1, 1] = (hx / hy) * _pack(_M1, _S1)
    k[0, 1] = np.einsum("ac,db->badc", _G1, _G1).reshape(4, 4)
    k[1, 0] = k[0, 1].T
    mass = hx * hy * _pack(_M1, _M1)
    return k, mass


def _shape_values(u, v):
    n_u = np.array([1.0 - u, u])
    n_v = np.array([1.0 - v, v])
    d_u = np.array([-1.0, 1.0])
    phi = np.array([n_u[a] * n_v[b] for b in range(2) for a in range(2)])
    dphi = np.array(
        [[d_u[a] * n_v[b], n_u[a] * d_u[b]] for b in range(2) for a in range(2)]
    )
    return phi, dphi


@lru_cache(maxsize=64)
def _gauss_tables(sub_x, sub_y):
    """Unit-coordinate Gauss data for an element split into sub_x x sub_y
    subcells with a 2x2 rule per subcell.

    Returns (points, weights, phi, dphi) with shapes (n, 2), (n,), (n, 4) and
    (n, 4, 2); weights sum to 1.
    """
    pts, phis, dphis = [], [], []
    for j in range(sub_y):
        for i in range(sub_x):
            for gv in _GP:
                for gu in _GP:
                    u = (i + gu) / sub_x
                    v = (j + gv) / sub_y
                    pts.append((u, v))
                    phi, dphi = _shape_values(u, v)
                    phis.append(phi)
                    dphis.append(dphi)
    n = len(pts)
    w = np.full(n, 1.0 / n)
    return np.array(pts), w, np.array(phis), np.array(dphis)


@lru_cache(maxsize=64)
def _subcell_diffusion_blocks(hx, hy, sub_x, sub_y):
    """Per-subcell analog of :func:`q1_blocks`: shape (nsub, 2, 2, 4, 4)."""
    _, _, _, dphi = _gauss_tables(sub_x, sub_y)
    n = dphi.shape[0]
    scale = np.array([[hy / hx, 1.0], [1.0, hx / hy]])
    blocks = np.empty((sub_x * sub_y, 2, 2, 4, 4))
    per_point = np.einsum("qpa,qmb->qabpm", dphi, dphi) / n * 4.0
    grouped = per_point.reshape(sub_x * sub_y, 4, 2, 2, 4, 4).sum(axis=1) / 4.0
    blocks[:] = grouped * scale[None, :, :, None, None]
    return blocks


@dataclass(frozen=True)
class Functional:
    """Quantity-of-interest functional.

    Kinds: ``domain_integral`` (integral of the solution), ``point_value``
    (evaluation at a point), ``boundary_integral`` (integral over a marked
    boundary part), ``neumann_flux`` (flux datum usable as right-hand-side
    boundary data).
    """

    kind: str
    point: tuple = None
    marker: str = None
    value: float = 1.0

    @classmethod
    def domain_integral(cls):
        return cls("domain_integral")

    @classmethod
    def point_value(cls, x0):
        return cls("point_value", point=(float(x0[0]), float(x0[1])))

    @classmethod
    def boundary_integral(cls, marker):
        return cls("boundary_integral", marker=marker)

    @classmethod
    def neumann_flux(cls, marker, value):
        return cls("neumann_flux", marker=marker, value=float(value))


class FeSpace:
    """Q1 space on a grid, with Dirichlet nodes derived from boundary markers.

    Grid boundary nodes that do not lie on the domain boundary (patch cuts)
    are always constrained to zero; nodes on the domain boundary are
    constrained when their marker is listed in ``dirichlet_markers``.
    """

    def __init__(self, grid, domain, dirichlet_markers=()):
        self.grid = grid
        self.domain = domain
        self.dirichlet_markers = frozenset(dirichlet_markers)
        self._classify()

    @property
    def n_dofs(self):
        return self.grid.n_nodes

    def _domain_side_of(self, grid_side):
        """Domain side name if the given grid side lies on the domain
        boundary, else None."""
        tol = 1e-9 * max(self.domain.extent)
        bb = self.grid.bbox
        coord = {"left": bb[0], "right": bb[2], "bottom": bb[1], "top": bb[3]}[grid_side]
        target = {
            "left": self.domain.xmin,
            "right": self.domain.xmax,
            "bottom": self.domain.ymin,
            "top": self.domain.ymax,
        }[grid_side]
        return grid_side if abs(coord - target) <= tol else None

    def _classify(self):
        g = self.grid
        nx, ny = g.nx, g.ny
        coords = g.node_coords
        ix = np.arange(g.n_nodes) % (nx + 1)
        iy = np.arange(g.n_nodes) // (nx + 1)
        constrained = np.zeros(g.n_nodes, dtype=bool)
        side_tests = {
            "left": ix == 0,
            "right": ix == nx,
            "bottom": iy == 0,
            "top": iy == ny,
        }
        for side, on_side in side_tests.items():
            if not np.any(on_side):
                continue
            dom_side = self._domain_side_of(side)
            if dom_side is None:
                constrained |= on_side  # interior patch cut
                continue
            axis = 1 if side in ("left", "right") else 0
            idx = np.nonzero(on_side)[0]
            for node in idx:
                markers = self.domain.markers_at(dom_side, coords[node, axis])
                if any(m in self.dirichlet_markers for m in markers):
                    constrained[node] = True
        self.dirichlet_nodes = np.nonzero(constrained)[0]
        self.free_nodes = np.nonzero(~constrained)[0]

    def marked_boundary_edges(self, marker):
        """Boundary edges carrying ``marker``: (m, 2) node pairs and lengths.

        Edges are classified by their midpoint coordinate along the side.  A
        marker that exists on the domain but does not touch this space's grid
        (a patch restriction) yields an empty match.
        """
        if marker not in self.domain.markers():
            raise ConfigurationError(f"unknown boundary marker '{marker}'")
        g = self.grid
        pairs, lengths = [], []
        for side in SIDES:
            dom_side = self._domain_side_of(side)
            if dom_side is None:
                continue
            if side in ("left", "right"):
                i = 0 if side == "left" else g.nx
                ids = np.arange(g.ny + 1) * (g.nx + 1) + i
                h = g.spacing[1]
                base = g.origin[1]
            else:
                j = 0 if side == "bottom" else g.ny
                ids = j * (g.nx + 1) + np.arange(g.nx + 1)
                h = g.spacing[0]
                base = g.origin[0]
            for e in range(len(ids) - 1):
                mid = base + (e + 0.5) * h
                if self.domain.marker_of(dom_side, mid) == marker:
                    pairs.append((ids[e], ids[e + 1]))
                    lengths.append(h)
        if not pairs:
            return np.zeros((0, 2), dtype=int), np.zeros(0)
        return np.array(pairs, dtype=int), np.array(lengths)


@dataclass
class DiscreteField:
    """Nodal coefficient vector on a finite-element space."""

    space: FeSpace
    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if self.values.shape != (self.space.n_dofs,):
            raise ConfigurationError(
                f"coefficient length {self.values.shape} does not match dof count {self.space.n_dofs}"
            )

    def to_csv(self, path):
        coords = self.space.grid.node_coords
        with open(path, "w", newline="\n") as fh:
            fh.write("x,y,value\n")
            for (x, y), v in zip(coords, self.values):
                fh.write(f"{x:.17g},{y:.17g},{v:.17g}\n")

    def to_vtk(self, path):
        g = self.space.grid
        with open(path, "w", newline="\n") as fh:
            fh.write("# vtk DataFile Version 3.0\n")
            fh.write("dwropt nodal field\n")
            fh.write("ASCII\nDATASET STRUCTURED_POINTS\n")
            fh.write(f"DIMENSIONS {g.nx + 1} {g.ny + 1} 1\n")
            fh.write(f"ORIGIN {g.origin[0]:.17g} {g.origin[1]:.17g} 0\n")
            fh.write(f"SPACING {g.spacing[0]:.17g} {g.spacing[1]:.17g} 1\n")
            fh.write(f"POINT_DATA {g.n_nodes}\n")
            fh.write("SCALARS value double 1\nLOOKUP_TABLE default\n")
            for v in self.values:
                fh.write(f"{v:.17g}\n")


class SparseOperator:
    """Square sparse operator with a cached LU factorization of its
    Dirichlet-constrained block.

    The factorization is computed on first use and reused by every primal,
    dual (transposed) and response solve against the same operator.
    """

    def __init__(self, matrix, space, symmetric):
        self.matrix = sp.csr_matrix(matrix)
        self.space = space
        self.symmetric = symmetric
        self.factorization_count = 0
        self._lu = None

    @property
    def shape(self):
        return self.matrix.shape

    def _factorize(self):
        if self._lu is None:
            free = self.space.free_nodes
            a_ff = self.matrix[free][:, free].tocsc()
            try:
                self._lu = splu(a_ff)
            except Exception as exc:  # scipy raises bare RuntimeError
                raise SingularOperatorError(
                    f"factorization of the {a_ff.shape[0]}-dof constrained system failed: {exc}"
                ) from exc
            self.factorization_count += 1
        return self._lu

    def solve_constrained(self, rhs, transpose=False, boundary_values=0.0):
        rhs = np.asarray(rhs, dtype=float)
        if rhs.shape != (self.space.n_dofs,):
            raise ConfigurationError(
                f"rhs length {rhs.shape} does not match dof count {self.space.n_dofs}"
            )
        free = self.space.free_nodes
        diri = self.space.dirichlet_nodes
        x = np.zeros(self.space.n_dofs)
        x[diri] = boundary_values
        b = rhs[free]
        if len(diri) and np.any(x[diri]):
            if transpose:
                raise ConfigurationError("transposed solves support homogeneous Dirichlet data only")
            b = b - self.matrix[free][:, diri] @ x[diri]
        lu = self._factorize()
        x[free] = lu.solve(b, trans="T" if transpose else "N")
        return x


# ---------------------------------------------------------------------------
# assembly


def _scatter(grid, elem, n_nodes):
    cn = grid.cell_nodes
    rows = np.repeat(cn, 4, axis=1).ravel()
    cols = np.tile(cn, (1, 4)).ravel()
    return sp.coo_matrix((elem.ravel(), (rows, cols)), shape=(n_nodes, n_nodes)).tocsr()


def _subdivisions(grid, micro_size):
    if micro_size is None:
        return 1, 1
    sx = max(1, int(round(grid.spacing[0] / micro_size)))
    sy = max(1, int(round(grid.spacing[1] / micro_size)))
    return sx, sy


def _subcell_centers(grid, sx, sy):
    """Centers of the sx x sy subcells of every cell: (ncells, nsub, 2)."""
    hx, hy = grid.spacing
    off_x = (np.arange(sx) + 0.5) * hx / sx - 0.5 * hx
    off_y = (np.arange(sy) + 0.5) * hy / sy - 0.5 * hy
    ox, oy = np.meshgrid(off_x, off_y)
    offsets = np.column_stack([ox.ravel(), oy.ravel()])
    return grid.cell_centers[:, None, :] + offsets[None, :, :]


def diffusion_element_matrices(grid, tensors):
    """(ncells, 4, 4) element stiffness for cellwise-sampled tensors."""
    k, _ = q1_blocks(*grid.spacing)
    return np.einsum("cab,abpq->cpq", tensors, k)


def assemble_diffusion(space, coeff, micro_size=None):
    """Stiffness operator for a tensor coefficient.

    ``coeff`` may be any object with a ``tensors_at(points)`` method (a
    CoefficientField or an EffectiveModel).  With ``micro_size`` each element
    is subdivided into micro subcells of that size and the coefficient is
    sampled once per subcell (midpoint); otherwise once per element.
    """
    grid = space.grid
    sx, sy = _subdivisions(grid, micro_size)
    if sx == 1 and sy == 1:
        tensors = coeff.tensors_at(grid.cell_centers)
        elem = diffusion_element_matrices(grid, tensors)
    else:
        centers = _subcell_centers(grid, sx, sy)
        tensors = coeff.tensors_at(centers.reshape(-1, 2)).reshape(grid.n_cells, sx * sy, 2, 2)
        blocks = _subcell_diffusion_blocks(grid.spacing[0], grid.spacing[1], sx, sy)
        elem = np.einsum("csab,sabpq->cpq", tensors, blocks)
    return SparseOperator(_scatter(grid, elem, grid.n_nodes), space, symmetric=True)


def _gauss_points_physical(grid, sx, sy):
    pts, w, phi, dphi = _gauss_tables(sx, sy)
    hx, hy = grid.spacing
    offsets = np.column_stack([pts[:, 0] * hx - 0.5 * hx, pts[:, 1] * hy - 0.5 * hy])
    coords = grid.cell_centers[:, None, :] + offsets[None, :, :]
    dphi_scaled = dphi / np.array([hx, hy])
    return coords, w * hx * hy, phi, dphi_scaled


def advection_element_matrices(grid, b_values, weights, phi, dphi_scaled, skew=True):
    """(ncells, 4, 4) element matrices of (b . grad u, v) at the given
    quadrature data; cellwise skew-symmetrized unless ``skew`` is False."""
    raw = np.einsum("q,cqd,qmd,ql->clm", weights, b_values, dphi_scaled, phi)
    if skew:
        return 0.5 * (raw - raw.transpose(0, 2, 1))
    return raw


def assemble_advection(space, b, micro_size=None, skew=None):
    """Advection operator for a vector field ``b`` (``values_at`` protocol).

    By default the form follows the field's ``prefers_skew`` attribute:
    skew-symmetrized for divergence-free fine-scale fields, plain Galerkin
    for cellwise-constant effective transport.
    """
    if skew is None:
        skew = getattr(b, "prefers_skew", True)
    grid = space.grid
    sx, sy = _subdivisions(grid, micro_size)
    coords, w, phi, dphi = _gauss_points_physical(grid, sx, sy)
    bvals = b.values_at(coords.reshape(-1, 2)).reshape(grid.n_cells, len(w), 2)
    elem = advection_element_matrices(grid, bvals, w, phi, dphi, skew=skew)
    return SparseOperator(_scatter(grid, elem, grid.n_nodes), space, symmetric=False)


def assemble_rhs(space, f, neumann=()):
    """Load vector of (f, v) plus boundary flux terms int_G flux * v."""
    grid = space.grid
    rhs = np.zeros(space.n_dofs)
    if callable(f):
        coords, w, phi, _ = _gauss_points_physical(grid, 1, 1)
        fv = np.asarray(f(coords.reshape(-1, 2)), dtype=float).reshape(grid.n_cells, len(w))
        elem = np.einsum("q,cq,qp->cp", w, fv, phi)
        np.add.at(rhs, grid.cell_nodes.ravel(), elem.ravel())
    elif f != 0.0:
        quarter = f * grid.spacing[0] * grid.spacing[1] * 0.25
        np.add.at(rhs, grid.cell_nodes.ravel(), quarter)
    for marker, flux in neumann:
        pairs, lengths = space.marked_boundary_edges(marker)
        contrib = 0.5 * flux * lengths
        np.add.at(rhs, pairs[:, 0], contrib)
        np.add.at(rhs, pairs[:, 1], contrib)
    return rhs


def functional_vector(space, j):
    """Nodal vector representing the functional: <j, u_h> = vector . coeffs."""
    if j.kind == "domain_integral":
        return assemble_rhs(space, 1.0)
    if j.kind == "point_value":
        vec = np.zeros(space.n_dofs)
        grid = space.grid
        p = np.asarray(j.point, dtype=float).reshape(1, 2)
        if not bool(space.domain.contains(p)[0]):
            raise OutOfDomainError(f"functional point {j.point} lies outside the domain")
        bb = grid.bbox
        tol = 1e-12 * max(space.domain.extent)
        inside_grid = (
            bb[0] - tol <= p[0, 0] <= bb[2] + tol and bb[1] - tol <= p[0, 1] <= bb[3] + tol
        )
        if not inside_grid:
            return vec  # patch restriction: the point lies outside this grid
        cell = grid.locate(p, clip=True)[0]
        x0, y0 = grid.cell_bbox(cell)[:2]
        u = (p[0, 0] - x0) / grid.spacing[0]
        v = (p[0, 1] - y0) / grid.spacing[1]
        phi, _ = _shape_values(u, v)
        vec[grid.cell_nodes[cell]] = phi
        return vec
    if j.kind == "boundary_integral":
        vec = np.zeros(space.n_dofs)
        pairs, lengths = space.marked_boundary_edges(j.marker)
        np.add.at(vec, pairs[:, 0], 0.5 * lengths)
        np.add.at(vec, pairs[:, 1], 0.5 * lengths)
        return vec
    if j.kind == "neumann_flux":
        return j.value * functional_vector(space, Functional.boundary_integral(j.marker))
    raise ConfigurationError(f"unknown functional kind '{j.kind}'")


def apply_functional(j, u):
    """<j, u> evaluated with the same weights as the dual right-hand side."""
    return float(functional_vector(u.space, j) @ u.values)


def solve(op, rhs, boundary_values=0.0):
    """Direct solve of the constrained system; the factorization is cached on
    the operator and reused by subsequent solves."""
    return DiscreteField(op.space, op.solve_constrained(rhs, boundary_values=boundary_values))


def solve_dual(op, j):
    """Transposed solve against a functional (or a raw functional vector)."""
    vec = functional_vector(op.space, j) if isinstance(j, Functional) else np.asarray(j, float)
    return DiscreteField(op.space, op.solve_constrained(vec, transpose=True))


# ---------------------------------------------------------------------------
# evaluation, interpolation, per-cell forms


def evaluate(field, points):
    """Bilinear evaluation of a nodal field at arbitrary points (clamped to
    the closure of its grid)."""
    grid = field.space.grid
    p = np.atleast_2d(np.asarray(points, dtype=float))
    tx = np.clip((p[:, 0] - grid.origin[0]) / grid.spacing[0], 0.0, grid.nx)
    ty = np.clip((p[:, 1] - grid.origin[1]) / grid.spacing[1], 0.0, grid.ny)
    ix = np.minimum(np.floor(tx).astype(int), grid.nx - 1)
    iy = np.minimum(np.floor(ty).astype(int), grid.ny - 1)
    fx = tx - ix
    fy = ty - iy
    n00 = iy * (grid.nx + 1) + ix
    v = field.values
    return (
        v[n00] * (1 - fx) * (1 - fy)
        + v[n00 + 1] * fx * (1 - fy)
        + v[n00 + grid.nx + 1] * (1 - fx) * fy
        + v[n00 + grid.nx + 2] * fx * fy
    )


def interpolate(field, target_space):
    """Nodal interpolation onto another space (exact on nested refinements)."""
    return DiscreteField(target_space, evaluate(field, target_space.grid.node_coords))


def gather(grid, values):
    """Per-cell 4-node coefficient gather: (ncells, 4)."""
    return values[grid.cell_nodes]


def diffusion_form_stack(grid, u4, z4):
    """s[c, a, b] = int_cell d_a(z) d_b(u); contract with a tensor to get the
    cellwise diffusion form (c grad u, grad z)."""
    k, _ = q1_blocks(*grid.spacing)
    return np.einsum("cp,abpq,cq->cab", z4, k, u4)


def diffusion_form_percell(grid, tensors, u4, z4):
    return np.einsum("cab,cab->c", tensors, diffusion_form_stack(grid, u4, z4))


def advection_form_percell(grid, b_values, u4, z4, skew=True):
    """Cellwise (b . grad u, z), using the same quadrature and (skewed) form
    as :func:`assemble_advection` with ``micro_size=None``."""
    _, w, phi, dphi = _gauss_points_physical(grid, 1, 1)
    du = np.einsum("cp,qpd->cqd", u4, dphi)
    zq = np.einsum("cp,qp->cq", z4, phi)
    raw_uz = np.einsum("q,cqd,cqd,cq->c", w, b_values, du, zq)
    if not skew:
        return raw_uz
    dz = np.einsum("cp,qpd->cqd", z4, dphi)
    uq = np.einsum("cp,qp->cq", u4, phi)
    raw_zu = np.einsum("q,cqd,cqd,cq->c", w, b_values, dz, uq)
    return 0.5 * (raw_uz - raw_zu)


def gauss_point_coords(grid):
    """Physical 2x2 Gauss points per cell: (ncells, 4, 2)."""
    coords, _, _, _ = _gauss_points_physical(grid, 1, 1)
    return coords


def value_sq_percell(grid, u4):
    """int_cell u^2 (exact for bilinear u)."""
    _, w, phi, _ = _gauss_points_physical(grid, 1, 1)
    uq = np.einsum("cp,qp->cq", u4, phi)
    return np.einsum("q,cq->c", w, uq**2)


def grad_sq_percell(grid, u4):
    """int_cell |grad u|^2 (exact for bilinear u)."""
    _, w, _, dphi = _gauss_points_physical(grid, 1, 1)
    du = np.einsum("cp,qpd->cqd", u4, dphi)
    return np.einsum("q,cqd->c", w, du**2)


# ---------------------------------------------------------------------------
# problem description


@dataclass
class Problem:
    """A heterogeneous diffusion or advection-diffusion problem with one
    quantity of interest.

    ``coefficient`` is the fine-scale tensor (gamma * Id for the
    advection-diffusion setting), ``advection`` the optional fine-scale
    divergence-free field.  ``neumann`` lists (marker, flux) pairs entering
    the load functional; ``dirichlet`` the markers carrying (homogeneous)
    Dirichlet conditions.
    """

    hierarchy: object
    coefficient: object
    functional: Functional
    advection: object = None
    source: object = 0.0
    neumann: tuple = ()
    dirichlet: tuple = SIDES
    _spaces: dict = dc_field(default_factory=dict, repr=False)

    @property
    def is_advective(self):
        return self.advection is not None and getattr(self.advection, "kind", None) != "zero"

    def space(self, grid):
        key = (grid.origin, grid.spacing, grid.shape)
        if key not in self._spaces:
            self._spaces[key] = FeSpace(grid, self.hierarchy.domain, self.dirichlet)
        return self._spaces[key]

    def macro_space(self):
        return self.space(self.hierarchy.macro_grid)

    def fine_space(self, h):
        return self.space(self.hierarchy.fine_grid(h))


def effective_operator(problem, model, space):
    """Operator of the effective problem: diffusion with the per-cell model
    tensor plus (if present) advection with the cell-averaged field."""
    op = assemble_diffusion(space, model)
    if model.advection is not None:
        b = CellAveragedAdvection(problem.hierarchy, model.advection)
        adv = assemble_advection(space, b)
        return SparseOperator(op.matrix + adv.matrix, space, symmetric=False)
    return op


def fine_operator(problem, space, micro_size=None):
    """Operator of the fine-scale problem on the given space."""
    if micro_size is None:
        micro_size = problem.hierarchy.h_micro
    op = assemble_diffusion(space, problem.coefficient, micro_size=micro_size)
    if problem.is_advective:
        adv = assemble_advection(space, problem.advection, micro_size=micro_size)
        return SparseOperator(op.matrix + adv.matrix, space, symmetric=False)
    return op


def problem_rhs(problem, space):
    return assemble_rhs(space, problem.source, problem.neumann)
