"""Element families, degree-of-freedom maps, basis evaluation, quadrature.

Only the lowest-order families are provided:

* ``CG1-scalar`` / ``CG1-vector2`` -- continuous piecewise-linear hats,
  one dof per vertex (two for the vector variant, interleaved x/y);
* ``RT0`` -- lowest-order Raviart-Thomas, one dof per edge.  The dof is
  the (constant) normal-component value on the edge, taken with respect
  to the global edge normal, which is the low-to-high vertex tangent
  rotated clockwise.  On a cell the local basis for edge k (opposite
  local vertex k) is ``s * l_k/(2A) * (x - p_k)`` with ``s`` matching the
  cell's outward normal against the global one, so shared coefficients
  agree between neighbouring cells and ``div = s * l_k / A``;
* ``DG0-scalar`` / ``DG0-vector2`` -- cellwise constants;
* ``DG0-symtensor2`` -- cellwise constant symmetric tensors, stored as
  the (11, 12, 22) components with the 12 entry counted once.  Inner
  products of such tensors use the contraction weights (1, 2, 1);
* ``BoundaryCG1-scalar`` / ``BoundaryCG1-vector2`` -- piecewise-linear
  traces on the boundary edges of a chosen tag set, one dof per boundary
  vertex of that set (vertices sorted by global index).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .mesh import Mesh

CG1_SCALAR = "CG1-scalar"
CG1_VECTOR2 = "CG1-vector2"
RT0 = "RT0"
DG0_SCALAR = "DG0-scalar"
DG0_VECTOR2 = "DG0-vector2"
DG0_SYMTENSOR2 = "DG0-symtensor2"
BOUNDARY_CG1_SCALAR = "BoundaryCG1-scalar"
BOUNDARY_CG1_VECTOR2 = "BoundaryCG1-vector2"

VOLUME_FAMILIES = (CG1_SCALAR, CG1_VECTOR2, RT0, DG0_SCALAR, DG0_VECTOR2,
                   DG0_SYMTENSOR2)
BOUNDARY_FAMILIES = (BOUNDARY_CG1_SCALAR, BOUNDARY_CG1_VECTOR2)

# contraction weights for the (11, 12, 22) symmetric-tensor storage
SYM_WEIGHTS = np.array([1.0, 2.0, 1.0])


class FEError(Exception):
    """Bad element family or evaluation request."""


@dataclass
class FESpace:
    """A finite-element space over a mesh.

    ``dof_map`` maps each cell (or, for boundary families, each tagged
    boundary edge) to its global dof indices.
    """

    mesh: Mesh
    family: str
    n_dofs: int
    dof_map: np.ndarray
    boundary_tags: frozenset | None = None
    boundary_vertex_ids: np.ndarray | None = None
    boundary_edge_rows: np.ndarray | None = None  # mesh boundary-edge indices
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    @property
    def components(self):
        return {CG1_SCALAR: 1, CG1_VECTOR2: 2, RT0: 1, DG0_SCALAR: 1,
                DG0_VECTOR2: 2, DG0_SYMTENSOR2: 3, BOUNDARY_CG1_SCALAR: 1,
                BOUNDARY_CG1_VECTOR2: 2}[self.family]

    def vertex_dofs(self, vertex, comp=0):
        """Global dof of a vertex-based family (CG1 variants)."""
        if self.family == CG1_SCALAR:
            return int(vertex)
        if self.family == CG1_VECTOR2:
            return 2 * int(vertex) + comp
        raise FEError(f"{self.family} has no vertex dofs")


def build_space(mesh, family, boundary_tags=None):
    """Construct an :class:`FESpace`; see the module docstring for families."""
    if family in BOUNDARY_FAMILIES:
        if boundary_tags is None:
            raise FEError(f"{family} requires a boundary tag set")
        return _build_boundary_space(mesh, family, frozenset(boundary_tags))
    if boundary_tags is not None:
        raise FEError(f"{family} does not take boundary tags")
    nv, nc = mesh.num_vertices, mesh.num_cells
    cells = mesh.cells
    if family == CG1_SCALAR:
        return FESpace(mesh, family, nv, cells.copy())
    if family == CG1_VECTOR2:
        dof = np.empty((nc, 6), dtype=np.int64)
        dof[:, 0::2] = 2 * cells
        dof[:, 1::2] = 2 * cells + 1
        return FESpace(mesh, family, 2 * nv, dof)
    if family == RT0:
        return FESpace(mesh, family, mesh.num_edges, mesh.cell_edges.copy())
    if family == DG0_SCALAR:
        return FESpace(mesh, family, nc,
                       np.arange(nc, dtype=np.int64).reshape(-1, 1))
    if family == DG0_VECTOR2:
        base = 2 * np.arange(nc, dtype=np.int64).reshape(-1, 1)
        return FESpace(mesh, family, 2 * nc,
                       np.hstack([base, base + 1]))
    if family == DG0_SYMTENSOR2:
        base = 3 * np.arange(nc, dtype=np.int64).reshape(-1, 1)
        return FESpace(mesh, family, 3 * nc,
                       np.hstack([base, base + 1, base + 2]))
    raise FEError(f"unknown element family {family!r}")


def _build_boundary_space(mesh, family, tags):
    verts = mesh.boundary_vertices(tags)
    local = {int(v): i for i, v in enumerate(verts)}
    ncomp = 1 if family == BOUNDARY_CG1_SCALAR else 2
    rows = np.nonzero(np.isin(mesh.boundary_tags,
                              sorted(int(t) for t in tags)))[0]
    dof = np.empty((len(rows), 2 * ncomp), dtype=np.int64)
    for r, be in enumerate(rows):
        u, v = mesh.boundary_vertices_of_edge[be]
        for j, w in enumerate((u, v)):
            for c in range(ncomp):
                dof[r, ncomp * j + c] = ncomp * local[int(w)] + c
    return FESpace(mesh, family, ncomp * len(verts), dof,
                   boundary_tags=tags, boundary_vertex_ids=verts,
                   boundary_edge_rows=rows)


# ---------------------------------------------------------------------------
# Reference-element data
# ---------------------------------------------------------------------------

P1_GRADS = np.array([[-1.0, -1.0], [1.0, 0.0], [0.0, 1.0]])


def p1_values(points):
    """P1 hat values at reference points, shape (3, npts)."""
    pts = np.atleast_2d(points)
    return np.vstack([1.0 - pts[:, 0] - pts[:, 1], pts[:, 0], pts[:, 1]])


@dataclass
class BasisEval:
    """Basis data of one cell at one reference point (physical values)."""

    values: np.ndarray                 # (ldof,) scalars or (ldof, vdim)
    gradients: np.ndarray | None = None      # (ldof, 2) for CG1-scalar
    divergence: np.ndarray | None = None     # (ldof,) for RT0
    sym_gradient: np.ndarray | None = None   # (ldof, 3) (11,12,22) for CG1v
    point: np.ndarray | None = None          # physical coordinates


def eval_basis(space, cell, ref_point):
    """Evaluate the local basis of ``cell`` at a reference point.

    Returns physical-space values, plus gradients (CG1-scalar),
    divergences (RT0) or symmetric gradients (CG1-vector2).
    """
    if not 0 <= cell < space.mesh.num_cells:
        raise IndexError(f"cell index {cell} out of range")
    xi = np.asarray(ref_point, dtype=float)
    lam = np.array([1.0 - xi[0] - xi[1], xi[0], xi[1]])
    if lam.min() < -1e-12:
        raise ValueError(f"reference point {ref_point} outside the triangle")
    p = space.mesh.vertices[space.mesh.cells[cell]]
    jac = np.column_stack([p[1] - p[0], p[2] - p[0]])
    x = p[0] + jac @ xi
    fam = space.family
    if fam == CG1_SCALAR:
        grads = P1_GRADS @ np.linalg.inv(jac)
        return BasisEval(values=lam.copy(), gradients=grads, point=x)
    if fam == CG1_VECTOR2:
        vals = np.zeros((6, 2))
        sym = np.zeros((6, 3))
        grads = P1_GRADS @ np.linalg.inv(jac)
        for v in range(3):
            gx, gy = grads[v]
            vals[2 * v, 0] = lam[v]
            vals[2 * v + 1, 1] = lam[v]
            sym[2 * v] = (gx, 0.5 * gy, 0.0)
            sym[2 * v + 1] = (0.0, 0.5 * gx, gy)
        return BasisEval(values=vals, sym_gradient=sym, point=x)
    if fam == RT0:
        area = 0.5 * abs(np.linalg.det(jac))
        signs = space.mesh.cell_edge_signs[cell]
        vals = np.empty((3, 2))
        divs = np.empty(3)
        for k in range(3):
            a = p[(k + 1) % 3]
            b = p[(k + 2) % 3]
            ell = np.hypot(*(b - a))
            vals[k] = signs[k] * ell / (2.0 * area) * (x - p[k])
            divs[k] = signs[k] * ell / area
        return BasisEval(values=vals, divergence=divs, point=x)
    if fam == DG0_SCALAR:
        return BasisEval(values=np.array([1.0]), point=x)
    if fam == DG0_VECTOR2:
        return BasisEval(values=np.eye(2), point=x)
    if fam == DG0_SYMTENSOR2:
        return BasisEval(values=np.eye(3), point=x)
    raise FEError(f"eval_basis does not support family {space.family!r}")


def rt0_cell_data(mesh):
    """Per-cell RT0 data: corner points, signed lengths and divergences.

    Returns ``(corners, coeff, divs)`` with shapes (nc,3,2), (nc,3), (nc,3)
    so the basis of local edge k at x is ``coeff[c,k] * (x - corners[c,k])``.
    """
    p = mesh.vertices[mesh.cells]              # (nc, 3, 2)
    areas = mesh.areas()
    signs = mesh.cell_edge_signs.astype(float)
    coeff = np.empty((mesh.num_cells, 3))
    divs = np.empty((mesh.num_cells, 3))
    for k in range(3):
        a = p[:, (k + 1) % 3]
        b = p[:, (k + 2) % 3]
        ell = np.hypot(b[:, 0] - a[:, 0], b[:, 1] - a[:, 1])
        coeff[:, k] = signs[:, k] * ell / (2.0 * areas)
        divs[:, k] = signs[:, k] * ell / areas
    return p, coeff, divs


def interpolate_rt0(space, fn):
    """RT0 coefficients of a vector field: its normal value per edge."""
    mesh = space.mesh
    mids = 0.5 * (mesh.vertices[mesh.edges[:, 0]]
                  + mesh.vertices[mesh.edges[:, 1]])
    tang = mesh.vertices[mesh.edges[:, 1]] - mesh.vertices[mesh.edges[:, 0]]
    ell = np.hypot(tang[:, 0], tang[:, 1])
    normals = np.column_stack([tang[:, 1], -tang[:, 0]]) / ell[:, None]
    vals = np.asarray(fn(mids[:, 0], mids[:, 1]), dtype=float)
    return np.einsum("ek,ek->e", vals.reshape(-1, 2), normals)


# ---------------------------------------------------------------------------
# Quadrature
# ---------------------------------------------------------------------------

@dataclass
class QuadratureRule:
    """Points and weights; weights sum to the reference measure."""

    points: np.ndarray
    weights: np.ndarray
    degree: int


_TRI_D2_PTS = np.array([[1 / 6, 1 / 6], [2 / 3, 1 / 6], [1 / 6, 2 / 3]])
# six-point rule, exact through degree 4, all weights positive
_TRI_D4_A = 0.445948490915965
_TRI_D4_B = 0.091576213509771
_TRI_D4_WA = 0.223381589678011 / 2.0
_TRI_D4_WB = 0.109951743655322 / 2.0
_TRI_D4_PTS = np.array([
    [_TRI_D4_A, _TRI_D4_A],
    [1 - 2 * _TRI_D4_A, _TRI_D4_A],
    [_TRI_D4_A, 1 - 2 * _TRI_D4_A],
    [_TRI_D4_B, _TRI_D4_B],
    [1 - 2 * _TRI_D4_B, _TRI_D4_B],
    [_TRI_D4_B, 1 - 2 * _TRI_D4_B],
])
_TRI_D4_WTS = np.array([_TRI_D4_WA] * 3 + [_TRI_D4_WB] * 3)


def quadrature(kind, degree):
    """Positive-weight rule exact to ``degree`` on the reference element.

    ``kind='triangle'`` integrates over the unit reference triangle
    (weights sum to 1/2, degrees 1..4); ``kind='edge'`` over the unit
    interval (weights sum to 1, degrees 1..5).
    """
    if kind == "triangle":
        if degree == 1:
            return QuadratureRule(np.array([[1 / 3, 1 / 3]]),
                                  np.array([0.5]), 1)
        if degree == 2:
            return QuadratureRule(_TRI_D2_PTS.copy(),
                                  np.full(3, 1 / 6), 2)
        if degree in (3, 4):
            return QuadratureRule(_TRI_D4_PTS.copy(), _TRI_D4_WTS.copy(), 4)
        raise FEError(f"unsupported triangle quadrature degree {degree}")
    if kind == "edge":
        if degree == 1:
            return QuadratureRule(np.array([0.5]), np.array([1.0]), 1)
        if degree in (2, 3):
            g = 0.5 / np.sqrt(3.0)
            return QuadratureRule(np.array([0.5 - g, 0.5 + g]),
                                  np.array([0.5, 0.5]), 3)
        if degree in (4, 5):
            g = 0.5 * np.sqrt(0.6)
            return QuadratureRule(np.array([0.5 - g, 0.5, 0.5 + g]),
                                  np.array([5 / 18, 8 / 18, 5 / 18]), 5)
        raise FEError(f"unsupported edge quadrature degree {degree}")
    raise FEError(f"unknown quadrature kind {kind!r}")
