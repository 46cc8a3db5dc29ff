"""Assembly of mass, differential-operator and boundary-coupling matrices.

One quadrature rule is used for every volume integral (degree 4 on
triangles) and one for every boundary integral (degree 3 on edges).  The
highest-degree integrand anywhere in the package is degree 3 (two affine
RT0 factors times a P1 hat), so every assembled object is integrated
exactly and the discrete power-balance identities hold to roundoff rather
than to quadrature error.

Matrices are returned as ``scipy.sparse`` CSR; accumulation happens in
cell order through COO duplicates, which sums deterministically.
Coefficients are wrapped in :class:`CoefficientField`; tensor-valued
weights are inverted analytically per quadrature point (never by
assembling and inverting matrices).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from . import fem
from .fem import (
    BOUNDARY_CG1_SCALAR,
    BOUNDARY_CG1_VECTOR2,
    CG1_SCALAR,
    CG1_VECTOR2,
    DG0_SCALAR,
    DG0_SYMTENSOR2,
    DG0_VECTOR2,
    RT0,
    SYM_WEIGHTS,
)

TRIANGLE_DEGREE = 4
EDGE_DEGREE = 3


class AssemblyError(Exception):
    """Coefficient or space mismatch during assembly."""


# ---------------------------------------------------------------------------
# Coefficient fields
# ---------------------------------------------------------------------------

def _as_fn(value):
    if callable(value):
        return value
    v = float(value)
    return lambda x, y: np.full_like(np.asarray(x, dtype=float), v)


@dataclass
class CoefficientField:
    """Pointwise scalar, symmetric 2x2 tensor, or symmetric-tensor Gram map.

    * ``scalar``: ``fns[0](x, y)`` gives the weight;
    * ``tensor2``: ``fns = (t11, t12, t22)`` give the tensor components;
    * ``symgram``: ``fns[0](x, y)`` gives a (..., 3, 3) Gram matrix
      ``G_ab = E_a : Map(E_b)`` in the (11, 12, 22) storage, used to weigh
      DG0-symtensor2 masses.
    """

    kind: str
    fns: tuple

    @staticmethod
    def scalar(fn):
        return CoefficientField("scalar", (_as_fn(fn),))

    @staticmethod
    def constant(value):
        return CoefficientField.scalar(float(value))

    @staticmethod
    def tensor(t11, t12, t22):
        return CoefficientField("tensor2",
                                (_as_fn(t11), _as_fn(t12), _as_fn(t22)))

    @staticmethod
    def symgram(fn_or_matrix):
        if callable(fn_or_matrix):
            return CoefficientField("symgram", (fn_or_matrix,))
        G = np.asarray(fn_or_matrix, dtype=float)

        def fn(x, y, G=G):
            shape = np.shape(np.asarray(x))
            return np.broadcast_to(G, shape + (3, 3)).copy()

        return CoefficientField("symgram", (fn,))

    # -- evaluation -------------------------------------------------------

    def scalar_at(self, x, y):
        if self.kind != "scalar":
            raise AssemblyError(f"expected scalar coefficient, got {self.kind}")
        return np.asarray(self.fns[0](x, y), dtype=float)

    def tensor_at(self, x, y, check_spd=False):
        """Components (t11, t12, t22) at points, each shaped like x."""
        if self.kind != "tensor2":
            raise AssemblyError(f"expected tensor coefficient, got {self.kind}")
        x = np.asarray(x, dtype=float)
        comps = [np.broadcast_to(np.asarray(f(x, y), dtype=float), x.shape)
                 for f in self.fns]
        if check_spd:
            _require_spd(comps, x, y)
        return comps

    def symgram_at(self, x, y):
        if self.kind != "symgram":
            raise AssemblyError(f"expected symgram coefficient, got {self.kind}")
        return np.asarray(self.fns[0](x, y), dtype=float)

    def inverse(self):
        """Pointwise analytic inverse of an SPD 2x2 tensor field."""
        if self.kind != "tensor2":
            raise AssemblyError("only tensor coefficients can be inverted")
        f11, f12, f22 = self.fns

        def make(which):
            def fn(x, y):
                t11 = np.asarray(f11(x, y), dtype=float)
                t12 = np.broadcast_to(np.asarray(f12(x, y), dtype=float),
                                      t11.shape)
                t22 = np.broadcast_to(np.asarray(f22(x, y), dtype=float),
                                      t11.shape)
                _require_spd((t11, t12, t22), x, y)
                det = t11 * t22 - t12 * t12
                return {"11": t22, "12": -t12, "22": t11}[which] / det
            return fn

        return CoefficientField("tensor2",
                                (make("11"), make("12"), make("22")))


def _require_spd(comps, x, y):
    t11, t12, t22 = (np.asarray(c, dtype=float) for c in comps)
    det = t11 * t22 - t12 * t12
    bad = (t11 <= 0) | (det <= 0)
    if np.any(bad):
        idx = np.unravel_index(np.argmax(bad), np.shape(bad))
        px = np.broadcast_to(np.asarray(x, dtype=float), np.shape(bad))[idx]
        py = np.broadcast_to(np.asarray(y, dtype=float), np.shape(bad))[idx]
        raise AssemblyError(
            f"tensor coefficient is not SPD at quadrature point "
            f"({px:.6g}, {py:.6g})"
        )


def as_coefficient(obj, kind="scalar"):
    """Coerce numbers, callables or fields into a :class:`CoefficientField`."""
    if isinstance(obj, CoefficientField):
        return obj
    if kind == "scalar":
        return CoefficientField.scalar(obj)
    raise AssemblyError(f"cannot coerce {obj!r} into a {kind} coefficient")


# ---------------------------------------------------------------------------
# Cached per-mesh tables at the shared volume rule
# ---------------------------------------------------------------------------

class _VolumeTables:
    """Geometry and basis values of every cell at the shared triangle rule."""

    def __init__(self, mesh):
        qr = fem.quadrature("triangle", TRIANGLE_DEGREE)
        self.qr = qr
        self.mesh = mesh
        nq = len(qr.weights)
        p = mesh.vertices[mesh.cells]               # (nc, 3, 2)
        d1 = p[:, 1] - p[:, 0]
        d2 = p[:, 2] - p[:, 0]
        det = d1[:, 0] * d2[:, 1] - d1[:, 1] * d2[:, 0]   # = 2*area > 0
        self.det = det
        self.areas = 0.5 * det
        self.p1 = fem.p1_values(qr.points)           # (3, nq)
        xi = qr.points
        self.xq = (p[:, None, 0, :]
                   + xi[None, :, 0, None] * d1[:, None, :]
                   + xi[None, :, 1, None] * d2[:, None, :])   # (nc, nq, 2)
        # physical P1 gradients: invJ^T @ ref grads
        inv_jt = np.empty((mesh.num_cells, 2, 2))
        inv_jt[:, 0, 0] = d2[:, 1]
        inv_jt[:, 0, 1] = -d2[:, 0]
        inv_jt[:, 1, 0] = -d1[:, 1]
        inv_jt[:, 1, 1] = d1[:, 0]
        inv_jt /= det[:, None, None]
        self.p1grad = np.einsum("cde,kd->cke", inv_jt, fem.P1_GRADS)
        # RT0 values at quadrature points and cellwise divergences
        corners, coeff, divs = fem.rt0_cell_data(mesh)
        self.rt0 = coeff[:, :, None, None] * (self.xq[:, None, :, :]
                                              - corners[:, :, None, :])
        self.rt0_div = divs
        # quadrature weights times |det J| per cell
        self.wdet = qr.weights[None, :] * det[:, None]       # (nc, nq)
        self.nq = nq

    def nodal_at_qp(self, nodal):
        """P1 field with given vertex values, evaluated at all points."""
        return np.einsum("kq,ck->cq", self.p1, nodal[self.mesh.cells])


def _tables(mesh):
    cache = mesh._edge_cache
    if "_volume_tables" not in cache:
        cache["_volume_tables"] = _VolumeTables(mesh)
    return cache["_volume_tables"]


def _scatter(rows, cols, vals, shape):
    return sp.coo_matrix(
        (np.asarray(vals, dtype=float).ravel(),
         (np.asarray(rows).ravel(), np.asarray(cols).ravel())),
        shape=shape,
    ).tocsr()


def _pair_indices(row_map, col_map):
    """Row/col index arrays for all local pairs of two dof maps."""
    rows = np.repeat(row_map[:, :, None], col_map.shape[1], axis=2)
    cols = np.repeat(col_map[:, None, :], row_map.shape[1], axis=1)
    return rows, cols


def _check_same_mesh(*spaces):
    mesh = spaces[0].mesh
    for s in spaces[1:]:
        if s.mesh is not mesh:
            raise AssemblyError("spaces live on different meshes")
    return mesh


# ---------------------------------------------------------------------------
# Volume operators
# ---------------------------------------------------------------------------

def assemble_mass(space, coeff=1.0, check_spd=False):
    """Weighted mass matrix of a volume space.

    Scalar coefficients apply to every family; 2x2 tensor coefficients to
    RT0 and the vector families; ``symgram`` to DG0-symtensor2.  Callers
    needing the inverse of a material tensor pass ``coeff.inverse()``.
    """
    tb = _tables(space.mesh)
    fam = space.family
    n = space.n_dofs
    if not isinstance(coeff, CoefficientField):
        coeff = CoefficientField.scalar(coeff)

    if fam == CG1_SCALAR:
        c = coeff.scalar_at(tb.xq[..., 0], tb.xq[..., 1])
        local = np.einsum("cq,iq,jq->cij", tb.wdet * c, tb.p1, tb.p1)
        rows, cols = _pair_indices(space.dof_map, space.dof_map)
        return _scatter(rows, cols, local, (n, n))

    if fam == CG1_VECTOR2:
        if coeff.kind == "scalar":
            c = coeff.scalar_at(tb.xq[..., 0], tb.xq[..., 1])
            m3 = np.einsum("cq,iq,jq->cij", tb.wdet * c, tb.p1, tb.p1)
            local = np.zeros((space.mesh.num_cells, 6, 6))
            local[:, 0::2, 0::2] = m3
            local[:, 1::2, 1::2] = m3
        else:
            t11, t12, t22 = coeff.tensor_at(tb.xq[..., 0], tb.xq[..., 1],
                                            check_spd=check_spd)
            local = np.zeros((space.mesh.num_cells, 6, 6))
            for (a, b, t) in ((0, 0, t11), (0, 1, t12), (1, 0, t12),
                              (1, 1, t22)):
                blk = np.einsum("cq,iq,jq->cij", tb.wdet * t, tb.p1, tb.p1)
                local[:, a::2, b::2] = blk
        rows, cols = _pair_indices(space.dof_map, space.dof_map)
        return _scatter(rows, cols, local, (n, n))

    if fam == RT0:
        if coeff.kind == "scalar":
            c = coeff.scalar_at(tb.xq[..., 0], tb.xq[..., 1])
            local = np.einsum("cq,ciqd,cjqd->cij", tb.wdet * c,
                              tb.rt0, tb.rt0)
        else:
            t11, t12, t22 = coeff.tensor_at(tb.xq[..., 0], tb.xq[..., 1],
                                            check_spd=check_spd)
            t11q = t11[:, None, :]
            t12q = t12[:, None, :]
            t22q = t22[:, None, :]
            wpsi = np.empty_like(tb.rt0)
            wpsi[..., 0] = t11q * tb.rt0[..., 0] + t12q * tb.rt0[..., 1]
            wpsi[..., 1] = t12q * tb.rt0[..., 0] + t22q * tb.rt0[..., 1]
            local = np.einsum("cq,ciqd,cjqd->cij", tb.wdet, tb.rt0, wpsi)
        rows, cols = _pair_indices(space.dof_map, space.dof_map)
        return _scatter(rows, cols, local, (n, n))

    if fam == DG0_SCALAR:
        c = coeff.scalar_at(tb.xq[..., 0], tb.xq[..., 1])
        vals = np.einsum("cq,cq->c", tb.wdet, c)
        idx = space.dof_map[:, 0]
        return _scatter(idx, idx, vals, (n, n))

    if fam == DG0_VECTOR2:
        if coeff.kind == "scalar":
            c = coeff.scalar_at(tb.xq[..., 0], tb.xq[..., 1])
            cell_int = np.einsum("cq,cq->c", tb.wdet, c)
            local = np.zeros((space.mesh.num_cells, 2, 2))
            local[:, 0, 0] = cell_int
            local[:, 1, 1] = cell_int
        else:
            t11, t12, t22 = coeff.tensor_at(tb.xq[..., 0], tb.xq[..., 1],
                                            check_spd=check_spd)
            local = np.zeros((space.mesh.num_cells, 2, 2))
            local[:, 0, 0] = np.einsum("cq,cq->c", tb.wdet, t11)
            local[:, 0, 1] = np.einsum("cq,cq->c", tb.wdet, t12)
            local[:, 1, 0] = local[:, 0, 1]
            local[:, 1, 1] = np.einsum("cq,cq->c", tb.wdet, t22)
        rows, cols = _pair_indices(space.dof_map, space.dof_map)
        return _scatter(rows, cols, local, (n, n))

    if fam == DG0_SYMTENSOR2:
        if coeff.kind == "scalar":
            c = coeff.scalar_at(tb.xq[..., 0], tb.xq[..., 1])
            cell_int = np.einsum("cq,cq->c", tb.wdet, c)
            local = cell_int[:, None, None] * np.diag(SYM_WEIGHTS)[None]
        elif coeff.kind == "symgram":
            G = coeff.symgram_at(tb.xq[..., 0], tb.xq[..., 1])
            local = np.einsum("cq,cqab->cab", tb.wdet, G)
        else:
            raise AssemblyError(
                "DG0-symtensor2 masses take scalar or symgram coefficients"
            )
        rows, cols = _pair_indices(space.dof_map, space.dof_map)
        return _scatter(rows, cols, local, (n, n))

    raise AssemblyError(f"cannot assemble a mass on family {fam!r}")


def assemble_d_grad(p_space, q_space):
    """Pairing of a q-space field against grad of a CG1 scalar field.

    Entry (m, i) = integral of psi_q^m . grad(phi_p^i); rows belong to the
    q space (RT0 or DG0-vector2), columns to the p space.
    """
    mesh = _check_same_mesh(p_space, q_space)
    if p_space.family != CG1_SCALAR:
        raise AssemblyError("p space must be CG1-scalar")
    tb = _tables(mesh)
    if q_space.family == RT0:
        psi_int = np.einsum("cq,ciqd->cid", tb.wdet, tb.rt0)
        local = np.einsum("cmd,cid->cmi", psi_int, tb.p1grad)
        rows, cols = _pair_indices(q_space.dof_map, p_space.dof_map)
        return _scatter(rows, cols, local, (q_space.n_dofs, p_space.n_dofs))
    if q_space.family == DG0_VECTOR2:
        local = tb.areas[:, None, None] * np.swapaxes(tb.p1grad, 1, 2)
        rows, cols = _pair_indices(q_space.dof_map, p_space.dof_map)
        return _scatter(rows, cols, local, (q_space.n_dofs, p_space.n_dofs))
    raise AssemblyError("q space must be RT0 or DG0-vector2")


def assemble_d_div(p_space, q_space):
    """Entry (i, m) = integral of phi_p^i div(psi_q^m); RT0 q space."""
    mesh = _check_same_mesh(p_space, q_space)
    if p_space.family != CG1_SCALAR or q_space.family != RT0:
        raise AssemblyError("needs CG1-scalar p space and RT0 q space")
    tb = _tables(mesh)
    phi_int = np.einsum("cq,iq->ci", tb.wdet, tb.p1)      # = area/3 each
    local = phi_int[:, :, None] * tb.rt0_div[:, None, :]
    rows, cols = _pair_indices(p_space.dof_map, q_space.dof_map)
    return _scatter(rows, cols, local, (p_space.n_dofs, q_space.n_dofs))


def assemble_d_Grad(theta_space, kappa_space):
    """Symmetric-gradient pairing: entry (p, n) = E_kappa^p : Grad(phi_theta^n).

    Rows are DG0-symtensor2 dofs, columns CG1-vector2 dofs; the tensor
    contraction counts the off-diagonal component twice.
    """
    mesh = _check_same_mesh(theta_space, kappa_space)
    if (theta_space.family != CG1_VECTOR2
            or kappa_space.family != DG0_SYMTENSOR2):
        raise AssemblyError("needs CG1-vector2 theta and DG0-symtensor2 kappa")
    tb = _tables(mesh)
    nc = mesh.num_cells
    local = np.zeros((nc, 3, 6))
    gx = tb.p1grad[:, :, 0] * tb.areas[:, None]
    gy = tb.p1grad[:, :, 1] * tb.areas[:, None]
    for v in range(3):
        # x-component dof of vertex v: Grad = sym(e_x (X) grad phi_v)
        local[:, 0, 2 * v] = gx[:, v]        # row 11: Grad_11
        local[:, 1, 2 * v] = gy[:, v]        # row 12: 2 * Grad_12
        # y-component dof
        local[:, 1, 2 * v + 1] = gx[:, v]
        local[:, 2, 2 * v + 1] = gy[:, v]
    rows, cols = _pair_indices(kappa_space.dof_map, theta_space.dof_map)
    return _scatter(rows, cols, local,
                    (kappa_space.n_dofs, theta_space.n_dofs))


def assemble_d0(gamma_space, theta_space):
    """Entry (r, n) = - integral of phi_gamma^r . phi_theta^n."""
    mesh = _check_same_mesh(gamma_space, theta_space)
    if (gamma_space.family != DG0_VECTOR2
            or theta_space.family != CG1_VECTOR2):
        raise AssemblyError("needs DG0-vector2 gamma and CG1-vector2 theta")
    tb = _tables(mesh)
    phi_int = np.einsum("cq,iq->ci", tb.wdet, tb.p1)      # area/3
    local = np.zeros((mesh.num_cells, 2, 6))
    for v in range(3):
        local[:, 0, 2 * v] = -phi_int[:, v]
        local[:, 1, 2 * v + 1] = -phi_int[:, v]
    rows, cols = _pair_indices(gamma_space.dof_map, theta_space.dof_map)
    return _scatter(rows, cols, local,
                    (gamma_space.n_dofs, theta_space.n_dofs))


# ---------------------------------------------------------------------------
# Boundary operators
# ---------------------------------------------------------------------------

class _EdgeTables:
    """Geometry of a set of tagged boundary edges at the shared edge rule."""

    def __init__(self, mesh, rows):
        qr = fem.quadrature("edge", EDGE_DEGREE)
        self.qr = qr
        self.rows = np.asarray(rows, dtype=np.int64)
        uv = mesh.boundary_vertices_of_edge[self.rows]
        self.u, self.v = uv[:, 0], uv[:, 1]
        pu = mesh.vertices[self.u]
        pv = mesh.vertices[self.v]
        tang = pv - pu
        self.lengths = np.hypot(tang[:, 0], tang[:, 1])
        # outward normal: away from the owning cell's centroid
        normal = np.column_stack([tang[:, 1], -tang[:, 0]])
        normal /= self.lengths[:, None]
        cells = mesh.boundary_cells[self.rows]
        centro = mesh.vertices[mesh.cells[cells]].mean(axis=1)
        mids = 0.5 * (pu + pv)
        flip = np.einsum("ek,ek->e", normal, mids - centro) < 0
        normal[flip] *= -1.0
        self.normals = normal
        s = qr.points
        self.xq = pu[:, None, :] + s[None, :, None] * tang[:, None, :]
        self.shape = np.vstack([1.0 - s, s])          # (2, nq) P1 on the edge
        self.wl = qr.weights[None, :] * self.lengths[:, None]


def _edge_rows(mesh, tags):
    wanted = sorted(int(t) for t in tags)
    return np.nonzero(np.isin(mesh.boundary_tags, wanted))[0]


def _bnd_positions(bnd_space, tags):
    """Positions within the boundary space of the edges carrying ``tags``."""
    if tags is None:
        return np.arange(len(bnd_space.boundary_edge_rows))
    if not frozenset(tags) <= bnd_space.boundary_tags:
        raise AssemblyError("requested tags outside the boundary space")
    mesh = bnd_space.mesh
    keep = np.isin(mesh.boundary_tags[bnd_space.boundary_edge_rows],
                   sorted(int(t) for t in tags))
    return np.nonzero(keep)[0]


def assemble_boundary_coupling(vol_space, bnd_space, kind, tags=None):
    """Trace pairing between a volume space and a boundary space.

    ``kind='dirichlet_trace'`` pairs CG1 traces with the boundary basis;
    ``kind='normal_trace'`` pairs outward normal components of RT0 (or of
    DG0-symtensor2, against a vector boundary space).  Only edges whose
    tag lies in ``tags`` (default: the boundary space's own set)
    contribute.
    """
    mesh = _check_same_mesh(vol_space, bnd_space)
    pos = _bnd_positions(bnd_space, tags)
    shape = (vol_space.n_dofs, bnd_space.n_dofs)
    if len(pos) == 0:
        return sp.csr_matrix(shape)
    et = _EdgeTables(mesh, bnd_space.boundary_edge_rows[pos])
    block = np.einsum("eq,aq,bq->eab", et.wl, et.shape, et.shape)

    rows, cols, vals = [], [], []
    if kind == "dirichlet_trace":
        ncomp = {BOUNDARY_CG1_SCALAR: 1, BOUNDARY_CG1_VECTOR2: 2}[
            bnd_space.family]
        if (ncomp == 1 and vol_space.family != CG1_SCALAR) or (
                ncomp == 2 and vol_space.family != CG1_VECTOR2):
            raise AssemblyError(
                "dirichlet_trace needs CG1 volume dofs matching the "
                "boundary space's components"
            )
        for e, p in enumerate(pos):
            bdofs = bnd_space.dof_map[p]
            for a, wa in enumerate((et.u[e], et.v[e])):
                for b in range(2):
                    for c in range(ncomp):
                        rows.append(vol_space.vertex_dofs(wa, c))
                        cols.append(bdofs[ncomp * b + c])
                        vals.append(block[e, a, b])
        return _scatter(np.array(rows), np.array(cols), np.array(vals), shape)

    if kind == "normal_trace":
        if vol_space.family == RT0:
            if bnd_space.family != BOUNDARY_CG1_SCALAR:
                raise AssemblyError("RT0 normal traces pair with a scalar "
                                    "boundary space")
            edge_ids = mesh.boundary_edge_ids[bnd_space.boundary_edge_rows[pos]]
            shape_int = np.einsum("eq,bq->eb", et.wl, et.shape)  # = L/2 each
            for e, p in enumerate(pos):
                ge = edge_ids[e]
                a, b = mesh.edges[ge]
                tang = mesh.vertices[b] - mesh.vertices[a]
                n_global = np.array([tang[1], -tang[0]])
                n_global /= np.hypot(*n_global)
                srel = 1.0 if float(n_global @ et.normals[e]) > 0 else -1.0
                bdofs = bnd_space.dof_map[p]
                for bb in range(2):
                    rows.append(ge)
                    cols.append(bdofs[bb])
                    vals.append(srel * shape_int[e, bb])
            return _scatter(np.array(rows), np.array(cols), np.array(vals),
                            shape)
        if vol_space.family == DG0_SYMTENSOR2:
            if bnd_space.family != BOUNDARY_CG1_VECTOR2:
                raise AssemblyError("tensor normal traces pair with a vector "
                                    "boundary space")
            shape_int = np.einsum("eq,bq->eb", et.wl, et.shape)
            cells = mesh.boundary_cells[bnd_space.boundary_edge_rows[pos]]
            for e, p in enumerate(pos):
                nx, ny = et.normals[e]
                vdofs = vol_space.dof_map[cells[e]]
                bdofs = bnd_space.dof_map[p]
                # rows of E_a . n for a in (11, 12, 22)
                comp = {0: (nx, 0.0), 1: (ny, nx), 2: (0.0, ny)}
                for a in range(3):
                    for bb in range(2):
                        for c in range(2):
                            rows.append(vdofs[a])
                            cols.append(bdofs[2 * bb + c])
                            vals.append(comp[a][c] * shape_int[e, bb])
            return _scatter(np.array(rows), np.array(cols), np.array(vals),
                            shape)
        raise AssemblyError("normal_trace needs an RT0 or DG0-symtensor2 "
                            "volume space")
    raise AssemblyError(f"unknown boundary coupling kind {kind!r}")


def assemble_boundary_mass(bnd_space, coeff=1.0, tags=None,
                           require_positive=False):
    """Edge mass of a boundary space, optionally weighted."""
    mesh = bnd_space.mesh
    pos = _bnd_positions(bnd_space, tags)
    n = bnd_space.n_dofs
    if len(pos) == 0:
        return sp.csr_matrix((n, n))
    et = _EdgeTables(mesh, bnd_space.boundary_edge_rows[pos])
    coeff = as_coefficient(coeff)
    c = coeff.scalar_at(et.xq[..., 0], et.xq[..., 1])
    c = np.broadcast_to(c, et.xq.shape[:2])
    if require_positive and np.any(c <= 0.0):
        e, q = np.unravel_index(np.argmax(c <= 0.0), c.shape)
        raise AssemblyError(
            f"boundary weight is nonpositive at "
            f"({et.xq[e, q, 0]:.6g}, {et.xq[e, q, 1]:.6g})"
        )
    block = np.einsum("eq,aq,bq->eab", et.wl * c, et.shape, et.shape)
    ncomp = {BOUNDARY_CG1_SCALAR: 1, BOUNDARY_CG1_VECTOR2: 2}[bnd_space.family]
    rows, cols, vals = [], [], []
    for e, p in enumerate(pos):
        bdofs = bnd_space.dof_map[p]
        for a in range(2):
            for b in range(2):
                for c_ in range(ncomp):
                    rows.append(bdofs[ncomp * a + c_])
                    cols.append(bdofs[ncomp * b + c_])
                    vals.append(block[e, a, b])
    return _scatter(np.array(rows), np.array(cols), np.array(vals), (n, n))


def assemble_trace_mass(vol_space, tags, coeff=1.0, require_positive=False):
    """Boundary-weighted mass on CG1 volume dofs over the tagged edges.

    Entry (i, j) = integral over the tagged boundary of
    ``coeff * trace(phi_i) * trace(phi_j)``; realizes boundary damping as
    an explicit dissipation block.
    """
    if vol_space.family != CG1_SCALAR:
        raise AssemblyError("trace masses are defined on CG1-scalar spaces")
    mesh = vol_space.mesh
    rows_sel = _edge_rows(mesh, tags)
    n = vol_space.n_dofs
    if len(rows_sel) == 0:
        return sp.csr_matrix((n, n))
    et = _EdgeTables(mesh, rows_sel)
    coeff = as_coefficient(coeff)
    c = np.broadcast_to(coeff.scalar_at(et.xq[..., 0], et.xq[..., 1]),
                        et.xq.shape[:2])
    if require_positive and np.any(c <= 0.0):
        e, q = np.unravel_index(np.argmax(c <= 0.0), c.shape)
        raise AssemblyError(
            f"boundary weight is nonpositive at "
            f"({et.xq[e, q, 0]:.6g}, {et.xq[e, q, 1]:.6g})"
        )
    block = np.einsum("eq,aq,bq->eab", et.wl * c, et.shape, et.shape)
    rows, cols, vals = [], [], []
    for e in range(len(rows_sel)):
        dofs = (et.u[e], et.v[e])
        for a in range(2):
            for b in range(2):
                rows.append(dofs[a])
                cols.append(dofs[b])
                vals.append(block[e, a, b])
    return _scatter(np.array(rows), np.array(cols), np.array(vals), (n, n))


def assemble_normal_trace_weight(q_space, tags, coeff=1.0,
                                 require_positive=False):
    """Diagonal weight on RT0 boundary dofs: integral of coeff over the edge.

    The RT0 normal trace is +-1 on its own edge, so the weighted pairing
    of two traces reduces to the edge integral of the coefficient on the
    dof's diagonal.  Used for impedance feedback in the divergence-causality
    wave system.
    """
    if q_space.family != RT0:
        raise AssemblyError("normal-trace weights are defined on RT0")
    mesh = q_space.mesh
    rows_sel = _edge_rows(mesh, tags)
    n = q_space.n_dofs
    if len(rows_sel) == 0:
        return sp.csr_matrix((n, n))
    et = _EdgeTables(mesh, rows_sel)
    coeff = as_coefficient(coeff)
    c = np.broadcast_to(coeff.scalar_at(et.xq[..., 0], et.xq[..., 1]),
                        et.xq.shape[:2])
    if require_positive and np.any(c <= 0.0):
        e, q = np.unravel_index(np.argmax(c <= 0.0), c.shape)
        raise AssemblyError(
            f"boundary weight is nonpositive at "
            f"({et.xq[e, q, 0]:.6g}, {et.xq[e, q, 1]:.6g})"
        )
    vals = np.einsum("eq->e", et.wl * c)
    ids = mesh.boundary_edge_ids[rows_sel]
    return _scatter(ids, ids, vals, (n, n))


# ---------------------------------------------------------------------------
# State-dependent objects (fast reassembly) and load vectors
# ---------------------------------------------------------------------------

class NodalWeightedMass:
    """Reassembles ``<phi_i, w phi_j>`` fast, for P1 nodal weights ``w``.

    Supports RT0 and CG1-scalar target spaces.  ``assemble`` returns a
    dense array, which downstream code factorizes directly; at the mesh
    sizes this package targets that is faster than rebuilding CSR.
    """

    def __init__(self, space, check_positive=True):
        if space.family not in (RT0, CG1_SCALAR):
            raise AssemblyError("nodal-weighted masses support RT0 and "
                                "CG1-scalar spaces")
        self.space = space
        self.check_positive = check_positive
        tb = _tables(space.mesh)
        self.tables = tb
        if space.family == RT0:
            gram = np.einsum("cq,ciqd,cjqd->cqij", tb.wdet, tb.rt0, tb.rt0)
        else:
            gram = np.einsum("cq,iq,jq->cqij", tb.wdet, tb.p1, tb.p1)
        self.gram = np.ascontiguousarray(gram)
        n = space.n_dofs
        ldof = space.dof_map.shape[1]
        rows = np.repeat(space.dof_map[:, :, None], ldof, axis=2)
        cols = np.repeat(space.dof_map[:, None, :], ldof, axis=1)
        self.flat_index = (rows * n + cols).ravel()
        self.n = n

    def assemble(self, nodal):
        """Dense weighted mass for the given CG1 vertex values."""
        wq = self.tables.nodal_at_qp(np.asarray(nodal, dtype=float))
        if self.check_positive and wq.min() <= 0.0:
            c, q = np.unravel_index(np.argmin(wq), wq.shape)
            x, y = self.tables.xq[c, q]
            raise AssemblyError(
                f"nodal weight is nonpositive at quadrature point "
                f"({x:.6g}, {y:.6g})"
            )
        local = np.einsum("cqij,cq->cij", self.gram, wq)
        flat = np.bincount(self.flat_index, weights=local.ravel(),
                           minlength=self.n * self.n)
        return flat.reshape(self.n, self.n)


def assemble_state_mass(q_space, p_space, nodal_values):
    """RT0 mass weighted by a strictly positive P1 nodal field.

    Raises :class:`AssemblyError` when the field is nonpositive at any
    volume quadrature point (the step-failure signal of the heat model).
    """
    _check_same_mesh(q_space, p_space)
    if q_space.family != RT0 or p_space.family != CG1_SCALAR:
        raise AssemblyError("state masses weigh RT0 by a CG1-scalar field")
    dense = NodalWeightedMass(q_space).assemble(nodal_values)
    return sp.csr_matrix(dense)


class ProductVector:
    """Fast evaluation of ``N_i = integral phi_i * (f . e)`` for RT0 f, e."""

    def __init__(self, sigma_space, q_space):
        mesh = _check_same_mesh(sigma_space, q_space)
        if sigma_space.family != CG1_SCALAR or q_space.family != RT0:
            raise AssemblyError("product vectors pair CG1-scalar tests with "
                                "RT0 fields")
        self.sigma_space = sigma_space
        self.q_space = q_space
        self.tables = _tables(mesh)
        self.cells = mesh.cells
        self.n = sigma_space.n_dofs

    def assemble(self, f_coeffs, e_coeffs):
        tb = self.tables
        f_loc = np.asarray(f_coeffs, dtype=float)[self.q_space.dof_map]
        e_loc = np.asarray(e_coeffs, dtype=float)[self.q_space.dof_map]
        fq = np.einsum("ck,ckqd->cqd", f_loc, tb.rt0)
        eq = np.einsum("ck,ckqd->cqd", e_loc, tb.rt0)
        dots = np.einsum("cqd,cqd->cq", fq, eq)
        contrib = np.einsum("cq,iq->ci", tb.wdet * dots, tb.p1)
        return np.bincount(self.cells.ravel(), weights=contrib.ravel(),
                           minlength=self.n)


def assemble_product_vector(sigma_space, q_space, f_coeffs, e_coeffs):
    """See :class:`ProductVector`; one-shot convenience wrapper."""
    return ProductVector(sigma_space, q_space).assemble(f_coeffs, e_coeffs)


def assemble_load(space, fn):
    """Load vector ``integral phi_i . f`` for initial-data projections.

    ``fn(x, y)`` returns scalars for scalar families and ``(..., 2)``
    arrays for the vector families.
    """
    tb = _tables(space.mesh)
    x, y = tb.xq[..., 0], tb.xq[..., 1]
    fam = space.family
    if fam == CG1_SCALAR:
        vals = np.broadcast_to(np.asarray(fn(x, y), dtype=float), x.shape)
        contrib = np.einsum("cq,iq->ci", tb.wdet * vals, tb.p1)
    elif fam == RT0:
        vals = np.asarray(fn(x, y), dtype=float)
        contrib = np.einsum("cq,ciqd,cqd->ci", tb.wdet, tb.rt0, vals)
    elif fam == CG1_VECTOR2:
        vals = np.asarray(fn(x, y), dtype=float)
        c3 = np.einsum("cq,iq,cqd->cid", tb.wdet, tb.p1, vals)
        contrib = np.stack([c3[:, v, c] for v in range(3) for c in range(2)],
                           axis=1)
    else:
        raise AssemblyError(f"no load vector for family {fam!r}")
    return np.bincount(space.dof_map.ravel(), weights=contrib.ravel(),
                       minlength=space.n_dofs)
