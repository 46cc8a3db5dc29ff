"""Triangular meshes with tagged boundaries.

Meshes are plain index-based triangulations of planar domains: a vertex
coordinate table, counter-clockwise oriented triangles, and a list of
boundary edges tagged by the side of the domain they lie on (``G1`` left,
``G2`` bottom, ``G3`` right, ``G4`` top for rectangles, ``OTHER`` else).
Structured rectangles are generated natively; unstructured meshes are read
from Gmsh MSH 2.2 ASCII files.

A mesh is immutable after construction (its arrays are marked read-only),
so it can be shared freely between spaces and assembled operators.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np


class BoundaryTag(enum.IntEnum):
    """Boundary side labels; G1..G4 are the left/bottom/right/top sides."""

    G1 = 1
    G2 = 2
    G3 = 3
    G4 = 4
    OTHER = 0


ALL_TAGS = frozenset(BoundaryTag)
RECTANGLE_TAGS = frozenset(
    {BoundaryTag.G1, BoundaryTag.G2, BoundaryTag.G3, BoundaryTag.G4}
)


class MeshError(Exception):
    """Invalid mesh topology or geometry."""


class MshParseError(Exception):
    """Malformed MSH input; carries the 1-based offending line number."""

    def __init__(self, message, lineno=None):
        self.lineno = lineno
        if lineno is not None:
            message = f"line {lineno}: {message}"
        super().__init__(message)


@dataclass
class CellGeometry:
    """Per-cell geometry: area, reference-to-physical map and edge data.

    The affine map is ``x = jacobian @ xi + origin`` with the reference
    triangle (0,0), (1,0), (0,1).  Local edge k is the edge opposite local
    vertex k; normals are outward unit normals.
    """

    area: float
    jacobian: np.ndarray          # (2, 2)
    origin: np.ndarray            # (2,)
    edge_lengths: np.ndarray      # (3,)
    normals: np.ndarray           # (3, 2) outward unit normals


@dataclass
class Mesh:
    """Immutable 2D triangle mesh with tagged boundary edges.

    Attributes
    ----------
    vertices : (nv, 2) float array
    cells : (nc, 3) int array
        Vertex indices per triangle, counter-clockwise.
    boundary_vertices_of_edge : (nb, 2) int array
        Endpoints of each boundary edge, in the cell's traversal order.
    boundary_cells : (nb,) int array
        Owning cell of each boundary edge.
    boundary_tags : (nb,) int array
        ``BoundaryTag`` value per boundary edge.
    """

    vertices: np.ndarray
    cells: np.ndarray
    boundary_vertices_of_edge: np.ndarray
    boundary_cells: np.ndarray
    boundary_tags: np.ndarray
    _edge_cache: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        self.vertices = np.ascontiguousarray(self.vertices, dtype=float)
        self.cells = np.ascontiguousarray(self.cells, dtype=np.int64)
        self.boundary_vertices_of_edge = np.ascontiguousarray(
            self.boundary_vertices_of_edge, dtype=np.int64
        ).reshape(-1, 2)
        self.boundary_cells = np.ascontiguousarray(
            self.boundary_cells, dtype=np.int64
        )
        self.boundary_tags = np.ascontiguousarray(
            self.boundary_tags, dtype=np.int64
        )
        if self.cells.size and self.cells.max() >= len(self.vertices):
            raise MeshError("cell refers to a vertex that does not exist")
        areas = self.signed_areas()
        bad = np.nonzero(areas <= 0.0)[0]
        if bad.size:
            raise MeshError(
                f"cells {bad.tolist()} have nonpositive signed area "
                "(degenerate or clockwise)"
            )
        for arr in (self.vertices, self.cells, self.boundary_vertices_of_edge,
                    self.boundary_cells, self.boundary_tags):
            arr.setflags(write=False)

    # -- basic counts ---------------------------------------------------

    @property
    def num_vertices(self):
        return len(self.vertices)

    @property
    def num_cells(self):
        return len(self.cells)

    @property
    def num_boundary_edges(self):
        return len(self.boundary_vertices_of_edge)

    @property
    def num_edges(self):
        return len(self.edges)

    # -- geometry --------------------------------------------------------

    def signed_areas(self):
        p = self.vertices[self.cells]
        d1 = p[:, 1] - p[:, 0]
        d2 = p[:, 2] - p[:, 0]
        return 0.5 * (d1[:, 0] * d2[:, 1] - d1[:, 1] * d2[:, 0])

    def areas(self):
        return self.signed_areas()

    # -- edge topology (built once, cached) -------------------------------

    def _build_edges(self):
        index = {}
        edges = []
        cell_edges = np.empty((self.num_cells, 3), dtype=np.int64)
        cell_edge_signs = np.empty((self.num_cells, 3), dtype=np.int8)
        edge_cells = []
        # local edge k is opposite local vertex k: (k+1, k+2) mod 3
        for c, (v0, v1, v2) in enumerate(self.cells):
            for k, (a, b) in enumerate(((v1, v2), (v2, v0), (v0, v1))):
                key = (a, b) if a < b else (b, a)
                e = index.get(key)
                if e is None:
                    e = len(edges)
                    index[key] = e
                    edges.append(key)
                    edge_cells.append([c, -1])
                else:
                    if edge_cells[e][1] != -1:
                        raise MeshError(
                            f"edge {key} is shared by more than two cells"
                        )
                    edge_cells[e][1] = c
                cell_edges[c, k] = e
                cell_edge_signs[c, k] = 1 if a < b else -1
        cache = {
            "edges": np.array(edges, dtype=np.int64).reshape(-1, 2),
            "cell_edges": cell_edges,
            "cell_edge_signs": cell_edge_signs,
            "edge_cells": np.array(edge_cells, dtype=np.int64).reshape(-1, 2),
            "edge_index": index,
        }
        for arr in cache.values():
            if isinstance(arr, np.ndarray):
                arr.setflags(write=False)
        self._edge_cache.update(cache)

    def _edges(self, key):
        if key not in self._edge_cache:
            self._build_edges()
        return self._edge_cache[key]

    @property
    def edges(self):
        """(ne, 2) array of vertex pairs, each sorted ascending."""
        return self._edges("edges")

    @property
    def cell_edges(self):
        """(nc, 3) global edge index of each local edge."""
        return self._edges("cell_edges")

    @property
    def cell_edge_signs(self):
        """(nc, 3) +1 where the cell traverses the edge low-to-high vertex."""
        return self._edges("cell_edge_signs")

    @property
    def edge_cells(self):
        """(ne, 2) adjacent cells per edge, -1 for missing neighbour."""
        return self._edges("edge_cells")

    def edge_index(self, u, v):
        """Global index of edge {u, v}."""
        key = (u, v) if u < v else (v, u)
        return self._edges("edge_index")[key]

    @property
    def boundary_edge_ids(self):
        """(nb,) global edge index of each tagged boundary edge."""
        if "boundary_edge_ids" not in self._edge_cache:
            ids = np.array(
                [self.edge_index(u, v)
                 for u, v in self.boundary_vertices_of_edge],
                dtype=np.int64,
            )
            ids.setflags(write=False)
            self._edge_cache["boundary_edge_ids"] = ids
        return self._edge_cache["boundary_edge_ids"]

    def boundary_vertices(self, tags=None):
        """Sorted array of vertices on boundary edges with the given tags."""
        if tags is None:
            tags = ALL_TAGS
        wanted = {int(t) for t in tags}
        mask = np.isin(self.boundary_tags, sorted(wanted))
        verts = np.unique(self.boundary_vertices_of_edge[mask])
        return verts

    # -- validation --------------------------------------------------------

    def validate(self, domain=None, rtol=1e-12):
        """Check all mesh invariants; raise :class:`MeshError` on failure.

        With ``domain=(x0, xL, y0, yL)`` the G1..G4 tags are additionally
        checked against the rectangle sides within ``rtol`` of its extent.
        """
        ec = self.edge_cells
        interior = ec[:, 1] >= 0
        boundary_ids = set(np.nonzero(~interior)[0].tolist())
        tagged_ids = set(self.boundary_edge_ids.tolist())
        if boundary_ids != tagged_ids:
            raise MeshError(
                "tagged boundary edges do not match the one-cell edges of "
                f"the triangulation ({len(tagged_ids)} tagged, "
                f"{len(boundary_ids)} topological)"
            )
        for (u, v), c in zip(self.boundary_vertices_of_edge,
                             self.boundary_cells):
            if c < 0 or c >= self.num_cells:
                raise MeshError(f"boundary edge ({u},{v}) has bad cell {c}")
            if not {u, v} <= set(self.cells[c].tolist()):
                raise MeshError(
                    f"boundary edge ({u},{v}) not part of its cell {c}"
                )
        # closed loops: every boundary vertex has exactly two boundary edges
        counts = np.bincount(
            self.boundary_vertices_of_edge.ravel(), minlength=self.num_vertices
        )
        open_verts = np.nonzero((counts != 0) & (counts != 2))[0]
        if open_verts.size:
            raise MeshError(
                f"boundary is not a union of closed loops at vertices "
                f"{open_verts.tolist()}"
            )
        if domain is not None:
            x0, xL, y0, yL = domain
            tol = rtol * max(xL - x0, yL - y0)
            lines = {
                BoundaryTag.G1: (0, x0),
                BoundaryTag.G2: (1, y0),
                BoundaryTag.G3: (0, xL),
                BoundaryTag.G4: (1, yL),
            }
            for (u, v), tag in zip(self.boundary_vertices_of_edge,
                                   self.boundary_tags):
                axis, value = lines[BoundaryTag(tag)]
                for w in (u, v):
                    if abs(self.vertices[w, axis] - value) > tol:
                        raise MeshError(
                            f"vertex {w} of a {BoundaryTag(tag).name} edge is "
                            f"off the expected side"
                        )


def generate_rectangle(nx, ny, x0=0.0, xL=1.0, y0=0.0, yL=1.0):
    """Structured triangulation of the rectangle [x0, xL] x [y0, yL].

    Every grid quad is split along its bottom-left to top-right diagonal,
    giving ``2*nx*ny`` cells over ``(nx+1)*(ny+1)`` vertices.  Boundary
    edges are tagged G1 (x=x0), G2 (y=y0), G3 (x=xL), G4 (y=yL).
    """
    if nx < 1 or ny < 1:
        raise ValueError(f"subdivision counts must be positive, got {nx}x{ny}")
    if not (xL > x0 and yL > y0):
        raise ValueError("domain extents must satisfy xL > x0 and yL > y0")
    xs = np.linspace(x0, xL, nx + 1)
    ys = np.linspace(y0, yL, ny + 1)
    X, Y = np.meshgrid(xs, ys)
    vertices = np.column_stack([X.ravel(), Y.ravel()])

    def vid(i, j):
        return j * (nx + 1) + i

    cells = []
    quad_cells = {}
    for j in range(ny):
        for i in range(nx):
            a, b = vid(i, j), vid(i + 1, j)
            c, d = vid(i + 1, j + 1), vid(i, j + 1)
            quad_cells[i, j] = len(cells)
            cells.append((a, b, c))   # below the a->c diagonal
            cells.append((a, c, d))   # above it

    bedges, bcells, btags = [], [], []
    for j in range(ny):  # left/right sides
        bedges.append((vid(0, j + 1), vid(0, j)))
        bcells.append(quad_cells[0, j] + 1)
        btags.append(BoundaryTag.G1)
        bedges.append((vid(nx, j), vid(nx, j + 1)))
        bcells.append(quad_cells[nx - 1, j])
        btags.append(BoundaryTag.G3)
    for i in range(nx):  # bottom/top sides
        bedges.append((vid(i, 0), vid(i + 1, 0)))
        bcells.append(quad_cells[i, 0])
        btags.append(BoundaryTag.G2)
        bedges.append((vid(i + 1, ny), vid(i, ny)))
        bcells.append(quad_cells[i, ny - 1] + 1)
        btags.append(BoundaryTag.G4)

    mesh = Mesh(vertices, np.array(cells), np.array(bedges),
                np.array(bcells), np.array(btags, dtype=np.int64))
    mesh.validate(domain=(x0, xL, y0, yL))
    return mesh


def cell_geometry(mesh, cell):
    """Geometry of one cell; raises ``IndexError`` for a bad index."""
    if not 0 <= cell < mesh.num_cells:
        raise IndexError(f"cell index {cell} out of range")
    p = mesh.vertices[mesh.cells[cell]]
    jac = np.column_stack([p[1] - p[0], p[2] - p[0]])
    area = 0.5 * abs(np.linalg.det(jac))
    lengths = np.empty(3)
    normals = np.empty((3, 2))
    for k in range(3):
        a, b = p[(k + 1) % 3], p[(k + 2) % 3]
        t = b - a
        lengths[k] = np.hypot(*t)
        normals[k] = np.array([t[1], -t[0]]) / lengths[k]
    return CellGeometry(area=area, jacobian=jac, origin=p[0].copy(),
                        edge_lengths=lengths, normals=normals)


def refine_uniform(mesh, levels):
    """Refine ``levels`` times by edge midpoints (4 children per cell)."""
    if levels < 0:
        raise ValueError("levels must be nonnegative")
    for _ in range(levels):
        mesh = _refine_once(mesh)
    return mesh


def _refine_once(mesh):
    vertices = [mesh.vertices]
    midpoint = {}

    def mid(u, v):
        key = (u, v) if u < v else (v, u)
        m = midpoint.get(key)
        if m is None:
            m = mesh.num_vertices + len(midpoint)
            midpoint[key] = m
            vertices.append(
                0.5 * (mesh.vertices[key[0]] + mesh.vertices[key[1]])
            )
        return m

    cells = []
    child = {}
    for c, (a, b, d) in enumerate(mesh.cells):
        mab, mbd, mda = mid(a, b), mid(b, d), mid(d, a)
        child[c] = len(cells)
        cells.extend([(a, mab, mda), (mab, b, mbd),
                      (mda, mbd, d), (mab, mbd, mda)])

    new_vertices = np.vstack(
        [vertices[0]] + [v.reshape(1, 2) for v in vertices[1:]]
    ) if len(vertices) > 1 else vertices[0]

    cells = np.array(cells)
    bedges, bcells, btags = [], [], []
    for (u, v), c, tag in zip(mesh.boundary_vertices_of_edge,
                              mesh.boundary_cells, mesh.boundary_tags):
        m = midpoint[(u, v) if u < v else (v, u)]
        for half in ((u, m), (m, v)):
            owner = -1
            for cc in range(child[c], child[c] + 4):
                if {half[0], half[1]} <= set(cells[cc].tolist()):
                    owner = cc
                    break
            if owner < 0:
                raise MeshError("refined boundary edge lost its cell")
            bedges.append(half)
            bcells.append(owner)
            btags.append(tag)

    return Mesh(new_vertices, cells, np.array(bedges),
                np.array(bcells), np.array(btags, dtype=np.int64))


def single_triangle(p0=(0.0, 0.0), p1=(1.0, 0.0), p2=(0.0, 1.0)):
    """One-cell mesh, handy for element-level checks; edges tagged OTHER."""
    vertices = np.array([p0, p1, p2], dtype=float)
    cells = np.array([[0, 1, 2]])
    bedges = np.array([[0, 1], [1, 2], [2, 0]])
    bcells = np.zeros(3, dtype=np.int64)
    btags = np.full(3, int(BoundaryTag.OTHER), dtype=np.int64)
    return Mesh(vertices, cells, bedges, bcells, btags)


# ---------------------------------------------------------------------------
# Gmsh MSH 2.2 ASCII reader
# ---------------------------------------------------------------------------

_TAG_FROM_PHYSICAL = {1: BoundaryTag.G1, 2: BoundaryTag.G2,
                      3: BoundaryTag.G3, 4: BoundaryTag.G4}


def read_msh(source):
    """Read a Gmsh MSH 2.2 ASCII mesh.

    ``source`` may be text, bytes, or a readable file object.  Only 2-node
    line elements (boundary edges; physical tags 1..4 map to G1..G4) and
    3-node triangles are accepted.  Triangles listed clockwise are stored
    counter-clockwise.
    """
    if hasattr(source, "read"):
        source = source.read()
    if isinstance(source, bytes):
        source = source.decode("ascii")
    lines = source.splitlines()

    sections = {}
    i = 0
    while i < len(lines):
        name = lines[i].strip()
        if name.startswith("$") and not name.startswith("$End"):
            end = f"$End{name[1:]}"
            j = i + 1
            while j < len(lines) and lines[j].strip() != end:
                j += 1
            if j == len(lines):
                raise MshParseError(f"section {name} is never closed", i + 1)
            sections[name] = (i + 1, j)  # slice of content lines
            i = j + 1
        else:
            i += 1

    for required in ("$MeshFormat", "$Nodes", "$Elements"):
        if required not in sections:
            raise MshParseError(f"missing required section {required}")

    start, _ = sections["$MeshFormat"]
    fmt = lines[start].split()
    if not fmt or not fmt[0].startswith("2.2"):
        raise MshParseError(
            f"unsupported MSH version {fmt[0] if fmt else '?'}", start + 1
        )

    start, end = sections["$Nodes"]
    try:
        nnodes = int(lines[start].split()[0])
    except (ValueError, IndexError):
        raise MshParseError("bad node count", start + 1) from None
    if end - start - 1 != nnodes:
        raise MshParseError(
            f"expected {nnodes} node lines, found {end - start - 1}",
            start + 1,
        )
    node_ids = {}
    coords = np.empty((nnodes, 2))
    for k in range(nnodes):
        lineno = start + 1 + k
        parts = lines[lineno].split()
        if len(parts) < 4:
            raise MshParseError("node line needs 'id x y z'", lineno + 1)
        try:
            nid = int(parts[0])
            coords[k] = (float(parts[1]), float(parts[2]))
        except ValueError:
            raise MshParseError("malformed node line", lineno + 1) from None
        node_ids[nid] = k

    start, end = sections["$Elements"]
    try:
        nelem = int(lines[start].split()[0])
    except (ValueError, IndexError):
        raise MshParseError("bad element count", start + 1) from None
    if end - start - 1 != nelem:
        raise MshParseError(
            f"expected {nelem} element lines, found {end - start - 1}",
            start + 1,
        )

    cells = []
    raw_lines = []
    for k in range(nelem):
        lineno = start + 1 + k
        parts = lines[lineno].split()
        try:
            etype = int(parts[1])
            ntags = int(parts[2])
            tags = [int(p) for p in parts[3:3 + ntags]]
            nodes = [int(p) for p in parts[3 + ntags:]]
        except (ValueError, IndexError):
            raise MshParseError("malformed element line", lineno + 1) from None
        try:
            nodes = [node_ids[n] for n in nodes]
        except KeyError as missing:
            raise MshParseError(
                f"element refers to unknown node {missing.args[0]}",
                lineno + 1,
            ) from None
        if etype == 1:
            if len(nodes) != 2:
                raise MshParseError("line element needs 2 nodes", lineno + 1)
            phys = tags[0] if tags else 0
            raw_lines.append((nodes[0], nodes[1],
                              _TAG_FROM_PHYSICAL.get(phys, BoundaryTag.OTHER)))
        elif etype == 2:
            if len(nodes) != 3:
                raise MshParseError("triangle needs 3 nodes", lineno + 1)
            a, b, c = nodes
            p = coords[[a, b, c]]
            area2 = ((p[1, 0] - p[0, 0]) * (p[2, 1] - p[0, 1])
                     - (p[1, 1] - p[0, 1]) * (p[2, 0] - p[0, 0]))
            if area2 < 0:
                a, b, c = a, c, b
            cells.append((a, b, c))
        else:
            raise MshParseError(
                f"unsupported element type {etype} "
                "(only 2-node lines and 3-node triangles)",
                lineno + 1,
            )

    if not cells:
        raise MshParseError("mesh contains no triangles")
    cells = np.array(cells)

    # attach boundary lines to their owning cell
    edge_owner = {}
    for c, (v0, v1, v2) in enumerate(cells):
        for a, b in ((v1, v2), (v2, v0), (v0, v1)):
            key = (a, b) if a < b else (b, a)
            edge_owner.setdefault(key, []).append(c)

    bedges, bcells, btags = [], [], []
    for u, v, tag in raw_lines:
        key = (u, v) if u < v else (v, u)
        owners = edge_owner.get(key)
        if not owners:
            raise MshParseError(
                f"boundary line ({u},{v}) does not match any triangle edge"
            )
        if len(owners) != 1:
            raise MshParseError(
                f"boundary line ({u},{v}) lies between two triangles"
            )
        bedges.append((u, v))
        bcells.append(owners[0])
        btags.append(tag)

    if not bedges:
        raise MshParseError("mesh contains no boundary line elements")
    mesh = Mesh(coords, cells, np.array(bedges), np.array(bcells),
                np.array(btags, dtype=np.int64))
    mesh.validate()
    return mesh
