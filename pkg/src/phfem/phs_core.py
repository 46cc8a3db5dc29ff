"""Finite-dimensional port-Hamiltonian systems and structure checks.

A system is the quadruple (M, J, R, B): a block-diagonal SPD co-energy
mass M, a skew structure matrix J, a symmetric positive semidefinite
dissipation R, and one coupling block B with boundary mass per control
port.  Constrained systems additionally carry a coupling G with the
constraint signal and its time derivative; the flow then satisfies
``M de/dt = (J - R) e + sum_i B_i u_i + G lambda`` with
``G^T e = value(t)``.

The defining structural identity -- the rate of ``H = e^T M e / 2``
equals supplied minus dissipated power -- is checked numerically by
:func:`validate_structure` and :func:`power_residual`.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla


class SolverError(Exception):
    """Singular or badly conditioned linear system."""


class LinearSolver:
    """Direct sparse LU with one step of iterative refinement."""

    def __init__(self, A):
        self.A = sp.csc_matrix(A)
        if self.A.shape[0] == 0:
            raise SolverError("cannot factorize an empty matrix")
        try:
            self.lu = spla.splu(self.A)
        except RuntimeError as err:
            raise SolverError(f"factorization failed: {err}") from None

    def solve(self, b, refine=1):
        x = self.lu.solve(b)
        for _ in range(refine):
            r = b - self.A @ x
            x = x + self.lu.solve(r)
        return x


@dataclass
class ControlPort:
    """One collocated boundary port: coupling B, boundary mass, input u(t)."""

    name: str
    B: sp.spmatrix
    M_bnd: sp.spmatrix
    u: callable = None           # t -> input coefficient vector
    _lu: LinearSolver = field(default=None, repr=False, compare=False)

    @property
    def dim(self):
        return self.B.shape[1]

    def input_at(self, t):
        if self.u is None:
            return np.zeros(self.dim)
        return np.asarray(self.u(t), dtype=float)

    def boundary_solver(self):
        if self._lu is None:
            self._lu = LinearSolver(self.M_bnd)
        return self._lu


@dataclass
class Constraint:
    """Coupling G with constraint signal c(t) and derivative c'(t)."""

    G: sp.spmatrix
    value: callable
    derivative: callable

    @property
    def dim(self):
        return self.G.shape[1]


@dataclass
class PHLinearSystem:
    """Linear port-Hamiltonian system in co-energy form."""

    M: sp.spmatrix
    J: sp.spmatrix
    R: sp.spmatrix | None = None
    ports: list = field(default_factory=list)
    constraint: Constraint | None = None
    blocks: dict = field(default_factory=dict)    # name -> slice of the state
    _m_lu: LinearSolver = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        self.M = sp.csr_matrix(self.M)
        self.J = sp.csr_matrix(self.J)
        if self.R is not None:
            self.R = sp.csr_matrix(self.R)

    @property
    def n(self):
        return self.M.shape[0]

    def J_minus_R(self):
        return self.J if self.R is None else (self.J - self.R).tocsr()

    def mass_solver(self):
        if self._m_lu is None:
            self._m_lu = LinearSolver(self.M)
        return self._m_lu

    def rhs(self, t, e):
        """(J - R) e + sum_i B_i u_i(t)."""
        out = self.J_minus_R() @ e
        for port in self.ports:
            out = out + port.B @ port.input_at(t)
        return out


def hamiltonian(sys, e):
    """Quadratic energy ``e^T M e / 2`` of a co-energy state."""
    e = np.asarray(e, dtype=float)
    if e.shape != (sys.n,):
        raise ValueError(f"state has length {e.shape}, expected {sys.n}")
    return 0.5 * float(e @ (sys.M @ e))


def observe(sys, e):
    """Collocated outputs: solves ``M_bnd y = B^T e`` per port.

    Returns a dict keyed by port name.
    """
    e = np.asarray(e, dtype=float)
    out = {}
    for port in sys.ports:
        if port.dim == 0:
            raise SolverError(
                f"port {port.name!r} has an empty boundary space"
            )
        out[port.name] = port.boundary_solver().solve(port.B.T @ e)
    return out


def power_residual(sys, e, u=None):
    """Defect of the instantaneous power balance at state ``e``.

    ``u`` maps port names to input vectors (missing ports read as zero).
    Returns ``|e^T M de/dt - (sum_i u_i^T B_i^T e - e^T R e)|`` where
    ``M de/dt`` is the assembled right-hand side; for a skew J this is a
    roundoff-level quantity.
    """
    e = np.asarray(e, dtype=float)
    u = dict(u or {})
    rhs = sys.J_minus_R() @ e
    supplied = 0.0
    for port in sys.ports:
        ui = np.asarray(u.get(port.name, np.zeros(port.dim)), dtype=float)
        rhs = rhs + port.B @ ui
        supplied += float(ui @ (port.B.T @ e))
    dissipated = float(e @ (sys.R @ e)) if sys.R is not None else 0.0
    return abs(float(e @ rhs) - (supplied - dissipated))


@dataclass
class StructureReport:
    """Numerical structure diagnostics of an assembled system."""

    skew_defect: float            # max |J + J^T| / max |J|
    r_asymmetry: float            # max |R - R^T| / max |R| (0 when R absent)
    r_min_rayleigh: float         # min x^T R x / ||x||^2 over samples
    m_min_rayleigh: float         # min x^T M x / ||x||^2 over samples
    dirac_defect: float           # relative defect of the bilinear pairing

    def ok(self, tol=1e-12):
        return (self.skew_defect <= tol and self.r_asymmetry <= 10 * tol
                and self.r_min_rayleigh >= -10 * tol
                and self.m_min_rayleigh > 0.0 and self.dirac_defect <= tol)

    def summary(self):
        return (f"skew defect {self.skew_defect:.3e}, "
                f"R asymmetry {self.r_asymmetry:.3e}, "
                f"min Rayleigh(R) {self.r_min_rayleigh:.3e}, "
                f"min Rayleigh(M) {self.m_min_rayleigh:.3e}, "
                f"Dirac pairing defect {self.dirac_defect:.3e}")


def _max_abs(A):
    return abs(A).max() if A.nnz else 0.0


def validate_structure(sys, samples=20, seed=0):
    """Report skewness, dissipation and mass defects plus the Dirac pairing.

    The pairing check draws random efforts e and inputs u, forms the flow
    f = M^-1 (J e + B u) and the outputs y = M_bnd^-1 B^T e, and measures
    ``e^T M f + u^T M_bnd f_bnd`` with ``f_bnd = -y``, which vanishes for
    an exact kernel representation.
    """
    rng = np.random.default_rng(seed)
    skew = _max_abs((sys.J + sys.J.T).tocsr())
    jmax = _max_abs(sys.J)
    skew_defect = skew / jmax if jmax > 0 else skew

    if sys.R is None or sys.R.nnz == 0:
        r_asym = 0.0
        r_min = 0.0
    else:
        rmax = _max_abs(sys.R)
        r_asym = _max_abs((sys.R - sys.R.T).tocsr()) / rmax
        r_min = np.inf
        for _ in range(samples):
            x = rng.standard_normal(sys.n)
            r_min = min(r_min,
                        float(x @ (sys.R @ x)) / (float(x @ x) * rmax))

    m_min = np.inf
    for _ in range(samples):
        x = rng.standard_normal(sys.n)
        m_min = min(m_min, float(x @ (sys.M @ x)) / float(x @ x))

    m_lu = sys.mass_solver()
    defect = 0.0
    for _ in range(samples):
        e = rng.standard_normal(sys.n)
        rhs = sys.J @ e
        pairing = 0.0
        scale = 0.0
        for port in sys.ports:
            ui = rng.standard_normal(port.dim)
            rhs = rhs + port.B @ ui
            y = port.boundary_solver().solve(port.B.T @ e)
            term = float(ui @ (port.M_bnd @ y))
            pairing -= term          # f_bnd = -y
            scale += abs(term)
        f = m_lu.solve(rhs)
        emf = float(e @ (sys.M @ f))
        pairing += emf
        scale += abs(emf) + 1e-300
        defect = max(defect, abs(pairing) / scale)

    return StructureReport(skew_defect=skew_defect, r_asymmetry=r_asym,
                           r_min_rayleigh=r_min, m_min_rayleigh=m_min,
                           dirac_defect=defect)
