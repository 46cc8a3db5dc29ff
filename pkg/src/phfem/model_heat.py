"""Boundary-controlled heat dynamics as a nonlinear pHDAE.

The state is the entropy density (CG1 coefficients); temperature, entropy
flux and entropy production are recovered each step through the closures

* linear heat capacity: ``M_s alpha_s = M_rcv e_s``,
* nonlinear conduction: ``Lambda f_S = M[e_s] e_S`` with the
  temperature-weighted RT0 mass reassembled every step,
* entropy-production projection: ``M[e_s]_sigma e_sigma = -N(f_S, e_S)``
  with ``N_i = integral phi_i (f_S . e_S)``.

The closure for the production term is a weighted projection of the
pointwise relation ``temperature * production = f_S . e_S``; because the
scalar test space contains constants and every object shares one
quadrature rule, the semi-discrete first law
``e_s^T M_s d(alpha_s)/dt = u^T M_bnd y`` holds to roundoff, which
:func:`heat_power_residual` measures.  Time stepping is staged forward
Euler; the energy ``H = alpha_s^T M_s e_s / 2`` is the quadratic form
whose gradient matches the discrete capacity relation.

The stepper keeps dense factorizations (desk-scale meshes); everything
state-independent is factored once.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg as la
import scipy.sparse as sp

from . import assembly, fem, integrators, mesh as meshmod
from .assembly import AssemblyError, CoefficientField
from .integrators import HamiltonianTrace, Trajectory
from .model_wave import as_spatial, boundary_signal, check_positive
from .phs_core import ControlPort, PHLinearSystem


class HeatStepError(integrators.IntegrationError):
    """Nonpositive temperature or failed stage solve, with a time stamp."""


@dataclass
class GaussianBump:
    """Gaussian profile ``ampl * exp(-((x-cx)/sx)^2 - ((y-cy)/sy)^2) + offset``."""

    ampl: float = 1000.0
    sx: float = 1.0 / 3.0
    sy: float = 1.0 / 6.0
    cx: float = 1.0
    cy: float = 0.5
    offset: float = 1000.0

    def __call__(self, x, y):
        x = np.asarray(x, dtype=float)
        y = np.asarray(y, dtype=float)
        return (self.ampl * np.exp(-((x - self.cx) / self.sx) ** 2
                                   - ((y - self.cy) / self.sy) ** 2)
                + self.offset)


@dataclass
class HeatConfig:
    """Coefficients, initial data, boundary control and run settings."""

    x0: float = 0.0
    xL: float = 2.0
    y0: float = 0.0
    yL: float = 1.0
    nx: int = 6
    ny: int = 3
    refine: int = 0
    mesh: meshmod.Mesh | None = None
    rho: object = 1.0
    cv: object = 1.0
    lam11: object = 1.0
    lam12: object = 0.0
    lam22: object = 1.0
    au0: object = None             # initial entropy density
    eu0: object = None             # initial temperature (used if au0 absent)
    ub_tm0: object = None
    ub_sp0: object = None
    ub_tm1: object = None
    ub_sp1: object = None
    ti: float = 0.0
    tf: float = 1.0
    dt: float = 1e-3
    snapshot_stride: int = 50

    def build_mesh(self):
        m = self.mesh
        if m is None:
            m = meshmod.generate_rectangle(self.nx, self.ny, self.x0,
                                           self.xL, self.y0, self.yL)
        return meshmod.refine_uniform(m, self.refine)


@dataclass
class HeatState:
    """Staged quantities of one evaluation; `f_sigma` equals `e_s`."""

    t: float
    alpha_s: np.ndarray
    e_s: np.ndarray
    f_S: np.ndarray
    e_S: np.ndarray
    f_sigma: np.ndarray
    e_sigma: np.ndarray
    y_b: np.ndarray
    alpha_dot: np.ndarray
    u: np.ndarray


class HeatOperators:
    """Assembled matrices, factorizations and reassembly workspaces."""

    def __init__(self, mesh, config):
        cfg = config
        self.mesh = mesh
        self.config = cfg
        self.p_space = fem.build_space(mesh, fem.CG1_SCALAR)
        self.q_space = fem.build_space(mesh, fem.RT0)
        tags = frozenset(meshmod.BoundaryTag(t)
                         for t in np.unique(mesh.boundary_tags))
        self.b_space = fem.build_space(mesh, fem.BOUNDARY_CG1_SCALAR,
                                       boundary_tags=tags)

        tables = assembly._tables(mesh)
        rho = as_spatial(cfg.rho, 1.0)
        cv = as_spatial(cfg.cv, 1.0)
        check_positive(rho, tables, "mass density")
        check_positive(cv, tables, "heat capacity")

        def rho_cv(x, y):
            return rho(x, y) * cv(x, y)

        lam = CoefficientField.tensor(as_spatial(cfg.lam11, 1.0),
                                      as_spatial(cfg.lam12, 0.0),
                                      as_spatial(cfg.lam22, 1.0))

        self.Ms_sp = assembly.assemble_mass(self.p_space)
        self.Mrcv_sp = assembly.assemble_mass(
            self.p_space, CoefficientField.scalar(rho_cv))
        self.MS_sp = assembly.assemble_mass(self.q_space)
        self.Lam_sp = assembly.assemble_mass(self.q_space, lam,
                                             check_spd=True)
        # D = <phi_s, -div psi_S>; B0 carries the sign that preserves the
        # uniform steady state (control equal to the temperature trace
        # yields a vanishing entropy-flux equation)
        self.D_sp = (-assembly.assemble_d_div(self.p_space,
                                              self.q_space)).tocsr()
        self.B0_sp = (-assembly.assemble_boundary_coupling(
            self.q_space, self.b_space, "normal_trace")).tocsr()
        self.Mb_sp = assembly.assemble_boundary_mass(self.b_space)

        # dense stepping kernel
        self.Ms = self.Ms_sp.toarray()
        self.Mrcv = self.Mrcv_sp.toarray()
        self.MS = self.MS_sp.toarray()
        self.Lam = self.Lam_sp.toarray()
        self.D = self.D_sp.toarray()
        self.B0 = self.B0_sp.toarray()
        self.Mb = self.Mb_sp.toarray()
        self.cho_Ms = la.cho_factor(self.Ms)
        self.cho_Mrcv = la.cho_factor(self.Mrcv)
        self.cho_MS = la.cho_factor(self.MS)
        self.cho_Mb = la.cho_factor(self.Mb)

        self.weighted_q = assembly.NodalWeightedMass(self.q_space)
        self.weighted_p = assembly.NodalWeightedMass(self.p_space)
        self.product = assembly.ProductVector(self.p_space, self.q_space)

        self.control = boundary_signal(cfg.ub_tm0, cfg.ub_sp0, cfg.ub_tm1,
                                       cfg.ub_sp1, self.b_space)

    def initial_entropy(self):
        cfg = self.config
        verts = self.mesh.vertices
        if cfg.au0 is not None:
            fn = as_spatial(cfg.au0)
            return fn(verts[:, 0], verts[:, 1])
        if cfg.eu0 is not None:
            fn = (cfg.eu0 if isinstance(cfg.eu0, GaussianBump)
                  else as_spatial(cfg.eu0))
            e_s0 = fn(verts[:, 0], verts[:, 1])
            return la.cho_solve(self.cho_Ms, self.Mrcv @ e_s0)
        raise ValueError("heat config needs au0 or eu0 initial data")

    def as_structure_system(self):
        """Constant Dirac skeleton of the pHDAE, for structure validation."""
        n_p, n_q = self.p_space.n_dofs, self.q_space.n_dofs
        M = sp.block_diag([self.Ms_sp, self.MS_sp, self.Ms_sp],
                          format="csr")
        J = sp.bmat([
            [None, self.D_sp, -self.Ms_sp],
            [-self.D_sp.T, None, None],
            [self.Ms_sp, None, None],
        ], format="csr")
        B = sp.bmat([[sp.csr_matrix((n_p, self.b_space.n_dofs))],
                     [self.B0_sp],
                     [sp.csr_matrix((n_p, self.b_space.n_dofs))]],
                    format="csr")
        port = ControlPort(name="boundary", B=B, M_bnd=self.Mb_sp,
                           u=self.control)
        return PHLinearSystem(M=M, J=J, R=None, ports=[port],
                              blocks={"s": slice(0, n_p),
                                      "S": slice(n_p, n_p + n_q),
                                      "sigma": slice(n_p + n_q,
                                                     2 * n_p + n_q)})


def build_heat_operators(mesh, config):
    """Assemble every operator of the heat pHDAE."""
    return HeatOperators(mesh, config)


def heat_step(ops, alpha_s, t, dt):
    """One staged explicit step from time t; returns (alpha_new, state).

    Stages: capacity solve for the temperature, entropy-flux solve,
    temperature-weighted conduction solve, entropy-production projection,
    entropy balance, forward-Euler update, boundary observation.
    """
    u = ops.control(t)
    alpha_s = np.asarray(alpha_s, dtype=float)
    e_s = la.cho_solve(ops.cho_Mrcv, ops.Ms @ alpha_s)
    try:
        M_es = ops.weighted_q.assemble(e_s)
        M_sig_w = ops.weighted_p.assemble(e_s)
    except AssemblyError as err:
        raise HeatStepError(f"at t = {t:.9g}: {err}") from None
    f_S = la.cho_solve(ops.cho_MS, -ops.D.T @ e_s + ops.B0 @ u)
    try:
        e_S = la.cho_solve(la.cho_factor(M_es), ops.Lam @ f_S)
        N = ops.product.assemble(f_S, e_S)
        e_sigma = la.cho_solve(la.cho_factor(M_sig_w), -N)
    except la.LinAlgError as err:
        raise HeatStepError(f"at t = {t:.9g}: stage solve failed "
                            f"({err})") from None
    rhs = ops.D @ e_S - ops.Ms @ e_sigma
    alpha_dot = la.cho_solve(ops.cho_Ms, rhs)
    y_b = la.cho_solve(ops.cho_Mb, ops.B0.T @ e_S)
    state = HeatState(t=t, alpha_s=alpha_s, e_s=e_s, f_S=f_S, e_S=e_S,
                      f_sigma=e_s, e_sigma=e_sigma, y_b=y_b,
                      alpha_dot=alpha_dot, u=u)
    return alpha_s + dt * alpha_dot, state


def heat_power_residual(ops, state):
    """|e_s^T M_s d(alpha_s)/dt - u^T M_bnd y|, the discrete first law."""
    rhs = ops.D @ state.e_S - ops.Ms @ state.e_sigma
    supplied = float(state.u @ (ops.B0.T @ state.e_S))
    return abs(float(state.e_s @ rhs) - supplied)


def energy(ops, state):
    """H = alpha_s^T M_s e_s / 2 (gradient-compatible internal energy)."""
    return 0.5 * float(state.alpha_s @ (ops.Ms @ state.e_s))


def run_heat(config):
    """Step the configured heat problem; returns a trajectory.

    Trace rows hold the energy, supplied power ``u^T M_bnd y`` and first-law
    residual of each staged evaluation; the dissipated-power column is zero
    (the internal energy has no resistive port).  Temperature snapshots are
    stored in ``trajectory.extra['temperature']``.
    """
    cfg = config
    mesh = cfg.build_mesh()
    ops = build_heat_operators(mesh, cfg)
    alpha = np.asarray(ops.initial_entropy(), dtype=float)
    nsteps = int(round((cfg.tf - cfg.ti) / cfg.dt))
    if nsteps < 1:
        raise ValueError("time interval shorter than one step")
    stride = max(int(cfg.snapshot_stride), 1)

    rows = np.empty((nsteps + 1, 5))
    snap_times, snaps, temps = [], [], []
    final_state = None
    for step in range(nsteps + 1):
        t = cfg.ti + step * cfg.dt
        alpha_new, state = heat_step(ops, alpha, t, cfg.dt)
        p_sup = float(state.u @ (ops.Mb @ state.y_b))
        rows[step] = (t, energy(ops, state), p_sup, 0.0,
                      heat_power_residual(ops, state))
        if step == 0 or step % stride == 0:
            snap_times.append(t)
            snaps.append(alpha.copy())
            temps.append(state.e_s.copy())
        final_state = state
        if step < nsteps:
            alpha = alpha_new

    trace = HamiltonianTrace(t=rows[:, 0], H=rows[:, 1],
                             P_supplied=rows[:, 2], P_dissipated=rows[:, 3],
                             residual=rows[:, 4])
    traj = Trajectory(times=cfg.ti + cfg.dt * np.arange(nsteps + 1),
                      snapshot_times=np.array(snap_times),
                      snapshots=np.vstack(snaps),
                      trace=trace, final_state=alpha)
    traj.extra["temperature"] = np.vstack(temps)
    traj.extra["operators"] = ops
    traj.extra["final_heat_state"] = final_state
    return traj
