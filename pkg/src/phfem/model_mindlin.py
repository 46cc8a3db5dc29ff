"""Mindlin plate dynamics with mixed boundary conditions.

The co-energy state stacks the vertical velocity (CG1), the rotation
velocity (vector CG1), the bending moment tensor (cellwise constant
symmetric tensors) and the shear force (cellwise constant vectors).  The
structure matrix couples them through the scalar gradient, the symmetric
gradient and the shear identity pairing, in a single skew block pattern.

Neumann data (normal shear force, normal moment) act on the tagged
Neumann sides through Dirichlet-trace couplings of velocity test
functions; the moment channel is present with zero data by default.
Dirichlet data prescribe the velocity traces on the tagged Dirichlet
sides through Lagrange multipliers, integrated with the index-reduced
RK4 scheme which solves one saddle system per stage.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from . import assembly, fem, integrators, mesh as meshmod
from .assembly import CoefficientField
from .mesh import BoundaryTag
from .model_wave import as_spatial, as_temporal, boundary_signal
from .phs_core import Constraint, ControlPort, PHLinearSystem


def _as_sym(tensor):
    t = np.asarray(tensor, dtype=float)
    if t.shape == (2, 2):
        return np.array([t[0, 0], t[0, 1], t[1, 1]]), True
    if t.shape == (3,):
        return t.copy(), False
    raise ValueError("symmetric tensors are (2,2) arrays or (11,12,22) "
                     "triples")


def _restore(comps, was_matrix):
    if was_matrix:
        return np.array([[comps[0], comps[1]], [comps[1], comps[2]]])
    return comps


def bending_stiffness(tensor, youngs, poisson, thickness):
    """Moment produced by a curvature: c[(1-nu) K + nu tr(K) I]."""
    k, was_matrix = _as_sym(tensor)
    c = youngs * thickness ** 3 / (12.0 * (1.0 - poisson ** 2))
    tr = k[0] + k[2]
    out = c * (1.0 - poisson) * k
    out[0] += c * poisson * tr
    out[2] += c * poisson * tr
    return _restore(out, was_matrix)


def bending_compliance(tensor, youngs, poisson, thickness):
    """Curvature recovered from a moment; exact inverse of the stiffness."""
    m, was_matrix = _as_sym(tensor)
    c = youngs * thickness ** 3 / (12.0 * (1.0 - poisson ** 2))
    tr = m[0] + m[2]
    out = m / (c * (1.0 - poisson))
    shift = poisson * tr / (c * (1.0 - poisson) * (1.0 + poisson))
    out[0] -= shift
    out[2] -= shift
    return _restore(out, was_matrix)


def compliance_gram(youngs, poisson, thickness):
    """3x3 Gram matrix ``E_a : compliance(E_b)`` in (11, 12, 22) storage."""
    c = youngs * thickness ** 3 / (12.0 * (1.0 - poisson ** 2))
    s = 1.0 / (c * (1.0 - poisson ** 2))
    return s * np.array([[1.0, 0.0, -poisson],
                         [0.0, 2.0 * (1.0 + poisson), 0.0],
                         [-poisson, 0.0, 1.0]])


def shear_rigidity(youngs, poisson, thickness, shear_correction):
    return youngs * thickness * shear_correction / (2.0 * (1.0 + poisson))


@dataclass
class MindlinConfig:
    """Plate parameters, boundary partition, controls and run settings."""

    x0: float = 0.0
    xL: float = 2.0
    y0: float = 0.0
    yL: float = 1.0
    nx: int = 6
    ny: int = 3
    refine: int = 0
    mesh: meshmod.Mesh | None = None
    youngs: float = 70.0e9
    rho: float = 2700.0
    poisson: float = 0.3
    shear_correction: float = 5.0 / 6.0
    thickness: float = 0.1
    dirichlet_tags: frozenset = frozenset({BoundaryTag.G1})
    neumann_tags: frozenset = frozenset({BoundaryTag.G2, BoundaryTag.G3,
                                         BoundaryTag.G4})
    ub_nor_tm0: object = None      # normal shear force, time part
    ub_nor_sp0: object = None      # и spatial part
    ub_dir_tm0: object = None      # prescribed velocity trace, time part
    ub_dir_sp0: object = None
    ub_dir_tm0_dir: object = None  # time derivative of ub_dir_tm0
    ew0: object = 0.0
    eth0_1: object = 0.0
    eth0_2: object = 0.0
    ekap0: tuple = (0.0, 0.0, 0.0)
    egam0: tuple = (0.0, 0.0)
    ti: float = 0.0
    tf: float = 0.01
    dt: float = 1e-6
    snapshot_stride: int = 50
    growth_limit: float = 1e6

    def __post_init__(self):
        if not 0.0 < self.poisson < 0.5:
            raise ValueError("Poisson ratio must lie in (0, 0.5)")
        for name in ("youngs", "rho", "shear_correction", "thickness"):
            if getattr(self, name) <= 0.0:
                raise ValueError(f"{name} must be positive")
        self.dirichlet_tags = frozenset(BoundaryTag(t)
                                        for t in self.dirichlet_tags)
        self.neumann_tags = frozenset(BoundaryTag(t)
                                      for t in self.neumann_tags)

    def build_mesh(self):
        m = self.mesh
        if m is None:
            m = meshmod.generate_rectangle(self.nx, self.ny, self.x0,
                                           self.xL, self.y0, self.yL)
        return meshmod.refine_uniform(m, self.refine)


@dataclass
class MindlinModel:
    """Assembled plate system and the spaces used for post-processing."""

    config: MindlinConfig
    mesh: meshmod.Mesh
    system: PHLinearSystem
    w_space: fem.FESpace
    th_space: fem.FESpace
    kap_space: fem.FESpace
    gam_space: fem.FESpace

    def initial_state(self):
        cfg = self.config
        verts = self.mesh.vertices
        e_w = as_spatial(cfg.ew0, 0.0)(verts[:, 0], verts[:, 1])
        th1 = as_spatial(cfg.eth0_1, 0.0)(verts[:, 0], verts[:, 1])
        th2 = as_spatial(cfg.eth0_2, 0.0)(verts[:, 0], verts[:, 1])
        e_th = np.empty(2 * len(verts))
        e_th[0::2] = th1
        e_th[1::2] = th2
        mids = verts[self.mesh.cells].mean(axis=1)
        e_kap = np.stack(
            [as_spatial(c, 0.0)(mids[:, 0], mids[:, 1])
             for c in self.config.ekap0], axis=1).ravel()
        e_gam = np.stack(
            [as_spatial(c, 0.0)(mids[:, 0], mids[:, 1])
             for c in self.config.egam0], axis=1).ravel()
        return np.concatenate([e_w, e_th, e_kap, e_gam])


def build_mindlin_system(mesh, config):
    """Assemble the plate system; Dirichlet sides become a constraint."""
    cfg = config
    present = frozenset(BoundaryTag(t) for t in np.unique(mesh.boundary_tags))
    if (cfg.dirichlet_tags | cfg.neumann_tags) != present or \
            (cfg.dirichlet_tags & cfg.neumann_tags):
        raise ValueError(
            "Dirichlet and Neumann tags must partition the boundary "
            f"(boundary has {sorted(t.name for t in present)})"
        )

    w_space = fem.build_space(mesh, fem.CG1_SCALAR)
    th_space = fem.build_space(mesh, fem.CG1_VECTOR2)
    kap_space = fem.build_space(mesh, fem.DG0_SYMTENSOR2)
    gam_space = fem.build_space(mesh, fem.DG0_VECTOR2)
    n_w, n_th = w_space.n_dofs, th_space.n_dofs
    n_k, n_g = kap_space.n_dofs, gam_space.n_dofs

    rb = cfg.rho * cfg.thickness
    i_theta = cfg.rho * cfg.thickness ** 3 / 12.0
    d_s = shear_rigidity(cfg.youngs, cfg.poisson, cfg.thickness,
                         cfg.shear_correction)
    M_w = assembly.assemble_mass(w_space, rb)
    M_th = assembly.assemble_mass(th_space, i_theta)
    M_kap = assembly.assemble_mass(
        kap_space, CoefficientField.symgram(
            compliance_gram(cfg.youngs, cfg.poisson, cfg.thickness)))
    M_gam = assembly.assemble_mass(gam_space, 1.0 / d_s)
    M = sp.block_diag([M_w, M_th, M_kap, M_gam], format="csr")

    Dg = assembly.assemble_d_grad(w_space, gam_space)     # (n_g, n_w)
    DG = assembly.assemble_d_Grad(th_space, kap_space)    # (n_k, n_th)
    D0 = assembly.assemble_d0(gam_space, th_space)        # (n_g, n_th)
    J = sp.bmat([
        [None, None, None, -Dg.T],
        [None, None, -DG.T, -D0.T],
        [None, DG, None, None],
        [Dg, D0, None, None],
    ], format="csr")

    ports = []
    if cfg.neumann_tags:
        bn1 = fem.build_space(mesh, fem.BOUNDARY_CG1_SCALAR,
                              boundary_tags=cfg.neumann_tags)
        bn2 = fem.build_space(mesh, fem.BOUNDARY_CG1_VECTOR2,
                              boundary_tags=cfg.neumann_tags)
        B_w = assembly.assemble_boundary_coupling(w_space, bn1,
                                                  "dirichlet_trace")
        B_th = assembly.assemble_boundary_coupling(th_space, bn2,
                                                   "dirichlet_trace")
        B1 = sp.bmat([[B_w], [sp.csr_matrix((n_th + n_k + n_g,
                                             bn1.n_dofs))]], format="csr")
        B2 = sp.bmat([[sp.csr_matrix((n_w, bn2.n_dofs))], [B_th],
                      [sp.csr_matrix((n_k + n_g, bn2.n_dofs))]],
                     format="csr")
        u_force = boundary_signal(cfg.ub_nor_tm0, cfg.ub_nor_sp0, None,
                                  None, bn1)
        ports.append(ControlPort(name="shear_force", B=B1,
                                 M_bnd=assembly.assemble_boundary_mass(bn1),
                                 u=u_force))
        # the moment channel exists with zero data
        ports.append(ControlPort(name="moment", B=B2,
                                 M_bnd=assembly.assemble_boundary_mass(bn2),
                                 u=None))

    constraint = None
    if cfg.dirichlet_tags:
        bd1 = fem.build_space(mesh, fem.BOUNDARY_CG1_SCALAR,
                              boundary_tags=cfg.dirichlet_tags)
        bd2 = fem.build_space(mesh, fem.BOUNDARY_CG1_VECTOR2,
                              boundary_tags=cfg.dirichlet_tags)
        G_w = assembly.assemble_boundary_coupling(w_space, bd1,
                                                  "dirichlet_trace")
        G_th = assembly.assemble_boundary_coupling(th_space, bd2,
                                                   "dirichlet_trace")
        G = sp.bmat([
            [G_w, sp.csr_matrix((n_w, bd2.n_dofs))],
            [sp.csr_matrix((n_th, bd1.n_dofs)), G_th],
            [sp.csr_matrix((n_k + n_g, bd1.n_dofs + bd2.n_dofs))],
        ], format="csr")
        Md1 = assembly.assemble_boundary_mass(bd1).toarray()
        v_w = boundary_signal(cfg.ub_dir_tm0, cfg.ub_dir_sp0, None, None,
                              bd1)
        vdot_w = boundary_signal(cfg.ub_dir_tm0_dir, cfg.ub_dir_sp0, None,
                                 None, bd1)
        m2 = bd2.n_dofs

        def value(t):
            return np.concatenate([Md1 @ v_w(t), np.zeros(m2)])

        def derivative(t):
            return np.concatenate([Md1 @ vdot_w(t), np.zeros(m2)])

        constraint = Constraint(G=G, value=value, derivative=derivative)

    system = PHLinearSystem(
        M=M, J=J, R=None, ports=ports, constraint=constraint,
        blocks={"w": slice(0, n_w),
                "theta": slice(n_w, n_w + n_th),
                "kappa": slice(n_w + n_th, n_w + n_th + n_k),
                "gamma": slice(n_w + n_th + n_k, n_w + n_th + n_k + n_g)})
    return MindlinModel(config=cfg, mesh=mesh, system=system,
                        w_space=w_space, th_space=th_space,
                        kap_space=kap_space, gam_space=gam_space)


def run_mindlin(config):
    """Integrate the configured plate problem; returns a trajectory.

    Uses the index-reduced RK4 when Dirichlet sides are present (plain RK4
    otherwise) and aborts if the state grows beyond ``growth_limit`` times
    its initial size.  The deflection, reconstructed by the stage
    quadrature of the vertical velocity, is stored per snapshot in
    ``trajectory.extra['deflection']``.
    """
    cfg = config
    mesh = cfg.build_mesh()
    model = build_mindlin_system(mesh, cfg)
    e0 = model.initial_state()
    nsteps = int(round((cfg.tf - cfg.ti) / cfg.dt))
    if nsteps < 1:
        raise ValueError("time interval shorter than one step")
    stride = max(int(cfg.snapshot_stride), 1)
    n_w = model.w_space.n_dofs

    w = np.zeros(n_w)
    w_snaps = [w.copy()]

    def on_step(step, t_new, e_new, info):
        nonlocal w
        s = info["stage_states"]
        w = w + (cfg.dt / 6.0) * (s[0][:n_w] + 2.0 * s[1][:n_w]
                                  + 2.0 * s[2][:n_w] + s[3][:n_w])
        if step % stride == 0:
            w_snaps.append(w.copy())

    if model.system.constraint is not None:
        traj = integrators.rk4_augmented(
            model.system, e0, cfg.dt, nsteps, t0=cfg.ti,
            snapshot_stride=stride, step_callback=on_step,
            growth_limit=cfg.growth_limit)
    else:
        traj = integrators.rk4(
            model.system, e0, cfg.dt, nsteps, t0=cfg.ti,
            snapshot_stride=stride, step_callback=on_step)

    traj.extra["deflection"] = np.vstack(w_snaps)
    traj.extra["model"] = model
    return traj
