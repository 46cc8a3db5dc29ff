"""Anisotropic heterogeneous damped wave dynamics with boundary control.

The co-energy state is (velocity, stress) in CG1 x RT0.  Two causalities
are provided:

* ``grad`` -- the velocity row keeps its mass form and the stress row is
  integrated by parts; the control is the outward normal stress on the
  boundary and enters the velocity rows through Dirichlet traces;
* ``div`` -- the stress row is integrated by parts; the control is the
  boundary velocity and enters the stress rows through normal traces.

Damping enters as an explicit dissipation block: a viscous volume term
(velocity mass weighted by the damping coefficient) plus impedance
feedback on the boundary (trace mass weighted by 1/Z in the grad form, a
normal-trace weight by Z in the div form).  Either way the supplied and
dissipated powers recorded in the trace satisfy the discrete power
balance to roundoff.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from . import assembly, expressions, fem, integrators, mesh as meshmod
from .assembly import AssemblyError, CoefficientField
from .phs_core import ControlPort, LinearSolver, PHLinearSystem


def as_spatial(obj, default=None):
    """Normalize numbers / expression strings / callables to f(x, y)."""
    if obj is None:
        obj = default
    if obj is None:
        return None
    if isinstance(obj, str):
        return expressions.spatial(obj)
    if callable(obj):
        return obj
    v = float(obj)
    return lambda x, y: np.full_like(np.asarray(x, dtype=float), v)


def as_temporal(obj, default=None):
    """Normalize numbers / expression strings / callables to f(t)."""
    if obj is None:
        obj = default
    if obj is None:
        return None
    if isinstance(obj, str):
        return expressions.temporal(obj)
    if callable(obj):
        return obj
    v = float(obj)
    return lambda t: v


def boundary_signal(tm0, sp0, tm1, sp1, b_space):
    """Coefficient-vector control ``u(t)`` on a boundary CG1 space.

    The signal is ``tm0(t) * sp0(x) + tm1(t) + sp1(x)`` interpolated at
    the space's boundary vertices; absent factors default to one (spatial)
    or zero (additive parts).
    """
    verts = b_space.boundary_vertex_ids
    if verts is None or len(verts) == 0:
        return lambda t: np.zeros(0)
    xs = b_space.mesh.vertices[verts, 0]
    ys = b_space.mesh.vertices[verts, 1]
    tm0 = as_temporal(tm0)
    tm1 = as_temporal(tm1)
    sp0_fn = as_spatial(sp0)
    sp1_fn = as_spatial(sp1)
    sp0_vals = sp0_fn(xs, ys) if sp0_fn is not None else np.ones(len(verts))
    sp1_vals = sp1_fn(xs, ys) if sp1_fn is not None else np.zeros(len(verts))
    if tm0 is None and sp0_fn is not None:
        tm0 = lambda t: 1.0
    ncomp = b_space.components
    if ncomp != 1:
        raise AssemblyError("boundary_signal builds scalar signals")

    def u(t):
        out = sp1_vals.copy()
        if tm0 is not None:
            out = out + tm0(t) * sp0_vals
        if tm1 is not None:
            out = out + tm1(t)
        return out

    return u


def check_positive(fn, tables, what):
    vals = fn(tables.xq[..., 0], tables.xq[..., 1])
    vals = np.broadcast_to(np.asarray(vals, dtype=float), tables.xq.shape[:2])
    if vals.min() <= 0.0:
        c, q = np.unravel_index(np.argmin(vals), vals.shape)
        x, y = tables.xq[c, q]
        raise AssemblyError(
            f"{what} must be positive; found {vals[c, q]:.6g} at "
            f"({x:.6g}, {y:.6g})"
        )


@dataclass
class WaveConfig:
    """Domain, coefficients, damping, control and run settings."""

    x0: float = 0.0
    xL: float = 1.0
    y0: float = 0.0
    yL: float = 1.0
    nx: int = 8
    ny: int = 4
    refine: int = 0
    mesh: meshmod.Mesh | None = None
    rho: object = 1.0
    t11: object = 1.0
    t12: object = 0.0
    t22: object = 1.0
    impedance: object = None       # Z > 0 on the boundary, or None
    damping: object = None         # viscous coefficient >= 0, or None
    formulation: str = "div"
    ub_tm0: object = None
    ub_sp0: object = None
    ub_tm1: object = None
    ub_sp1: object = None
    ap0: object = 0.0              # initial momentum density
    aq0_1: object = 0.0            # initial strain components
    aq0_2: object = 0.0
    w0: object = 0.0               # initial deflection (postprocessing only)
    ti: float = 0.0
    tf: float = 1.0
    dt: float = 1e-3
    integrator: str = "midpoint"
    snapshot_stride: int = 50

    def build_mesh(self):
        m = self.mesh
        if m is None:
            m = meshmod.generate_rectangle(self.nx, self.ny, self.x0,
                                           self.xL, self.y0, self.yL)
        return meshmod.refine_uniform(m, self.refine)


@dataclass
class WaveModel:
    """Assembled wave system plus the spaces needed for post-processing."""

    config: WaveConfig
    mesh: meshmod.Mesh
    system: PHLinearSystem
    p_space: fem.FESpace
    q_space: fem.FESpace
    b_space: fem.FESpace
    M_p: sp.spmatrix
    M_q: sp.spmatrix

    def initial_state(self):
        """Project the energy-variable initial data by mass solves."""
        cfg = self.config
        ap = as_spatial(cfg.ap0, 0.0)
        aq1 = as_spatial(cfg.aq0_1, 0.0)
        aq2 = as_spatial(cfg.aq0_2, 0.0)
        load_p = assembly.assemble_load(self.p_space, ap)
        e_p = LinearSolver(self.M_p).solve(load_p)

        def aq(x, y):
            return np.stack([aq1(x, y), aq2(x, y)], axis=-1)

        load_q = assembly.assemble_load(self.q_space, aq)
        e_q = LinearSolver(self.M_q).solve(load_q)
        return np.concatenate([e_p, e_q])

    def initial_deflection(self):
        w0 = as_spatial(self.config.w0, 0.0)
        return w0(self.mesh.vertices[:, 0], self.mesh.vertices[:, 1])


def build_wave_system(mesh, config):
    """Assemble the wave port-Hamiltonian system on a given mesh."""
    cfg = config
    p_space = fem.build_space(mesh, fem.CG1_SCALAR)
    q_space = fem.build_space(mesh, fem.RT0)
    tags = frozenset(meshmod.BoundaryTag(t)
                     for t in np.unique(mesh.boundary_tags))
    b_space = fem.build_space(mesh, fem.BOUNDARY_CG1_SCALAR,
                              boundary_tags=tags)

    tables = assembly._tables(mesh)
    rho = as_spatial(cfg.rho, 1.0)
    check_positive(rho, tables, "mass density")
    M_p = assembly.assemble_mass(p_space, CoefficientField.scalar(rho))
    tensor = CoefficientField.tensor(as_spatial(cfg.t11, 1.0),
                                     as_spatial(cfg.t12, 0.0),
                                     as_spatial(cfg.t22, 1.0))
    M_q = assembly.assemble_mass(q_space, tensor.inverse())
    n_p, n_q = p_space.n_dofs, q_space.n_dofs
    M = sp.block_diag([M_p, M_q], format="csr")

    if cfg.formulation == "grad":
        D = assembly.assemble_d_grad(p_space, q_space)     # (n_q, n_p)
        J = sp.bmat([[None, -D.T], [D, None]], format="csr")
        B_vol = assembly.assemble_boundary_coupling(p_space, b_space,
                                                    "dirichlet_trace")
        B = sp.bmat([[B_vol], [sp.csr_matrix((n_q, b_space.n_dofs))]],
                    format="csr")
    elif cfg.formulation == "div":
        D = assembly.assemble_d_div(p_space, q_space)      # (n_p, n_q)
        J = sp.bmat([[None, D], [-D.T, None]], format="csr")
        B_vol = assembly.assemble_boundary_coupling(q_space, b_space,
                                                    "normal_trace")
        B = sp.bmat([[sp.csr_matrix((n_p, b_space.n_dofs))], [B_vol]],
                    format="csr")
    else:
        raise ValueError(f"unknown formulation {cfg.formulation!r}")

    R_p = sp.csr_matrix((n_p, n_p))
    R_q = sp.csr_matrix((n_q, n_q))
    has_r = False
    if cfg.damping is not None:
        eps = as_spatial(cfg.damping)
        R_p = R_p + assembly.assemble_mass(
            p_space, CoefficientField.scalar(eps))
        has_r = True
    if cfg.impedance is not None:
        zfn = as_spatial(cfg.impedance)

        def inv_z(x, y):
            z = np.broadcast_to(np.asarray(zfn(x, y), dtype=float),
                                np.shape(np.asarray(x)))
            if np.any(z <= 0.0):
                raise AssemblyError("impedance must be positive on the "
                                    "boundary")
            return 1.0 / z

        if cfg.formulation == "grad":
            R_p = R_p + assembly.assemble_trace_mass(p_space, tags, inv_z)
        else:
            R_q = R_q + assembly.assemble_normal_trace_weight(
                q_space, tags, zfn, require_positive=True)
        has_r = True
    R = sp.block_diag([R_p, R_q], format="csr") if has_r else None

    M_bnd = assembly.assemble_boundary_mass(b_space)
    u = boundary_signal(cfg.ub_tm0, cfg.ub_sp0, cfg.ub_tm1, cfg.ub_sp1,
                        b_space)
    port = ControlPort(name="boundary", B=B, M_bnd=M_bnd, u=u)
    system = PHLinearSystem(M=M, J=J, R=R, ports=[port],
                            blocks={"p": slice(0, n_p),
                                    "q": slice(n_p, n_p + n_q)})
    return WaveModel(config=cfg, mesh=mesh, system=system, p_space=p_space,
                     q_space=q_space, b_space=b_space, M_p=M_p, M_q=M_q)


def run_wave(config):
    """Integrate the configured wave problem; returns a trajectory.

    The deflection is reconstructed from the velocity by the scheme's own
    time quadrature and stored per snapshot in
    ``trajectory.extra['deflection']``.
    """
    cfg = config
    mesh = cfg.build_mesh()
    model = build_wave_system(mesh, cfg)
    e0 = model.initial_state()
    nsteps = int(round((cfg.tf - cfg.ti) / cfg.dt))
    if nsteps < 1:
        raise ValueError("time interval shorter than one step")

    n_p = model.p_space.n_dofs
    w = model.initial_deflection().astype(float)
    w_snaps = [w.copy()]
    stride = max(int(cfg.snapshot_stride), 1)

    def on_step(step, t_new, e_new, info):
        nonlocal w
        if "e_mid" in info:
            w = w + cfg.dt * info["e_mid"][:n_p]
        else:
            s = info["stage_states"]
            w = w + (cfg.dt / 6.0) * (s[0][:n_p] + 2.0 * s[1][:n_p]
                                      + 2.0 * s[2][:n_p] + s[3][:n_p])
        if step % stride == 0:
            w_snaps.append(w.copy())

    if cfg.integrator == "midpoint":
        traj = integrators.implicit_midpoint(
            model.system, e0, cfg.dt, nsteps, t0=cfg.ti,
            snapshot_stride=stride, step_callback=on_step)
    elif cfg.integrator == "rk4":
        traj = integrators.rk4(
            model.system, e0, cfg.dt, nsteps, t0=cfg.ti,
            snapshot_stride=stride, step_callback=on_step)
    else:
        raise ValueError(f"unknown integrator {cfg.integrator!r}")

    traj.extra["deflection"] = np.vstack(w_snaps)
    traj.extra["velocity"] = traj.snapshots[:, :n_p]
    traj.extra["model"] = model
    return traj
