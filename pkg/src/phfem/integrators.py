"""Fixed-step time integration for port-Hamiltonian systems.

Three schemes: the implicit midpoint rule (conserves the quadratic
Hamiltonian of a lossless unforced linear system exactly, up to solver
tolerance), classical RK4, and an index-reduced RK4 for constrained
systems that solves one saddle system per stage to express the Lagrange
multiplier in terms of the state.

Every integrator records a :class:`HamiltonianTrace` row per step:
energy, supplied power, dissipated power and the structural power-balance
residual evaluated at the scheme's natural collocation point.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .phs_core import LinearSolver, hamiltonian


class IntegrationError(Exception):
    """Inconsistent initial data, singular saddle, or blow-up."""


@dataclass
class HamiltonianTrace:
    """Time series of energy and power bookkeeping."""

    t: np.ndarray
    H: np.ndarray
    P_supplied: np.ndarray
    P_dissipated: np.ndarray
    residual: np.ndarray

    def __len__(self):
        return len(self.t)


class _TraceBuilder:
    def __init__(self):
        self.rows = {k: [] for k in
                     ("t", "H", "P_supplied", "P_dissipated", "residual")}

    def add(self, t, H, p_sup, p_dis, residual):
        self.rows["t"].append(t)
        self.rows["H"].append(H)
        self.rows["P_supplied"].append(p_sup)
        self.rows["P_dissipated"].append(p_dis)
        self.rows["residual"].append(residual)

    def build(self):
        return HamiltonianTrace(**{k: np.array(v, dtype=float)
                                   for k, v in self.rows.items()})


@dataclass
class Trajectory:
    """Times, strided state snapshots and the Hamiltonian trace."""

    times: np.ndarray
    snapshot_times: np.ndarray
    snapshots: np.ndarray            # (nsnap, n); first row = initial state
    trace: HamiltonianTrace
    final_state: np.ndarray
    multipliers: np.ndarray | None = None       # (nsteps, m) for DAE runs
    constraint_defect: np.ndarray | None = None
    extra: dict = field(default_factory=dict)

    @property
    def initial_state(self):
        return self.snapshots[0]


class _SnapshotBuilder:
    def __init__(self, e0, stride):
        self.stride = max(int(stride), 1)
        self.times = [0.0]
        self.states = [np.array(e0, dtype=float)]

    def offer(self, step, t, e):
        if step % self.stride == 0:
            self.times.append(t)
            self.states.append(e.copy())

    def build(self, t0):
        times = np.array(self.times, dtype=float)
        times[0] = t0
        return times, np.vstack(self.states)


def _check_step_args(dt, nsteps):
    if not dt > 0.0:
        raise ValueError(f"time step must be positive, got {dt}")
    if nsteps < 1:
        raise ValueError("need at least one step")


def _port_power(sys, e, t, lus=None):
    """Supplied power sum_i u_i^T M_bnd y_i and the list of u_i B_i^T e."""
    p_sup = 0.0
    for port in sys.ports:
        ui = port.input_at(t)
        y = port.boundary_solver().solve(port.B.T @ e)
        p_sup += float(ui @ (port.M_bnd @ y))
    return p_sup


def implicit_midpoint(sys, e0, dt, nsteps, t0=0.0, snapshot_stride=50,
                      step_callback=None):
    """Energy-conserving implicit midpoint rule for unconstrained systems.

    Each step solves ``(M - dt/2 (J-R)) e+ = (M + dt/2 (J-R)) e
    + dt B u(t + dt/2)``; the trace's power columns are evaluated at the
    step midpoint, where the scheme satisfies the discrete power balance
    exactly.
    """
    _check_step_args(dt, nsteps)
    if sys.constraint is not None:
        raise IntegrationError("midpoint rule does not take constraints; "
                               "use rk4_augmented")
    e = np.array(e0, dtype=float)
    JR = sys.J_minus_R()
    A_minus = (sys.M - 0.5 * dt * JR).tocsc()
    A_plus = (sys.M + 0.5 * dt * JR).tocsr()
    lu = LinearSolver(A_minus)

    trace = _TraceBuilder()
    snaps = _SnapshotBuilder(e, snapshot_stride)
    p0 = _port_power(sys, e, t0)
    d0 = float(e @ (sys.R @ e)) if sys.R is not None else 0.0
    trace.add(t0, hamiltonian(sys, e), p0, d0, 0.0)

    for step in range(1, nsteps + 1):
        t_mid = t0 + (step - 0.5) * dt
        rhs = A_plus @ e
        for port in sys.ports:
            rhs = rhs + dt * (port.B @ port.input_at(t_mid))
        e_new = lu.solve(rhs)
        e_mid = 0.5 * (e + e_new)
        de = (e_new - e) / dt
        p_sup = _port_power(sys, e_mid, t_mid)
        p_dis = (float(e_mid @ (sys.R @ e_mid))
                 if sys.R is not None else 0.0)
        residual = abs(float(e_mid @ (sys.M @ de)) - p_sup + p_dis)
        t_new = t0 + step * dt
        trace.add(t_new, hamiltonian(sys, e_new), p_sup, p_dis, residual)
        if step_callback is not None:
            step_callback(step, t_new, e_new, {"e_mid": e_mid})
        e = e_new
        snaps.offer(step, t_new, e)

    snap_t, snap_e = snaps.build(t0)
    return Trajectory(times=t0 + dt * np.arange(nsteps + 1),
                      snapshot_times=snap_t, snapshots=snap_e,
                      trace=trace.build(), final_state=e)


def rk4(sys, e0, dt, nsteps, t0=0.0, snapshot_stride=50, step_callback=None):
    """Classical four-stage Runge-Kutta on ``M de/dt = (J-R)e + Bu``."""
    _check_step_args(dt, nsteps)
    if sys.constraint is not None:
        raise IntegrationError("plain RK4 does not take constraints; "
                               "use rk4_augmented")
    e = np.array(e0, dtype=float)
    lu = sys.mass_solver()

    def slope(t, state):
        return lu.solve(sys.rhs(t, state))

    trace = _TraceBuilder()
    snaps = _SnapshotBuilder(e, snapshot_stride)

    def record(t, state):
        rhs = sys.rhs(t, state)
        p_sup = _port_power(sys, state, t)
        p_dis = (float(state @ (sys.R @ state))
                 if sys.R is not None else 0.0)
        residual = abs(float(state @ rhs) - p_sup + p_dis)
        trace.add(t, hamiltonian(sys, state), p_sup, p_dis, residual)

    record(t0, e)
    for step in range(1, nsteps + 1):
        t = t0 + (step - 1) * dt
        k1 = slope(t, e)
        s2 = e + 0.5 * dt * k1
        k2 = slope(t + 0.5 * dt, s2)
        s3 = e + 0.5 * dt * k2
        k3 = slope(t + 0.5 * dt, s3)
        s4 = e + dt * k3
        k4 = slope(t + dt, s4)
        info = {"stages": (k1, k2, k3, k4), "stage_states": (e, s2, s3, s4)}
        e = e + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        t_new = t0 + step * dt
        record(t_new, e)
        if step_callback is not None:
            step_callback(step, t_new, e, info)
        snaps.offer(step, t_new, e)

    snap_t, snap_e = snaps.build(t0)
    return Trajectory(times=t0 + dt * np.arange(nsteps + 1),
                      snapshot_times=snap_t, snapshots=snap_e,
                      trace=trace.build(), final_state=e)


def rk4_augmented(sys, e0, dt, nsteps, t0=0.0, snapshot_stride=50,
                  step_callback=None, growth_limit=None):
    """RK4 with per-stage saddle solves for index-2 constrained systems.

    Every stage solves ``[[M, -G], [G^T, 0]] (k, lambda) =
    ((J-R)e + Bu, c'(t))`` and advances with the flow component k, so the
    differentiated constraint holds at each stage and the constraint drift
    stays at the local truncation level.  The supplied-power column of the
    trace includes the Dirichlet-port term ``lambda^T (G^T e)``.
    """
    _check_step_args(dt, nsteps)
    con = sys.constraint
    if con is None:
        raise IntegrationError("rk4_augmented needs a constraint block")
    e = np.array(e0, dtype=float)
    n, m = con.G.shape

    defect0 = con.G.T @ e - np.asarray(con.value(t0), dtype=float)
    scale0 = max(1.0, float(np.linalg.norm(con.G.T @ e)),
                 float(np.linalg.norm(np.asarray(con.value(t0)))))
    if np.linalg.norm(defect0) > 1e-10 * scale0:
        raise IntegrationError(
            "initial state violates the constraint: defect norm "
            f"{np.linalg.norm(defect0):.3e} exceeds 1e-10 * {scale0:.3e}"
        )

    saddle = sp.bmat([[sys.M, -con.G], [con.G.T, None]], format="csc")
    try:
        lu = LinearSolver(saddle)
    except Exception as err:
        raise IntegrationError(f"singular saddle system: {err}") from None

    JR = sys.J_minus_R()

    def stage(t, state):
        rhs = JR @ state
        for port in sys.ports:
            rhs = rhs + port.B @ port.input_at(t)
        full = np.concatenate([rhs, np.asarray(con.derivative(t),
                                               dtype=float)])
        sol = lu.solve(full)
        return sol[:n], sol[n:], rhs

    def stage_residual(state, t, lam, rhs):
        p_sup = _port_power(sys, state, t)
        p_dir = float(lam @ (con.G.T @ state))
        p_dis = (float(state @ (sys.R @ state))
                 if sys.R is not None else 0.0)
        mk = rhs + con.G @ lam
        return (abs(float(state @ mk) - p_sup - p_dir + p_dis),
                p_sup + p_dir, p_dis)

    trace = _TraceBuilder()
    snaps = _SnapshotBuilder(e, snapshot_stride)
    multipliers = []
    defects = [float(np.linalg.norm(defect0, ord=np.inf))]

    k0, lam0, rhs0 = stage(t0, e)
    res0, psup0, pdis0 = stage_residual(e, t0, lam0, rhs0)
    trace.add(t0, hamiltonian(sys, e), psup0, pdis0, res0)
    multipliers.append(lam0)
    e_scale0 = max(1.0, float(np.max(np.abs(e))))

    for step in range(1, nsteps + 1):
        t = t0 + (step - 1) * dt
        ks = []
        lams = []
        res_max = 0.0
        coeffs = ((0.0, None), (0.5, 0), (0.5, 1), (1.0, 2))
        states = []
        for (theta, prev) in coeffs:
            if prev is None:
                state = e
            else:
                state = e + theta * dt * ks[prev]
            k, lam, rhs = stage(t + theta * dt, state)
            res, _, _ = stage_residual(state, t + theta * dt, lam, rhs)
            res_max = max(res_max, res)
            ks.append(k)
            lams.append(lam)
            states.append(state)
        e = e + (dt / 6.0) * (ks[0] + 2.0 * ks[1] + 2.0 * ks[2] + ks[3])
        t_new = t0 + step * dt
        defect = con.G.T @ e - np.asarray(con.value(t_new), dtype=float)
        defects.append(float(np.linalg.norm(defect, ord=np.inf)))
        p_sup = _port_power(sys, e, t_new)
        p_dir = float(lams[0] @ (con.G.T @ e))
        p_dis = float(e @ (sys.R @ e)) if sys.R is not None else 0.0
        trace.add(t_new, hamiltonian(sys, e), p_sup + p_dir, p_dis, res_max)
        multipliers.append(lams[0])
        if growth_limit is not None:
            if np.max(np.abs(e)) > growth_limit * e_scale0:
                raise IntegrationError(
                    f"state norm exceeded {growth_limit:g} times its "
                    f"initial size at t = {t_new:.6g}; the explicit scheme "
                    "is unstable at this time step"
                )
        if step_callback is not None:
            step_callback(step, t_new, e,
                          {"stages": tuple(ks), "stage_states": tuple(states),
                           "multiplier": lams[0]})
        snaps.offer(step, t_new, e)

    snap_t, snap_e = snaps.build(t0)
    return Trajectory(times=t0 + dt * np.arange(nsteps + 1),
                      snapshot_times=snap_t, snapshots=snap_e,
                      trace=trace.build(), final_state=e,
                      multipliers=np.vstack(multipliers),
                      constraint_defect=np.array(defects))
