"""Explicit leapfrog solvers for the Dirichlet wave problem and its boundary traces.

The scheme is

    u^{k+1} = 2 u^k - u^{k-1} + dt^2 (L u^k + B gamma^k + F^k)

on interior values, with ``L`` and ``B`` taken from the assembled
``A_{c^-2 g}`` and boundary values imposed on the accessible nodes.  The
first step uses the Taylor start ``u^1 = u^0 + dt v^0 + dt^2/2 (A u^0 + F^0)``.

Velocities returned with a trajectory are centered differences, with the
end levels corrected by half an acceleration step so that restarting the
scheme from ``(u^0, v^0)`` reproduces ``u^1`` exactly.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Iterator, Optional

import numpy as np

from .geometry import CoefficientSet, Grid, LaplaceBeltrami, assemble_laplace_beltrami

__all__ = [
    "CFLError",
    "TraceError",
    "CauchyData",
    "BoundaryTrace",
    "WaveTrajectory",
    "admissible_dt",
    "time_grid",
    "leapfrog",
    "solve_forward",
    "solve_time_reversed",
    "neumann_trace",
    "time_derivative",
    "time_antiderivative",
    "discrete_energy",
]


class CFLError(ValueError):
    def __init__(self, dt: float, dt_max: float):
        super().__init__(f"time step {dt:.6g} violates the CFL bound; admissible dt <= {dt_max:.6g}")
        self.dt = dt
        self.dt_max = dt_max


class TraceError(ValueError):
    """Boundary trace incompatible with the requested solve."""


@dataclass
class CauchyData:
    position: np.ndarray
    velocity: np.ndarray


@dataclass
class BoundaryTrace:
    """Values on the accessible nodes over a uniform time grid.

    Row ``k`` sits at time ``(k + offset) * dt``.  Integer-level traces
    (``offset == 0``) have ``nt + 1`` rows; staggered traces
    (``offset == 0.5``) have ``nt`` rows.
    """

    dt: float
    values: np.ndarray
    offset: float = 0.0

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if self.values.ndim != 2:
            raise TraceError("trace values must be a (time, node) array")

    @property
    def nt(self) -> int:
        rows = self.values.shape[0]
        return rows - 1 if self.offset == 0.0 else rows

    @property
    def tau(self) -> float:
        return self.nt * self.dt

    @property
    def n_gamma(self) -> int:
        return self.values.shape[1]

    def times(self) -> np.ndarray:
        return (np.arange(self.values.shape[0]) + self.offset) * self.dt

    @classmethod
    def zeros(cls, nt: int, dt: float, n_gamma: int) -> "BoundaryTrace":
        return cls(dt, np.zeros((nt + 1, n_gamma)))

    def time_weights(self) -> np.ndarray:
        """Quadrature weights in time: trapezoid on integer levels, midpoint when staggered."""
        w = np.full(self.values.shape[0], self.dt)
        if self.offset == 0.0:
            w[0] *= 0.5
            w[-1] *= 0.5
        return w

    def inner(self, other: "BoundaryTrace", gamma_weights: np.ndarray) -> float:
        if other.values.shape != self.values.shape or other.offset != self.offset:
            raise TraceError("traces live on different time grids")
        return float(np.einsum("t,tj,tj,j->", self.time_weights(), self.values, other.values, gamma_weights))

    def norm(self, gamma_weights: np.ndarray) -> float:
        return math.sqrt(max(self.inner(self, gamma_weights), 0.0))

    def __add__(self, other):
        return BoundaryTrace(self.dt, self.values + other.values, self.offset)

    def __sub__(self, other):
        return BoundaryTrace(self.dt, self.values - other.values, self.offset)

    def __mul__(self, s: float):
        return BoundaryTrace(self.dt, self.values * s, self.offset)

    __rmul__ = __mul__


@dataclass
class WaveTrajectory:
    """Snapshots ``u^0 .. u^nt`` on the full grid, optionally with velocities.

    With ``offset == 0.5`` the snapshots sit at half levels (``nt`` of them),
    as for staggered time derivatives of a trajectory.
    """

    dt: float
    snapshots: np.ndarray
    velocities: Optional[np.ndarray] = None
    offset: float = 0.0

    @property
    def nt(self) -> int:
        n = self.snapshots.shape[0]
        return n - 1 if self.offset == 0.0 else n

    def times(self) -> np.ndarray:
        return (np.arange(self.snapshots.shape[0]) + self.offset) * self.dt

    @property
    def tau(self) -> float:
        return self.nt * self.dt

    def cauchy(self, k: int = 0) -> CauchyData:
        if self.velocities is None:
            raise ValueError("trajectory was stored without velocities")
        return CauchyData(self.snapshots[k].copy(), self.velocities[k].copy())

    def at_time(self, t: float) -> np.ndarray:
        k = int(round(t / self.dt - self.offset))
        if abs((k + self.offset) * self.dt - t) > 1e-9 * max(1.0, abs(t)):
            raise ValueError(f"time {t} is not on the time grid")
        return self.snapshots[k]


def admissible_dt(grid: Grid, coeffs: CoefficientSet, speed: Optional[str] = "c", cfl: float = 0.5) -> float:
    """Largest time step allowed by ``dt <= cfl h / (c_max sqrt(lambda_max(g^-1)) sqrt(n))``."""
    s = coeffs.speed(speed)
    cmax = 1.0 if s is None else float(s.max())
    return cfl * grid.h / (cmax * math.sqrt(coeffs.max_inverse_metric_eig()) * math.sqrt(grid.dim))


def time_grid(tau: float, dt_max: float) -> tuple[int, float]:
    """Smallest step count with ``dt <= dt_max``; ``nt * dt == tau``."""
    if tau <= 0:
        raise ValueError("tau must be positive")
    nt = max(2, int(math.ceil(tau / dt_max - 1e-12)))
    return nt, tau / nt


def leapfrog(
    L,
    dt: float,
    u0: np.ndarray,
    u1: np.ndarray,
    nt: int,
    B=None,
    boundary: Optional[np.ndarray] = None,
    forcing: Optional[Callable[[int], np.ndarray]] = None,
) -> Iterator[np.ndarray]:
    """Yield interior states ``u^0, u^1, ..., u^nt``.

    ``boundary`` is indexed by level (``boundary[k]`` has shape
    ``(n_gamma, ...)``) and enters through the lifting matrix ``B``.
    Works for a trailing batch axis on every array.
    """
    dt2 = dt * dt
    prev, cur = u0, u1
    yield prev
    yield cur
    for k in range(1, nt):
        acc = L @ cur
        if boundary is not None:
            acc = acc + B @ boundary[k]
        if forcing is not None:
            acc = acc + forcing(k)
        nxt = 2.0 * cur - prev + dt2 * acc
        prev, cur = cur, nxt
        yield cur


def _full(grid: Grid, interior: np.ndarray, gamma_vals: Optional[np.ndarray]) -> np.ndarray:
    u = np.zeros(grid.size)
    u[grid.interior_nodes] = interior
    if gamma_vals is not None:
        u[grid.gamma_nodes] = gamma_vals
    return u.reshape(grid.shape)


def _velocities(snaps: np.ndarray, dt: float, op: LaplaceBeltrami) -> np.ndarray:
    v = np.empty_like(snaps)
    v[1:-1] = (snaps[2:] - snaps[:-2]) / (2 * dt)
    v[0] = (snaps[1] - snaps[0]) / dt - 0.5 * dt * op.apply(snaps[0])
    v[-1] = (snaps[-1] - snaps[-2]) / dt + 0.5 * dt * op.apply(snaps[-1])
    return v


def _check_dt(grid, coeffs, speed, dt, cfl):
    dt_max = admissible_dt(grid, coeffs, speed, cfl)
    if dt > dt_max * (1 + 1e-12):
        raise CFLError(dt, dt_max)


def _resolve_time(tau, dt, nt, dirichlet, grid, coeffs, speed, cfl):
    if dirichlet is not None:
        if dirichlet.offset != 0.0:
            raise TraceError("Dirichlet data must live on integer time levels")
        if dirichlet.n_gamma != grid.n_gamma:
            raise TraceError(f"Dirichlet data has {dirichlet.n_gamma} nodes, grid has {grid.n_gamma}")
        return dirichlet.nt, dirichlet.dt
    if nt is not None and dt is not None:
        return int(nt), float(dt)
    if tau is None:
        raise ValueError("need tau, (nt, dt) or a Dirichlet trace to fix the time grid")
    if dt is None:
        return time_grid(tau, admissible_dt(grid, coeffs, speed, cfl))
    nt = int(round(tau / dt))
    if abs(nt * dt - tau) > 1e-12 * tau:
        raise ValueError("tau is not an integer multiple of dt")
    return nt, float(dt)


def solve_forward(
    grid: Grid,
    coeffs: CoefficientSet,
    init: CauchyData,
    *,
    tau: Optional[float] = None,
    dt: Optional[float] = None,
    nt: Optional[int] = None,
    dirichlet: Optional[BoundaryTrace] = None,
    forcing: Optional[np.ndarray] = None,
    speed: str = "c",
    cfl: float = 0.5,
    operator: Optional[LaplaceBeltrami] = None,
    store_velocity: bool = True,
) -> WaveTrajectory:
    """Integrate ``w_tt = A_{c^-2 g} w`` forward from Cauchy data.

    ``dirichlet`` gives the values on the accessible nodes; the rest of the
    boundary is held at zero.  ``forcing`` (optional) is an array of shape
    ``(nt + 1, *grid.shape)``.
    """
    nt, dt = _resolve_time(tau, dt, nt, dirichlet, grid, coeffs, speed, cfl)
    _check_dt(grid, coeffs, speed, dt, cfl)
    op = operator or assemble_laplace_beltrami(grid, coeffs, speed_weighted=speed)
    I = grid.interior_nodes
    a0 = grid.validate_field(init.position, "initial position").ravel()
    b0 = grid.validate_field(init.velocity, "initial velocity").ravel()
    gam = None if dirichlet is None else dirichlet.values
    f_int = None
    if forcing is not None:
        forcing = np.asarray(forcing, dtype=float)
        if forcing.shape != (nt + 1,) + grid.shape:
            raise ValueError("forcing must have shape (nt + 1, *grid.shape)")
        f_int = forcing.reshape(nt + 1, -1)[:, I]

    acc0 = op.apply(a0.reshape(grid.shape)).ravel()[I]
    if f_int is not None:
        acc0 = acc0 + f_int[0]
    u0 = a0[I]
    u1 = u0 + dt * b0[I] + 0.5 * dt * dt * acc0

    snaps = np.empty((nt + 1,) + grid.shape)
    stepper = leapfrog(
        op.interior_matrix,
        dt,
        u0,
        u1,
        nt,
        B=op.lifting,
        boundary=gam,
        forcing=None if f_int is None else (lambda k: f_int[k]),
    )
    for k, ui in enumerate(stepper):
        full = _full(grid, ui, None if gam is None else gam[k])
        if k == 0:
            full = a0.reshape(grid.shape).copy()
        snaps[k] = full
    vel = None
    if store_velocity:
        vel = _velocities(snaps, dt, op)
        if forcing is not None:
            vel[0] -= 0.5 * dt * _interior_only(grid, forcing[0])
            vel[-1] += 0.5 * dt * _interior_only(grid, forcing[-1])
    return WaveTrajectory(dt, snaps, vel)


def _interior_only(grid: Grid, f: np.ndarray) -> np.ndarray:
    return np.where(grid.interior_mask, f, 0.0)


def _check_control_endpoints(control: BoundaryTrace, pinned: int = 1) -> None:
    v = control.values
    scale = max(1.0, float(np.abs(v).max(initial=0.0)))
    ends = np.concatenate([v[:pinned], v[-pinned:]])
    if np.abs(ends).max(initial=0.0) > 1e-12 * scale:
        raise TraceError("control must vanish at t = 0 and t = tau")


def solve_time_reversed(
    grid: Grid,
    coeffs: CoefficientSet,
    control: BoundaryTrace,
    *,
    speed: str = "c",
    cfl: float = 0.5,
    operator: Optional[LaplaceBeltrami] = None,
    store_velocity: bool = True,
) -> WaveTrajectory:
    """Integrate backward from zero Cauchy data at ``t = tau`` with Dirichlet control.

    The result is returned in forward time order; ``traj.cauchy(0)`` gives
    the state reached at ``t = 0``.
    """
    if control.offset != 0.0:
        raise TraceError("controls must live on integer time levels")
    if control.n_gamma != grid.n_gamma:
        raise TraceError(f"control has {control.n_gamma} nodes, grid has {grid.n_gamma}")
    _check_control_endpoints(control)
    nt, dt = control.nt, control.dt
    _check_dt(grid, coeffs, speed, dt, cfl)
    op = operator or assemble_laplace_beltrami(grid, coeffs, speed_weighted=speed)
    rev = control.values[::-1]
    zero = np.zeros(grid.n_interior)
    u1 = 0.5 * dt * dt * (op.lifting @ rev[0])
    snaps = np.empty((nt + 1,) + grid.shape)
    for k, ui in enumerate(leapfrog(op.interior_matrix, dt, zero, u1, nt, B=op.lifting, boundary=rev)):
        snaps[nt - k] = _full(grid, ui, rev[k])
    vel = _velocities(snaps, dt, op) if store_velocity else None
    return WaveTrajectory(dt, snaps, vel)


def neumann_trace(
    traj: WaveTrajectory,
    grid: Grid,
    coeffs: CoefficientSet,
    *,
    method: str = "one_sided",
    speed: str = "c",
    operator: Optional[LaplaceBeltrami] = None,
) -> BoundaryTrace:
    """``nu . grad_{c^-2 g} u`` on the accessible nodes at every time level.

    ``method="one_sided"`` uses second-order one-sided normal differences.
    ``method="variational"`` returns the discrete flux ``(K u)_Gamma`` plus
    the boundary-node inertia term, divided by the surface weights; it is
    the trace for which the discrete Green identity of the leapfrog scheme
    holds exactly.
    """
    snaps = traj.snapshots
    gn = grid.gamma_nodes
    if method == "one_sided":
        s = coeffs.speed(speed)
        _, inv = coeffs.det_inv
        out = np.empty((snaps.shape[0], grid.n_gamma))
        nu = grid.gamma_normals
        tensor = inv.reshape(grid.dim, grid.dim, -1)[:, :, gn]
        if s is not None:
            tensor = tensor * (s.ravel()[gn] ** 2)
        for k, u in enumerate(snaps):
            eu = np.stack([g.ravel()[gn] for g in np.gradient(u, *grid.spacing, edge_order=2)], axis=0)
            out[k] = np.einsum("ja,abj,bj->j", nu, tensor, eu)
        return BoundaryTrace(traj.dt, out)
    if method == "variational":
        op = operator or assemble_laplace_beltrami(grid, coeffs, speed_weighted=speed)
        flat = snaps.reshape(snaps.shape[0], -1)
        kg = op.stiffness[gn]
        flux = (kg @ flat.T).T
        gvals = flat[:, gn]
        if gvals.shape[0] >= 3 and np.any(gvals):
            acc = np.empty_like(gvals)
            acc[1:-1] = (gvals[2:] - 2 * gvals[1:-1] + gvals[:-2]) / traj.dt**2
            acc[0], acc[-1] = acc[1], acc[-2]
            flux = flux + op.weights.ravel()[gn] * acc
        return BoundaryTrace(traj.dt, flux / op.gamma_weights)
    raise ValueError(f"unknown trace method {method!r}")


def time_derivative(trace: BoundaryTrace, scheme: str = "centered") -> BoundaryTrace:
    """Differentiate a trace in time.

    ``centered``: second-order centered differences with one-sided
    second-order ends, same levels as the input.  ``staggered``: forward
    differences placed at half levels (input must sit on integer levels).
    """
    v = trace.values
    if v.shape[0] < 3:
        raise TraceError("need at least two time steps")
    if scheme == "centered":
        return BoundaryTrace(trace.dt, np.gradient(v, trace.dt, axis=0, edge_order=2), trace.offset)
    if scheme == "staggered":
        if trace.offset != 0.0:
            raise TraceError("staggered differentiation expects integer-level input")
        return BoundaryTrace(trace.dt, np.diff(v, axis=0) / trace.dt, 0.5)
    raise ValueError(f"unknown scheme {scheme!r}")


def time_antiderivative(trace: BoundaryTrace) -> BoundaryTrace:
    """``int_0^t`` of a trace; returns integer-level values starting at zero.

    Integer-level input is integrated with the cumulative trapezoid rule,
    staggered input with the midpoint rule (the exact inverse of the
    staggered derivative).
    """
    v = trace.values
    out = np.zeros((trace.nt + 1, v.shape[1]))
    if trace.offset == 0.0:
        out[1:] = np.cumsum(0.5 * trace.dt * (v[1:] + v[:-1]), axis=0)
    else:
        out[1:] = np.cumsum(trace.dt * v, axis=0)
    return BoundaryTrace(trace.dt, out)


def discrete_energy(traj: WaveTrajectory, operator: LaplaceBeltrami) -> np.ndarray:
    """Leapfrog energy ``1/2 |D_t u|_W^2 + 1/2 (u^{k+1})^T K u^k`` at half levels.

    Exactly conserved for homogeneous boundary data and no forcing.
    """
    I = operator.grid.interior_nodes
    u = traj.snapshots.reshape(traj.snapshots.shape[0], -1)[:, I]
    w = operator.interior_weights
    K = operator.interior_stiffness
    du = np.diff(u, axis=0) / traj.dt
    kin = 0.5 * np.einsum("ti,i,ti->t", du, w, du)
    pot = 0.5 * np.einsum("ti,ti->t", u[1:], (K @ u[:-1].T).T)
    return kin + pot
