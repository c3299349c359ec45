"""Linearized contrast recovery from boundary measurements.

With ``w`` the field for the true speed ``c`` and ``w~`` the field for the
reference speed ``c~`` (same initial position and boundary data,
possibly different initial velocities), ``u = w - w~`` obeys

    u_tt - A_{c^-2 g} u = sigma f + Sigma . grad f,   f = c^2 - c~^2,

with ``sigma = A_g w~`` and ``Sigma = (2 - n)/2 grad_g w~``.  Pairing the
time derivative of ``u`` with the HUM-controlled state ``psi = d_t xi``
gives, for every target ``phi``,

    <sigma_0 f, phi> + <f, P(sigma_dot S phi)> = -<m_dot, C phi>,

which in the leapfrog discretization holds exactly (staggered time
differences, midpoint time sums) up to a term that vanishes when the
control drives ``xi(0)`` to zero.
"""
from __future__ import annotations

import logging
import math
import warnings
from dataclasses import dataclass, field
from typing import Optional, Sequence, Union

import numpy as np
import scipy.linalg as sla
import scipy.sparse.linalg as spla

from .control import (
    DEFAULT_ASSEMBLY_CAP,
    AssembledOperator,
    ControlError,
    ControlProblem,
    ModeResponses,
    _C_star_modal,
    assemble_C_and_S,
    mode_responses,
)
from .geometry import CoefficientSet, Grid, LaplaceBeltrami, assemble_laplace_beltrami, grad_g
from .wave import (
    BoundaryTrace,
    CauchyData,
    WaveTrajectory,
    neumann_trace,
    solve_forward,
    time_derivative,
)

__all__ = [
    "RecoveryError",
    "SourceFactors",
    "Measurement",
    "RecoverySystem",
    "ContrastResult",
    "compute_source_factors",
    "time_integral_P",
    "synthesize_measurement",
    "assemble_recovery_operator_2d",
    "assemble_multi_illumination",
    "solve_contrast",
    "recovery_identity_residual",
]

log = logging.getLogger(__name__)


class RecoveryError(RuntimeError):
    """Recovery system cannot be formed or solved."""


@dataclass
class SourceFactors:
    """``sigma^k`` and ``Sigma^k`` on the full grid at every time level.

    ``sigma_dot`` and ``Sigma_dot`` are staggered differences
    ``(a^{k+1} - a^k) / dt`` at half levels; centered versions are
    available through :meth:`centered`.
    """

    dt: float
    sigma: np.ndarray
    Sigma: np.ndarray
    delta: Optional[float] = None

    @property
    def nt(self) -> int:
        return self.sigma.shape[0] - 1

    @property
    def sigma0(self) -> np.ndarray:
        return self.sigma[0]

    @property
    def Sigma0(self) -> np.ndarray:
        return self.Sigma[0]

    @property
    def sigma_dot(self) -> np.ndarray:
        return np.diff(self.sigma, axis=0) / self.dt

    @property
    def Sigma_dot(self) -> np.ndarray:
        return np.diff(self.Sigma, axis=0) / self.dt

    def centered(self, which: str = "sigma") -> np.ndarray:
        a = self.sigma if which == "sigma" else self.Sigma
        return np.gradient(a, self.dt, axis=0, edge_order=2)

    def lower_bound(self, grid: Grid) -> float:
        return float(np.abs(self.sigma0[grid.interior_mask]).min())


@dataclass
class Measurement:
    """Boundary data ``m = lambda - lambda~`` on integer time levels."""

    m: BoundaryTrace
    forward: Optional[WaveTrajectory] = field(default=None, repr=False)
    reference: Optional[WaveTrajectory] = field(default=None, repr=False)
    noise_level: float = 0.0

    @property
    def m_dot(self) -> BoundaryTrace:
        return time_derivative(self.m, "staggered")

    def h1_norm(self, gamma_weights: np.ndarray) -> float:
        """Discrete ``H^1((0, tau); L^2(Gamma))`` norm."""
        return math.sqrt(self.m.norm(gamma_weights) ** 2 + self.m_dot.norm(gamma_weights) ** 2)


@dataclass
class RecoverySystem:
    """Linear system for the contrast.

    ``matrix`` is dense (single illumination) or a linear operator over
    ``n_blocks`` stacked interior fields (multi-illumination, unknowns
    ``(grad f, f)``).
    """

    grid: Grid
    matrix: Union[np.ndarray, spla.LinearOperator]
    rhs: np.ndarray
    weights: np.ndarray
    n_blocks: int = 1
    preconditioner: Optional[spla.LinearOperator] = None
    report: dict = field(default_factory=dict)
    compact: Optional[object] = field(default=None, repr=False)
    zeroth: Optional[np.ndarray] = field(default=None, repr=False)


@dataclass
class ContrastResult:
    f: np.ndarray
    c: Optional[np.ndarray]
    report: dict
    blocks: Optional[np.ndarray] = None


def compute_source_factors(
    traj: WaveTrajectory,
    grid: Grid,
    coeffs: CoefficientSet,
    operator_g: Optional[LaplaceBeltrami] = None,
) -> SourceFactors:
    """``sigma = A_g w~`` and ``Sigma = (2 - n)/2 grad_g w~`` per time level."""
    op = operator_g or assemble_laplace_beltrami(grid, coeffs, speed_weighted=False)
    n = grid.dim
    snaps = traj.snapshots.reshape(traj.snapshots.shape[0], -1)
    sigma = (op.full_matrix @ snaps.T).T.reshape(traj.snapshots.shape)
    Sigma = np.zeros((snaps.shape[0], n) + grid.shape)
    if n != 2:
        fac = 0.5 * (2 - n)
        for k, w in enumerate(traj.snapshots):
            Sigma[k] = fac * grad_g(w, grid, coeffs)
    return SourceFactors(traj.dt, sigma, Sigma)


def time_integral_P(traj, dt: Optional[float] = None, offset: Optional[float] = None) -> np.ndarray:
    """``int_0^tau v(t) dt`` per node.

    Integer-level histories use the trapezoid rule; staggered histories
    (``offset == 0.5``) the midpoint rule.
    """
    if isinstance(traj, WaveTrajectory):
        v, dt, offset = traj.snapshots, traj.dt, traj.offset
    else:
        v = np.asarray(traj, dtype=float)
        if dt is None:
            raise ValueError("dt is required for a raw array")
        offset = 0.0 if offset is None else offset
    if offset == 0.0:
        return dt * (v.sum(axis=0) - 0.5 * (v[0] + v[-1]))
    return dt * v.sum(axis=0)


def synthesize_measurement(
    grid: Grid,
    coeffs: CoefficientSet,
    alpha: np.ndarray,
    beta: np.ndarray,
    beta_ref: np.ndarray,
    *,
    nt: int,
    dt: float,
    gamma: Optional[BoundaryTrace] = None,
    trace_method: str = "variational",
    noise: float = 0.0,
    rng: Optional[np.random.Generator] = None,
    operator: Optional[LaplaceBeltrami] = None,
) -> Measurement:
    """Twin forward solves with ``c`` and ``c_ref`` and the difference of their traces.

    Both traces are taken with the ``c^-2 g`` flux, so ``m`` is the trace
    of ``u = w - w~``.  ``noise`` adds Gaussian noise with standard
    deviation ``noise * max|m|``.
    """
    if coeffs.c_ref is None:
        raise ValueError("coefficient set needs a reference speed c_ref")
    op_c = operator or assemble_laplace_beltrami(grid, coeffs, speed_weighted="c")
    op_r = assemble_laplace_beltrami(grid, coeffs, speed_weighted="c_ref")
    kw = dict(nt=nt, dt=dt, dirichlet=gamma)
    w = solve_forward(grid, coeffs, CauchyData(alpha, beta), speed="c", operator=op_c, **kw)
    wr = solve_forward(grid, coeffs, CauchyData(alpha, beta_ref), speed="c_ref", operator=op_r, **kw)
    tw = neumann_trace(w, grid, coeffs, method=trace_method, speed="c", operator=op_c)
    tr = neumann_trace(wr, grid, coeffs, method=trace_method, speed="c", operator=op_c)
    m = tw - tr
    level = 0.0
    if noise > 0:
        rng = rng or np.random.default_rng()
        level = noise * float(np.abs(m.values).max())
        m = BoundaryTrace(m.dt, m.values + level * rng.standard_normal(m.values.shape))
    return Measurement(m, forward=w, reference=wr, noise_level=level)


def _worst_node(grid: Grid, values: np.ndarray) -> tuple:
    I = grid.interior_nodes
    k = int(np.argmin(np.abs(values)))
    return tuple(int(i) for i in np.unravel_index(I[k], grid.shape))


def _interior(grid: Grid, a: np.ndarray) -> np.ndarray:
    """Interior values of a full-grid field (leading axes kept)."""
    lead = a.shape[: a.ndim - grid.dim]
    return a.reshape(lead + (-1,))[..., grid.interior_nodes]


def _compact_from_S(prob: ControlProblem, S: AssembledOperator, weight: np.ndarray) -> np.ndarray:
    nt, nI = prob.nt, prob.grid.n_interior
    Sr = S.left.reshape(nt, nI, -1)
    return prob.dt * np.einsum("ji,jir->ir", weight, Sr)


def assemble_recovery_operator_2d(
    prob: ControlProblem,
    factors: SourceFactors,
    measurement: Measurement,
    S: Optional[AssembledOperator] = None,
    *,
    delta: Optional[float] = None,
    cap: int = DEFAULT_ASSEMBLY_CAP,
    responses: Optional[ModeResponses] = None,
) -> RecoverySystem:
    """``[sigma_0 + (P sigma_dot S)^*] f = -C^* m_dot`` in the weighted inner product.

    ``(P sigma_dot S) phi = dt sum_j sigma_dot^{j+1/2} psi^{j+1/2}[phi]``
    factors through the retained modes as ``X_r V_r^T W``; its adjoint is
    ``V_r X_r^T W``.
    """
    grid = prob.grid
    if grid.dim != 2:
        raise RecoveryError("the single-illumination system drops Sigma and needs n = 2; use multi-illumination")
    if grid.n_interior > cap:
        raise ControlError(f"{grid.n_interior} interior nodes exceed the assembly cap of {cap}; coarsen the grid")
    if factors.nt != prob.nt or abs(factors.dt - prob.dt) > 1e-14 * prob.dt:
        raise RecoveryError("source factors and control problem use different time grids")
    s0 = _interior(grid, factors.sigma0)
    dmin = float(np.abs(s0).min())
    need = delta if delta is not None else 0.0
    if dmin <= need or dmin == 0.0:
        raise RecoveryError(
            f"|sigma_0| = {dmin:.3e} below delta = {need:.3e} at node {_worst_node(grid, s0)}; illumination is inadequate"
        )
    sdot = _interior(grid, factors.sigma_dot)
    w = prob.operator.interior_weights
    _, V = prob.modes
    if S is not None:
        X = _compact_from_S(prob, S, sdot)
        Cstar = None
    else:
        responses = responses or mode_responses(prob, weights=[sdot], store_C=False)
        X = responses.X[0]
    compact = AssembledOperator(X, V.T * w[None, :], w, w, codomain="H0(Omega)")
    A = np.diag(s0) + compact.adjoint_dense
    md = measurement.m_dot.values
    rhs = -_C_star_modal(prob, [md])[0]
    report = {"delta_observed": dmin, "n_modes": prob.n_modes, "nt": prob.nt}
    return RecoverySystem(grid, A, rhs, w, 1, report=report, compact=compact, zeroth=s0)


def recovery_identity_residual(system: RecoverySystem, f_true: np.ndarray) -> tuple[float, float]:
    """``(|A f + C^* m_dot|_W, |sigma_0 f|_W)`` for a known contrast."""
    grid = system.grid
    fi = _interior(grid, np.asarray(f_true, dtype=float))
    if system.n_blocks != 1:
        raise ValueError("identity residual is defined for the single-illumination system")
    r = system.matrix @ fi - system.rhs
    w = system.weights
    return math.sqrt(float(np.sum(w * r * r))), math.sqrt(float(np.sum(w * (system.zeroth * fi) ** 2)))


def _interior_gradient(grid: Grid, fi: np.ndarray) -> np.ndarray:
    full = np.zeros(grid.size)
    full[grid.interior_nodes] = fi
    g = np.gradient(full.reshape(grid.shape), *grid.spacing, edge_order=2)
    return np.stack([_interior(grid, gi) for gi in g])


def assemble_multi_illumination(
    prob: ControlProblem,
    factor_sets: Sequence[SourceFactors],
    measurements: Sequence[Measurement],
    *,
    delta: Optional[float] = None,
    responses: Optional[ModeResponses] = None,
    chunk: Optional[int] = None,
) -> RecoverySystem:
    """Block system ``[M_0 + K] F = M`` for ``F = (grad f, f)``.

    Row ``i`` pairs illumination ``i``; ``M_0`` holds
    ``(Sigma_i, sigma_i)`` at ``t = 0`` and
    ``K_ij = (P A_dot_ij S)^*`` with ``A_ij`` the same entries in time.
    ``grad f`` and ``f`` are treated as independent unknowns.
    """
    grid = prob.grid
    n = grid.dim
    nb = n + 1
    if len(factor_sets) != nb or len(measurements) != nb:
        raise RecoveryError(f"need {nb} illuminations for n = {n}")
    nI = grid.n_interior
    M0 = np.empty((nI, nb, nb))
    weights = []
    for i, fs in enumerate(factor_sets):
        if fs.nt != prob.nt:
            raise RecoveryError("source factors and control problem use different time grids")
        M0[:, i, :n] = _interior(grid, fs.Sigma0).T
        M0[:, i, n] = _interior(grid, fs.sigma0)
        Sd = _interior(grid, fs.Sigma_dot)  # (nt, n, nI)
        for j in range(n):
            weights.append(Sd[:, j])
        weights.append(_interior(grid, fs.sigma_dot))
    det = np.linalg.det(M0)
    dmin = float(np.abs(det).min())
    need = delta if delta is not None else 0.0
    if dmin <= need or dmin == 0.0:
        raise RecoveryError(
            f"|det M_0| = {dmin:.3e} below delta = {need:.3e} at node {_worst_node(grid, det)}; illuminations are inadequate"
        )
    if responses is None:
        responses = mode_responses(prob, weights=weights, store_C=False, chunk=chunk)
    X = np.stack(responses.X).reshape(nb, nb, nI, -1)  # X[i, j]
    w = prob.operator.interior_weights
    _, V = prob.modes
    M0inv = np.linalg.inv(M0)

    def matvec(x):
        F = x.reshape(nb, nI)
        out = np.einsum("kij,jk->ik", M0, F)
        WF = F * w[None, :]
        # K_ij F_j = V X_ij^T W F_j
        coef = np.einsum("ijkr,jk->ir", X, WF)
        out += coef @ V.T
        return out.ravel()

    def precond(x):
        R = x.reshape(nb, nI)
        return np.einsum("kij,jk->ik", M0inv, R).ravel()

    N = nb * nI
    A = spla.LinearOperator((N, N), matvec=matvec, dtype=float)
    P = spla.LinearOperator((N, N), matvec=precond, dtype=float)
    mdots = [ms.m_dot.values for ms in measurements]
    rhs = -np.concatenate(_C_star_modal(prob, mdots))
    report = {"det_min": dmin, "n_modes": prob.n_modes, "nt": prob.nt}
    return RecoverySystem(grid, A, rhs, np.tile(w, nb), nb, preconditioner=P, report=report, zeroth=M0)


def _solve_dense(A, b, weights, noise_norm, report):
    n = A.shape[0]
    cond = float(np.linalg.cond(A))
    report["condition"] = cond
    if not np.isfinite(cond) or cond > 1e13:
        raise RecoveryError(f"recovery matrix is singular to working precision (condition estimate {cond:.3e})")
    if noise_norm is None or noise_norm <= 0:
        lu = sla.lu_factor(A)
        x = sla.lu_solve(lu, b)
        report["method"] = "lu"
    else:
        # Tikhonov in the weighted norm, parameter by the discrepancy principle.
        sw = np.sqrt(weights)
        Aw = sw[:, None] * A / sw[None, :]
        bw = sw * b
        U, s, Vt = np.linalg.svd(Aw)
        beta = U.T @ bw

        def resid(a):
            return float(np.linalg.norm(beta * a / (s**2 + a)))

        target = 1.1 * noise_norm
        lo, hi = 1e-16 * s[0] ** 2, 1e2 * s[0] ** 2
        if resid(lo) >= target:
            a = lo
        else:
            for _ in range(200):
                mid = math.sqrt(lo * hi)
                if resid(mid) > target:
                    hi = mid
                else:
                    lo = mid
                if hi / lo < 1 + 1e-6:
                    break
            a = lo
        xw = Vt.T @ (s * beta / (s**2 + a))
        x = xw / sw
        report["method"] = "tikhonov"
        report["tikhonov_alpha"] = a
    r = A @ x - b
    report["residual"] = float(np.sqrt(np.sum(weights * r * r)) / max(np.sqrt(np.sum(weights * b * b)), 1e-300))
    return x


def solve_contrast(
    system: RecoverySystem,
    coeffs: Optional[CoefficientSet] = None,
    *,
    c_min: Optional[float] = None,
    noise_norm: Optional[float] = None,
    tol: float = 1e-10,
    maxiter: int = 500,
) -> ContrastResult:
    """Solve for ``f = c^2 - c_ref^2`` and optionally recover ``c``.

    Dense systems are factorized directly (Tikhonov with the discrepancy
    principle when ``noise_norm`` is given).  Block systems use
    preconditioned GMRES.  With ``coeffs`` supplied, ``c =
    sqrt(max(c_ref^2 + f, c_min^2))``; clamping triggers a warning.
    """
    grid = system.grid
    report = dict(system.report)
    nI = grid.n_interior
    if not np.any(system.rhs):
        x = np.zeros(system.rhs.size)
        report.update(residual=0.0, method="zero")
    elif isinstance(system.matrix, np.ndarray):
        x = _solve_dense(system.matrix, system.rhs, system.weights, noise_norm, report)
    else:
        it = [0]

        def cb(_r):
            it[0] += 1

        x, info = spla.gmres(
            system.matrix, system.rhs, rtol=tol, atol=0.0, restart=min(200, system.rhs.size), maxiter=maxiter,
            M=system.preconditioner, callback=cb, callback_type="pr_norm",
        )
        r = system.matrix @ x - system.rhs
        report.update(
            method="gmres",
            iterations=it[0],
            converged=info == 0,
            residual=float(np.linalg.norm(r) / np.linalg.norm(system.rhs)),
        )
        if info != 0:
            warnings.warn(f"GMRES did not converge (relative residual {report['residual']:.3e})", RuntimeWarning, stacklevel=2)
    blocks = x.reshape(system.n_blocks, nI)
    fi = blocks[-1]
    if system.n_blocks > 1:
        g = _interior_gradient(grid, fi)
        num = np.linalg.norm(blocks[:-1] - g)
        report["gradient_consistency"] = float(num / max(np.linalg.norm(g), 1e-300))
    f = np.zeros(grid.size)
    f[grid.interior_nodes] = fi
    f = f.reshape(grid.shape)
    c = None
    if coeffs is not None and coeffs.c_ref is not None:
        cr2 = np.broadcast_to(coeffs.c_ref, grid.shape) ** 2
        floor = (c_min if c_min is not None else 0.1 * float(np.min(coeffs.c_ref))) ** 2
        c2 = cr2 + f
        clamped = int(np.count_nonzero(c2 < floor))
        report["clamped_nodes"] = clamped
        if clamped:
            warnings.warn(f"recovered c^2 clamped below at {floor:.3e} on {clamped} nodes", RuntimeWarning, stacklevel=2)
        c = np.sqrt(np.maximum(c2, floor))
    return ContrastResult(f, c, report, blocks if system.n_blocks > 1 else None)
