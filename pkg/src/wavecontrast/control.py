"""Minimum-norm Dirichlet controls (HUM) and the control operators built on them.

Discrete setting
----------------
A control is a trace ``zeta`` on the accessible nodes at time levels
``0..nt``; levels ``0, 1, nt-1, nt`` are pinned to zero, the rest are free.
The time-reversed leapfrog solve started from rest at ``t = tau`` maps a
control to the Cauchy data ``(xi^0, v^0)`` at ``t = 0``.  Targets are
filtered: only the lowest ``r = kappa * n_interior`` eigenmodes of
``K_II v = lambda W v`` are driven, i.e. the constraints are

    V_r^T W xi^0 = 0,    V_r^T W v^0 = V_r^T W phi.

Among all controls meeting them, the one minimizing the discrete
``H^1_0((0, tau) x Gamma)`` norm ``z^T H z`` is selected, where

    H = T_t (x) M_Gamma + dt I (x) S_Gamma,

``T_t = tridiag(-1, 2, -1) / dt`` on the free levels, ``M_Gamma`` the
surface weights and ``S_Gamma`` a weighted graph Laplacian along Gamma.
The Lagrange multipliers solve ``(G H^-1 G^T + eps s I) lam = rhs`` with
``s`` the mean diagonal of the Gram matrix.

Because ``L V_r = -V_r diag(lambda)``, the transpose of the
control-to-state map restricted to mode outputs factors into scalar
leapfrog recurrences per mode times the boundary flux of that mode.  The
"direct" path uses this to build the Gram matrix exactly; the "cg" path
applies ``G`` and ``G^T`` through sparse wave solves.
"""
from __future__ import annotations

import logging
import math
import warnings
from dataclasses import dataclass, field
from functools import cached_property
from typing import Optional, Sequence

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .geometry import CoefficientSet, Grid, LaplaceBeltrami, assemble_laplace_beltrami
from .wave import BoundaryTrace, CauchyData, WaveTrajectory, admissible_dt, leapfrog, time_grid

__all__ = [
    "ControlError",
    "ControlProblem",
    "ControlTrace",
    "AssembledOperator",
    "ModeResponses",
    "hum_min_norm_control",
    "control_residuals",
    "op_C",
    "op_S",
    "assemble_C_and_S",
    "apply_C_star",
    "mode_responses",
    "DEFAULT_ASSEMBLY_CAP",
]

log = logging.getLogger(__name__)

DEFAULT_ASSEMBLY_CAP = 1600
PINNED = 2  # zero levels at each end of a control


class ControlError(RuntimeError):
    """HUM solve failed or the request is outside supported sizes."""


@dataclass
class ControlTrace(BoundaryTrace):
    """A control together with its solver report."""

    iterations: int = 0
    residual: float = 0.0
    converged: bool = True
    multiplier: Optional[np.ndarray] = field(default=None, repr=False)


@dataclass
class ControlProblem:
    """HUM setup for ``(Omega, c^-2 g, Gamma, tau)``.

    Parameters
    ----------
    grid, coeffs
        Geometry; the control is posed for the metric ``c^-2 g`` with the
        true speed ``coeffs.c``.
    tau
        Control time.
    eps
        Relative Tikhonov weight on the multiplier system.
    kappa
        Fraction of interior modes retained by the target filter.
    tol, max_iter
        Conjugate-gradient settings for the matrix-free path.
    dt
        Optional time step; defaults to the CFL-admissible one (also
        accounting for ``c_ref`` so that twin solves share the grid).
    """

    grid: Grid
    coeffs: CoefficientSet
    tau: float
    eps: float = 1e-8
    kappa: float = 0.25
    tol: float = 1e-8
    max_iter: int = 200
    dt: Optional[float] = None
    cfl: float = 0.5
    speed: str = "c"

    def __post_init__(self):
        if not self.tau > 0:
            raise ValueError("tau must be positive")
        if self.eps < 0:
            raise ValueError("eps must be nonnegative")
        if not 0 < self.kappa <= 1:
            raise ValueError("kappa must lie in (0, 1]")
        dt_max = admissible_dt(self.grid, self.coeffs, self.speed, self.cfl)
        if self.coeffs.c_ref is not None:
            dt_max = min(dt_max, admissible_dt(self.grid, self.coeffs, "c_ref", self.cfl))
        if self.dt is None:
            self.nt, self.dt = time_grid(self.tau, dt_max)
        else:
            self.nt = int(round(self.tau / self.dt))
            if abs(self.nt * self.dt - self.tau) > 1e-12 * self.tau:
                raise ValueError("tau is not an integer multiple of dt")
            if self.dt > dt_max * (1 + 1e-12):
                from .wave import CFLError

                raise CFLError(self.dt, dt_max)
        if self.nt < 2 * PINNED + 1:
            raise ValueError("too few time steps for a pinned control")

    # ---- discretization pieces -------------------------------------------------
    @cached_property
    def operator(self) -> LaplaceBeltrami:
        return assemble_laplace_beltrami(self.grid, self.coeffs, speed_weighted=self.speed)

    @property
    def n_free(self) -> int:
        return self.nt + 1 - 2 * PINNED

    @property
    def free(self) -> slice:
        return slice(PINNED, self.nt + 1 - PINNED)

    @property
    def n_modes(self) -> int:
        return max(1, int(round(self.kappa * self.grid.n_interior)))

    @cached_property
    def modes(self) -> tuple[np.ndarray, np.ndarray]:
        """Lowest eigenpairs of ``K_II v = lambda W v``, ``W``-orthonormal."""
        w = self.operator.interior_weights
        s = 1.0 / np.sqrt(w)
        K = self.operator.interior_stiffness.toarray() * s[:, None] * s[None, :]
        lam, Vs = sla.eigh(K, subset_by_index=[0, self.n_modes - 1])
        return lam, Vs * s[:, None]

    def project(self, phi_int: np.ndarray) -> np.ndarray:
        """Mode coefficients ``V_r^T W phi``."""
        _, V = self.modes
        w = self.operator.interior_weights
        return V.T @ (w[:, None] * phi_int if phi_int.ndim == 2 else w * phi_int)

    def filter(self, phi: np.ndarray) -> np.ndarray:
        """Full-grid field projected onto the retained modes."""
        _, V = self.modes
        out = np.zeros(self.grid.size)
        out[self.grid.interior_nodes] = V @ self.project(self._interior(phi))
        return out.reshape(self.grid.shape)

    def _interior(self, phi: np.ndarray) -> np.ndarray:
        phi = self.grid.validate_field(phi, "target")
        return phi.ravel()[self.grid.interior_nodes]

    @cached_property
    def gamma_laplacian(self) -> sp.csr_matrix:
        e = self.grid.gamma_edges
        wg = self.operator.gamma_weights
        h = np.asarray(self.grid.spacing)[e[:, 2]]
        we = 0.5 * (wg[e[:, 0]] + wg[e[:, 1]]) / h**2
        n = self.grid.n_gamma
        A = sp.coo_matrix((we, (e[:, 0], e[:, 1])), shape=(n, n))
        A = (A + A.T).tocsr()
        return sp.csr_matrix(sp.diags(np.asarray(A.sum(axis=1)).ravel()) - A)

    @cached_property
    def _time_factor(self) -> tuple[np.ndarray, np.ndarray]:
        nf = self.n_free
        k = np.arange(1, nf + 1)
        theta = (2 - 2 * np.cos(np.pi * k / (nf + 1))) / self.dt
        Q = math.sqrt(2.0 / (nf + 1)) * np.sin(np.pi * np.outer(np.arange(1, nf + 1), k) / (nf + 1))
        return theta, Q

    @cached_property
    def _gamma_factor(self) -> tuple[np.ndarray, np.ndarray]:
        mu, U = sla.eigh(self.gamma_laplacian.toarray(), np.diag(self.operator.gamma_weights))
        return np.maximum(mu, 0.0), U

    @cached_property
    def _denominator(self) -> np.ndarray:
        theta, _ = self._time_factor
        mu, _ = self._gamma_factor
        return theta[:, None] + self.dt * mu[None, :]

    def apply_H(self, z: np.ndarray) -> np.ndarray:
        """``H z`` for free-level values ``z`` of shape ``(n_free, n_gamma, ...)``."""
        wg = self.operator.gamma_weights
        S = self.gamma_laplacian
        wgb = wg.reshape((1, -1) + (1,) * (z.ndim - 2))
        tz = 2 * z
        tz[1:] -= z[:-1]
        tz[:-1] -= z[1:]
        out = tz / self.dt * wgb
        sz = np.stack([S @ zk for zk in z], axis=0)
        return out + self.dt * sz

    def apply_H_inv(self, z: np.ndarray) -> np.ndarray:
        _, Q = self._time_factor
        _, U = self._gamma_factor
        zt = np.einsum("ma,mg,gb...->ab...", Q, z, U, optimize=True)
        zt = zt / self._denominator.reshape(self._denominator.shape + (1,) * (z.ndim - 2))
        return np.einsum("ma,ab...,gb->mg...", Q, zt, U, optimize=True)

    def control_norm(self, trace: BoundaryTrace) -> float:
        z = trace.values[self.free]
        return math.sqrt(max(float(np.sum(z * self.apply_H(z))), 0.0))

    def embed(self, z: np.ndarray) -> np.ndarray:
        """Free-level values to a full ``(nt + 1, n_gamma, ...)`` control array."""
        full = np.zeros((self.nt + 1,) + z.shape[1:])
        full[self.free] = z
        return full

    # ---- control-to-state map through wave solves ------------------------------
    def reversed_endpoints(self, zeta: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """``(xi^0, v^0)`` on interior nodes for full controls ``(nt + 1, n_gamma, ...)``."""
        op = self.operator
        L, B, dt = op.interior_matrix, op.lifting, self.dt
        rev = zeta[::-1]
        shape = (self.grid.n_interior,) + zeta.shape[2:]
        u0 = np.zeros(shape)
        u1 = 0.5 * dt * dt * (B @ rev[0])
        last = prev = None
        for state in leapfrog(L, dt, u0, u1, self.nt, B=B, boundary=rev):
            prev, last = last, state
        xi0, xi1 = last, prev
        v0 = (xi1 - xi0) / dt - 0.5 * dt * (L @ xi0 + B @ zeta[0])
        return xi0, v0

    def G_wave(self, z: np.ndarray) -> np.ndarray:
        xi0, v0 = self.reversed_endpoints(self.embed(z))
        return np.concatenate([self.project(xi0), self.project(v0)], axis=0)

    def GT_wave(self, lam: np.ndarray) -> np.ndarray:
        """Transpose of :meth:`G_wave` by a forward adjoint leapfrog solve."""
        r = self.n_modes
        _, V = self.modes
        op = self.operator
        L, dt = op.interior_matrix, self.dt
        a = V @ lam[:r]
        b = V @ lam[r:]
        y0 = -b / dt
        y1 = a - b / dt - 0.5 * dt * (L @ b)
        KGI = op.gamma_interior_stiffness
        out = np.empty((self.n_free, self.grid.n_gamma) + lam.shape[1:])
        lo = PINNED
        for m, y in enumerate(leapfrog(L, dt, y0, y1, self.nt - PINNED)):
            if m >= lo:
                out[m - lo] = -dt * dt * (KGI @ y)
        return out

    # ---- modal factorization ---------------------------------------------------
    @cached_property
    def mode_flux(self) -> np.ndarray:
        """``B^T W V_r = -K_{Gamma I} V_r``, shape ``(n_gamma, r)``."""
        _, V = self.modes
        return -(self.operator.gamma_interior_stiffness @ V)

    @cached_property
    def mode_coefficients(self) -> np.ndarray:
        """Scalar adjoint recurrences, shape ``(2, r, nt + 1)``: position then velocity rows."""
        lam, _ = self.modes
        dt = self.dt
        c = np.zeros((2, lam.size, self.nt + 1))
        c[0, :, 1] = 1.0
        c[1, :, 0] = -1.0 / dt
        c[1, :, 1] = -1.0 / dt + 0.5 * dt * lam
        amp = 2.0 - dt * dt * lam
        for m in range(1, self.nt):
            c[:, :, m + 1] = amp * c[:, :, m] - c[:, :, m - 1]
        return c

    @cached_property
    def _hat(self) -> tuple[np.ndarray, np.ndarray]:
        _, Q = self._time_factor
        _, U = self._gamma_factor
        A = self.dt**2 * self.mode_coefficients[:, :, self.free] @ Q  # (2, r, nf)
        P = self.mode_flux.T @ U  # (r, n_gamma)
        return A.reshape(2 * self.n_modes, -1), P

    def G_modal(self, z: np.ndarray) -> np.ndarray:
        r = self.n_modes
        c = self.dt**2 * self.mode_coefficients[:, :, self.free]
        flux = np.einsum("gi,mg...->im...", self.mode_flux, z)
        return np.einsum("pim,im...->pi...", c, flux).reshape((2 * r,) + z.shape[2:])

    def GT_modal(self, lam: np.ndarray) -> np.ndarray:
        r = self.n_modes
        c = self.dt**2 * self.mode_coefficients[:, :, self.free]
        l2 = lam.reshape((2, r) + lam.shape[1:])
        coef = np.einsum("pim,pi...->im...", c, l2)
        return np.einsum("gi,im...->mg...", self.mode_flux, coef)

    def control_from_multiplier(self, lam: np.ndarray) -> np.ndarray:
        """``H^-1 G^T lam`` on free levels, computed in the factored basis."""
        A, P = self._hat
        r = self.n_modes
        Pr = np.concatenate([P, P], axis=0)
        zt = np.einsum("Ra,Rb,R...->ab...", A, Pr, lam, optimize=True)
        zt = zt / self._denominator.reshape(self._denominator.shape + (1,) * (lam.ndim - 1))
        _, Q = self._time_factor
        _, U = self._gamma_factor
        return np.einsum("ma,ab...,gb->mg...", Q, zt, U, optimize=True)

    @cached_property
    def gram(self) -> np.ndarray:
        """Unregularized multiplier Gram matrix ``G H^-1 G^T`` (``2r x 2r``)."""
        A, P = self._hat
        D = self._denominator
        r = self.n_modes
        out = np.zeros((2 * r, 2 * r))
        for a in range(A.shape[1]):
            Ma = (P / D[a]) @ P.T
            out += np.outer(A[:, a], A[:, a]) * np.tile(Ma, (2, 2))
        return 0.5 * (out + out.T)

    @cached_property
    def gram_scale(self) -> float:
        """Mean diagonal of the Gram matrix (sets the scale of ``eps``)."""
        A, P = self._hat
        D = self._denominator
        Pr = np.concatenate([P, P], axis=0)
        diag = np.einsum("Ra,ab,Rb->R", A**2, 1.0 / D, Pr**2)
        return float(diag.mean())

    @cached_property
    def _gram_factor(self):
        M = self.gram + self.eps * self.gram_scale * np.eye(self.gram.shape[0])
        try:
            return ("chol", sla.cho_factor(M))
        except np.linalg.LinAlgError:
            return ("lu", sla.lu_factor(M))

    def solve_gram(self, rhs: np.ndarray) -> np.ndarray:
        kind, fac = self._gram_factor
        return sla.cho_solve(fac, rhs) if kind == "chol" else sla.lu_solve(fac, rhs)

    def target_rhs(self, phi_int: np.ndarray) -> np.ndarray:
        b = self.project(phi_int)
        return np.concatenate([np.zeros_like(b), b], axis=0)


def _zero_control(prob: ControlProblem) -> ControlTrace:
    return ControlTrace(prob.dt, np.zeros((prob.nt + 1, prob.grid.n_gamma)), iterations=0, residual=0.0)


def hum_min_norm_control(
    prob: ControlProblem, phi: np.ndarray, method: str = "cg", warn: bool = True
) -> ControlTrace:
    """Minimum-norm control driving the system from rest at ``tau`` to ``(0, phi)`` at ``t = 0``.

    ``method="cg"`` runs conjugate gradients on the multiplier system with
    ``G`` and ``G^T`` applied by wave solves; ``method="direct"`` solves
    the exactly assembled multiplier system.  The returned trace reports
    iterations and the relative multiplier residual; ``converged`` is False
    (and a warning is issued) when CG stops short of ``prob.tol``.
    """
    phi_int = prob._interior(phi)
    if not np.any(phi_int):
        return _zero_control(prob)
    rhs = prob.target_rhs(phi_int)
    reg = prob.eps * prob.gram_scale
    if method == "direct":
        lam = prob.solve_gram(rhs)
        z = prob.control_from_multiplier(lam)
        res = np.linalg.norm(prob.gram @ lam + reg * lam - rhs) / np.linalg.norm(rhs)
        return ControlTrace(prob.dt, prob.embed(z), iterations=0, residual=float(res), multiplier=lam)
    if method != "cg":
        raise ValueError(f"unknown method {method!r}")

    n = rhs.size

    def matvec(x):
        return prob.G_wave(prob.apply_H_inv(prob.GT_wave(x))) + reg * x

    Lop = spla.LinearOperator((n, n), matvec=matvec, dtype=float)
    count = [0]

    def cb(_xk):
        count[0] += 1

    lam, info = spla.cg(Lop, rhs, rtol=prob.tol, atol=0.0, maxiter=prob.max_iter, callback=cb)
    res = float(np.linalg.norm(matvec(lam) - rhs) / np.linalg.norm(rhs))
    z = prob.apply_H_inv(prob.GT_wave(lam))
    converged = info == 0
    if not converged and warn:
        warnings.warn(
            f"HUM conjugate gradients stopped after {count[0]} iterations with relative residual {res:.3e}",
            RuntimeWarning,
            stacklevel=2,
        )
    return ControlTrace(prob.dt, prob.embed(z), iterations=count[0], residual=res, converged=converged, multiplier=lam)


def control_residuals(prob: ControlProblem, control: BoundaryTrace, phi: np.ndarray) -> tuple[float, float]:
    """``(|xi(0)|_W / |phi|_W, |d_t xi(0) - phi|_W / |phi|_W)`` from a fresh reversed solve."""
    phi_int = prob._interior(phi)
    xi0, v0 = prob.reversed_endpoints(control.values)
    w = prob.operator.interior_weights
    nrm = math.sqrt(float(np.sum(w * phi_int**2)))
    if nrm == 0:
        return 0.0, 0.0
    return (
        math.sqrt(float(np.sum(w * xi0**2))) / nrm,
        math.sqrt(float(np.sum(w * (v0 - phi_int) ** 2))) / nrm,
    )


def op_C(prob: ControlProblem, phi: np.ndarray, method: str = "cg") -> BoundaryTrace:
    """``phi -> d_t zeta_min`` as a staggered trace (``nt`` half levels)."""
    zeta = hum_min_norm_control(prob, phi, method=method)
    return BoundaryTrace(prob.dt, np.diff(zeta.values, axis=0) / prob.dt, 0.5)


def op_S(prob: ControlProblem, phi: np.ndarray, method: str = "cg") -> WaveTrajectory:
    """``phi -> d_t xi`` for the controlled state, at half levels."""
    from .wave import solve_time_reversed

    zeta = hum_min_norm_control(prob, phi, method=method)
    xi = solve_time_reversed(
        prob.grid, prob.coeffs, BoundaryTrace(prob.dt, zeta.values), speed=prob.speed, cfl=prob.cfl, operator=prob.operator
    )
    psi = np.diff(xi.snapshots, axis=0) / prob.dt
    return WaveTrajectory(prob.dt, psi, offset=0.5)


@dataclass
class AssembledOperator:
    """Linear map stored as ``left @ right`` with diagonal Gram weights.

    ``right`` maps the domain into retained-mode coordinates and ``left``
    expands those into the codomain, so ``dense`` has rank at most ``r``.
    Adjoints use the weights: ``A* = G_dom^-1 A^T G_cod``.
    """

    left: np.ndarray
    right: np.ndarray
    gram_domain: np.ndarray
    gram_codomain: np.ndarray
    domain: str = "H0(Omega)"
    codomain: str = ""

    @property
    def shape(self) -> tuple[int, int]:
        return self.left.shape[0], self.right.shape[1]

    @property
    def dense(self) -> np.ndarray:
        return self.left @ self.right

    def gram(self, which: str = "domain") -> sp.dia_matrix:
        return sp.diags(self.gram_domain if which == "domain" else self.gram_codomain)

    def apply(self, x: np.ndarray) -> np.ndarray:
        return self.left @ (self.right @ x)

    def adjoint(self, y: np.ndarray) -> np.ndarray:
        gc = self.gram_codomain if y.ndim == 1 else self.gram_codomain[:, None]
        gd = self.gram_domain if y.ndim == 1 else self.gram_domain[:, None]
        return (self.right.T @ (self.left.T @ (gc * y))) / gd

    @property
    def adjoint_dense(self) -> np.ndarray:
        return (self.right.T / self.gram_domain[:, None]) @ (self.left.T * self.gram_codomain[None, :])

    def inner_domain(self, x, y) -> float:
        return float(np.sum(self.gram_domain * x * y))

    def inner_codomain(self, x, y) -> float:
        return float(np.sum(self.gram_codomain * x * y))


@dataclass
class ModeResponses:
    """Per-mode outputs of the HUM map collected in one batched sweep.

    ``C`` holds staggered control derivatives (``nt, n_gamma, r``);
    ``S`` (if stored) the staggered state derivatives (``nt, n_interior, r``);
    ``X[i]`` the weighted time sums ``dt sum_j a_i^{j+1/2} psi^{j+1/2}``
    (``n_interior, r``) for each supplied coefficient history.
    """

    C: Optional[np.ndarray]
    S: Optional[np.ndarray]
    X: list
    multipliers: np.ndarray


def mode_responses(
    prob: ControlProblem,
    weights: Sequence[np.ndarray] = (),
    store_C: bool = True,
    store_S: bool = False,
    chunk: Optional[int] = None,
) -> ModeResponses:
    """Run the HUM map on every retained mode and accumulate what is asked for.

    ``weights`` are staggered coefficient histories of shape
    ``(nt, n_interior)``; for each one the sum ``dt * sum_j a^{j+1/2} *
    psi^{j+1/2}[v_i]`` is accumulated for every mode ``v_i``.
    """
    r = prob.n_modes
    nI, nG, nt, dt = prob.grid.n_interior, prob.grid.n_gamma, prob.nt, prob.dt
    if chunk is None:
        per_mode = 8 * (nt + 1) * nG * 3 + 8 * nI * 4
        chunk = int(max(1, min(r, 6e8 // per_mode)))
    rhs = np.zeros((2 * r, r))
    rhs[r:] = np.eye(r)
    lam_all = prob.solve_gram(rhs)
    C = np.empty((nt, nG, r)) if store_C else None
    S = np.empty((nt, nI, r)) if store_S else None
    X = [np.zeros((nI, r)) for _ in weights]
    op = prob.operator
    L, B = op.interior_matrix, op.lifting
    for start in range(0, r, chunk):
        cols = slice(start, min(r, start + chunk))
        zeta = prob.embed(prob.control_from_multiplier(lam_all[:, cols]))
        if store_C:
            C[:, :, cols] = np.diff(zeta, axis=0) / dt
        rev = zeta[::-1]
        k = rev.shape[2]
        u0 = np.zeros((nI, k))
        u1 = 0.5 * dt * dt * (B @ rev[0])
        prev = None
        for s, state in enumerate(leapfrog(L, dt, u0, u1, nt, B=B, boundary=rev)):
            if prev is not None:
                j = nt - s  # psi^{j+1/2} = (xi^{j+1} - xi^j) / dt
                psi = (prev - state) / dt
                if store_S:
                    S[j, :, cols] = psi
                for Xi, a in zip(X, weights):
                    Xi[:, cols] += dt * a[j][:, None] * psi
            prev = state
        del zeta, rev
    return ModeResponses(C, S, X, lam_all)


def _check_cap(prob: ControlProblem, cap: int) -> None:
    if prob.grid.n_interior > cap:
        raise ControlError(
            f"{prob.grid.n_interior} interior nodes exceed the assembly cap of {cap}; coarsen the grid or raise the cap"
        )


def assemble_C_and_S(
    prob: ControlProblem,
    cap: int = DEFAULT_ASSEMBLY_CAP,
    store_S: bool = True,
    responses: Optional[ModeResponses] = None,
) -> tuple[AssembledOperator, Optional[AssembledOperator]]:
    """Matrix forms of ``C`` (to staggered Gamma traces) and ``S`` (to staggered fields).

    Columns correspond to interior unit fields; every column factors
    through the retained modes, so the operators are stored as
    ``(per-mode responses) @ V_r^T W``.
    """
    _check_cap(prob, cap)
    if responses is None or responses.C is None or (store_S and responses.S is None):
        responses = mode_responses(prob, store_C=True, store_S=store_S)
    _, V = prob.modes
    w = prob.operator.interior_weights
    right = V.T * w[None, :]
    nt, nG, nI = prob.nt, prob.grid.n_gamma, prob.grid.n_interior
    gtrace = np.tile(prob.dt * prob.operator.gamma_weights, nt)
    C = AssembledOperator(responses.C.reshape(nt * nG, -1), right, w, gtrace, codomain="H0((0,tau) x Gamma), staggered")
    S = None
    if store_S:
        gfield = np.tile(prob.dt * w, nt)
        S = AssembledOperator(responses.S.reshape(nt * nI, -1), right, w, gfield, codomain="H0((0,tau) x Omega), staggered")
    return C, S


def apply_C_star(source, trace: BoundaryTrace) -> np.ndarray:
    """``C^* trace`` as a full-grid field.

    ``source`` is either an assembled ``C`` (paired with the grid through
    the problem) or a :class:`ControlProblem`, in which case the adjoint
    is evaluated through the retained modes without forming ``C``.
    """
    if trace.offset != 0.5:
        raise ValueError("C^* acts on staggered traces (offset 0.5)")
    if isinstance(source, tuple):
        prob, C = source
        y_int = C.adjoint(trace.values.ravel())
    elif isinstance(source, ControlProblem):
        prob = source
        y_int = _C_star_modal(prob, [trace.values])[0]
    else:
        raise TypeError("expected a ControlProblem or (ControlProblem, AssembledOperator)")
    out = np.zeros(prob.grid.size)
    out[prob.grid.interior_nodes] = y_int
    return out.reshape(prob.grid.shape)


def _C_star_modal(prob: ControlProblem, traces: Sequence[np.ndarray]) -> list:
    """``V_r C_r^T (dt w_Gamma m)`` for each staggered trace, via multipliers.

    ``C_r^T y`` needs the pairing of every mode's control derivative with
    ``y``; the controls are ``H^-1 G^T lam_i``, so the pairing reduces to
    ``lam_i . G H^-1 (D^T y)`` with ``D`` the staggered difference.
    """
    r = prob.n_modes
    _, V = prob.modes
    wg = prob.operator.gamma_weights
    rhs = np.zeros((2 * r, r))
    rhs[r:] = np.eye(r)
    lam_all = prob.solve_gram(rhs)
    out = []
    for y in traces:
        yw = prob.dt * wg[None, :] * y  # (nt, nG) weighted
        # pairing sum_j (zeta^{j+1} - zeta^j)/dt . yw_j  =  sum_k zeta^k . (yw_{k-1} - yw_k)/dt
        g = np.zeros((prob.nt + 1, y.shape[1]))
        g[1:] += yw
        g[:-1] -= yw
        g /= prob.dt
        zt = prob.apply_H_inv(g[prob.free])
        coef = lam_all.T @ prob.G_modal(zt)
        out.append(V @ coef)
    return out
