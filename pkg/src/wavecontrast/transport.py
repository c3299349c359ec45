"""First-order recovery by characteristics.

For ``n >= 3`` the recovery equation carries the transport term
``Sigma_0 . grad f``.  The principal part ``T f = Sigma_0 . grad f +
sigma_0 f`` with ``f = 0`` on Gamma is inverted along the curves
``x' = Sigma_0(x)``, which enter through Gamma and leave through the
rest of the boundary.
"""
from __future__ import annotations

import logging
import math
import warnings
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import scipy.sparse.linalg as spla
from scipy.interpolate import RegularGridInterpolator
from scipy.spatial import cKDTree

from .control import ControlProblem, ModeResponses, _C_star_modal, mode_responses
from .geometry import Grid

__all__ = [
    "TransportError",
    "FlowReport",
    "CharacteristicFan",
    "FirstOrderSolution",
    "validate_flow_assumption",
    "default_seeds",
    "trace_characteristics",
    "solve_first_order",
    "apply_transport",
    "probe_fields",
    "poincare_constant",
    "lemma_bound",
    "solve_recovery_first_order",
]

log = logging.getLogger(__name__)

EXITED, STALLED, LEFT_GAMMA = "exited", "stalled", "left-domain-error"


class TransportError(RuntimeError):
    """Characteristics do not cover the domain or the iteration failed."""


def _interpolator(grid: Grid, values: np.ndarray) -> RegularGridInterpolator:
    return RegularGridInterpolator(grid.axes(), values, bounds_error=False, fill_value=None)


def _vector_interp(grid: Grid, Sigma0: np.ndarray) -> RegularGridInterpolator:
    return _interpolator(grid, np.moveaxis(np.asarray(Sigma0, dtype=float), 0, -1))


def _inside(grid: Grid, x: np.ndarray, tol: float = 0.0) -> np.ndarray:
    ext = np.asarray(grid.extents)
    return np.all((x >= -tol) & (x <= ext + tol), axis=-1)


def _on_gamma(grid: Grid, x: np.ndarray, tol: float, closure: bool = False) -> np.ndarray:
    """Whether boundary points lie on an accessible face.

    Points shared with an inaccessible face count only when ``closure``.
    """
    ext = np.asarray(grid.extents)
    on = np.zeros(x.shape[0], dtype=bool)
    off = np.zeros(x.shape[0], dtype=bool)
    for a in range(grid.dim):
        for side in (0, 1):
            hit = np.abs(x[:, a] - side * ext[a]) <= tol
            if (a, side) in grid.gamma:
                on |= hit
            else:
                off |= hit
    return on if closure else on & ~off


def _gamma_closure_nodes(grid: Grid) -> np.ndarray:
    return np.flatnonzero(_on_gamma(grid, grid.points(), 1e-9 * grid.h, closure=True))


@dataclass
class CharacteristicFan:
    """Polylines of ``x' = Sigma_0(x)`` started from seeds on Gamma."""

    seeds: np.ndarray
    paths: list
    values: list
    lengths: np.ndarray
    status: list
    coverage: Optional[np.ndarray] = None

    @property
    def all_exited(self) -> bool:
        return all(s == EXITED for s in self.status)

    def samples(self) -> tuple[np.ndarray, np.ndarray]:
        pts = np.concatenate(self.paths, axis=0)
        vals = np.concatenate(self.values, axis=0) if self.values else np.zeros(len(pts))
        return pts, vals


@dataclass
class FlowReport:
    checks: dict
    fan: Optional[CharacteristicFan] = field(default=None, repr=False)

    @property
    def passed(self) -> bool:
        return all(ok for ok, _ in self.checks.values())

    def __str__(self) -> str:
        return "\n".join(f"{'PASS' if ok else 'FAIL'} {k}: {msg}" for k, (ok, msg) in self.checks.items())


def default_seeds(grid: Grid, Sigma0: np.ndarray) -> np.ndarray:
    """Inflow nodes on the closure of Gamma plus midpoints of inflow Gamma edges."""
    pts = grid.points()
    S = np.asarray(Sigma0).reshape(grid.dim, -1)
    flux = np.einsum("an,an->n", S, grid.normals.reshape(grid.dim, -1))
    closure = _gamma_closure_nodes(grid)
    seeds = [pts[closure[flux[closure] < 0]]]
    gn = grid.gamma_nodes
    inflow = flux[gn] < 0
    e = grid.gamma_edges
    both = inflow[e[:, 0]] & inflow[e[:, 1]]
    seeds.append(0.5 * (pts[gn[e[both, 0]]] + pts[gn[e[both, 1]]]))
    return np.concatenate(seeds, axis=0)


def trace_characteristics(
    grid: Grid,
    Sigma0: np.ndarray,
    seeds: Optional[np.ndarray] = None,
    *,
    sigma0: Optional[np.ndarray] = None,
    rhs: Optional[np.ndarray] = None,
    step: Optional[float] = None,
    length_cap: Optional[float] = None,
    direction: float = 1.0,
) -> CharacteristicFan:
    """RK4 integration of ``x' = Sigma_0(x)`` from each seed.

    With ``sigma0`` and ``rhs`` given, ``f' = rhs - sigma0 f`` is carried
    along from ``f = 0``.  Integration stops when a path leaves the domain
    (classified by the face it crosses) or when its length exceeds
    ``length_cap`` (default ``10 * diam``).
    """
    Sigma0 = np.asarray(Sigma0, dtype=float)
    if seeds is None:
        seeds = default_seeds(grid, Sigma0)
    seeds = np.atleast_2d(np.asarray(seeds, dtype=float))
    if seeds.shape[0] == 0:
        raise TransportError("no inflow seeds on Gamma")
    speed_max = float(np.sqrt((Sigma0**2).sum(axis=0)).max())
    if speed_max == 0:
        raise TransportError("Sigma_0 vanishes identically")
    ds = step if step is not None else grid.h / (2 * speed_max)
    cap = length_cap if length_cap is not None else 10 * grid.diameter
    vint = _vector_interp(grid, Sigma0)
    carry = sigma0 is not None and rhs is not None
    if carry:
        sint = _interpolator(grid, np.asarray(sigma0, dtype=float))
        hint = _interpolator(grid, np.asarray(rhs, dtype=float))

    def F(x, f):
        dx = direction * vint(x)
        if not carry:
            return dx, np.zeros_like(f)
        return dx, hint(x) - sint(x) * f

    n = len(seeds)
    x = seeds.copy()
    f = np.zeros(n)
    paths = [[x[i].copy()] for i in range(n)]
    vals = [[0.0] for _ in range(n)]
    length = np.zeros(n)
    status = [None] * n
    active = np.arange(n)
    tol = 1e-9 * grid.h
    max_steps = 50 * int(math.ceil(cap / (ds * speed_max))) + 10
    for _ in range(max_steps):
        if active.size == 0:
            break
        xa, fa = x[active], f[active]
        k1x, k1f = F(xa, fa)
        k2x, k2f = F(xa + 0.5 * ds * k1x, fa + 0.5 * ds * k1f)
        k3x, k3f = F(xa + 0.5 * ds * k2x, fa + 0.5 * ds * k2f)
        k4x, k4f = F(xa + ds * k3x, fa + ds * k3f)
        xn = xa + ds / 6 * (k1x + 2 * k2x + 2 * k3x + k4x)
        fn = fa + ds / 6 * (k1f + 2 * k2f + 2 * k3f + k4f)
        inside = _inside(grid, xn, tol)
        seg = np.linalg.norm(xn - xa, axis=1)
        keep = []
        for j, idx in enumerate(active):
            if inside[j]:
                x[idx], f[idx] = xn[j], fn[j]
                length[idx] += seg[j]
                paths[idx].append(xn[j].copy())
                vals[idx].append(fn[j])
                if length[idx] > cap or seg[j] < 1e-14 * grid.h:
                    status[idx] = STALLED
                else:
                    keep.append(idx)
                continue
            # crossing: cut the step at the boundary
            ext = np.asarray(grid.extents)
            d = xn[j] - xa[j]
            with np.errstate(divide="ignore", invalid="ignore"):
                t_hi = np.where(d > 0, (ext - xa[j]) / d, np.inf)
                t_lo = np.where(d < 0, -xa[j] / d, np.inf)
            theta = float(np.clip(min(t_hi.min(), t_lo.min()), 0.0, 1.0))
            xe = xa[j] + theta * d
            fe = fa[j] + theta * (fn[j] - fa[j])
            paths[idx].append(xe)
            vals[idx].append(fe)
            length[idx] += theta * seg[j]
            status[idx] = LEFT_GAMMA if _on_gamma(grid, xe[None], 1e-7 * grid.h)[0] else EXITED
        active = np.asarray(keep, dtype=int)
    for idx in active:
        status[idx] = STALLED
    return CharacteristicFan(
        seeds,
        [np.asarray(p) for p in paths],
        [np.asarray(v) for v in vals],
        length,
        status,
    )


def _coverage(grid: Grid, fan: CharacteristicFan) -> np.ndarray:
    pts, _ = fan.samples()
    tree = cKDTree(pts)
    d, _ = tree.query(grid.points()[grid.interior_nodes])
    return d


def validate_flow_assumption(
    grid: Grid, Sigma0: np.ndarray, delta: float, seeds: Optional[np.ndarray] = None, probe_stride: int = 1
) -> FlowReport:
    """Inflow on Gamma, no inflow elsewhere, ``|Sigma_0| >= delta``, coverage, exit.

    The exit check traces forward from interior nodes (every
    ``probe_stride``-th) so closed orbits are caught even where no seed
    reaches.
    """
    Sigma0 = np.asarray(Sigma0, dtype=float)
    S = Sigma0.reshape(grid.dim, -1)
    nu = grid.normals.reshape(grid.dim, -1)
    flux = np.einsum("an,an->n", S, nu)
    gn = grid.gamma_nodes
    rest = np.setdiff1d(grid.boundary_nodes, _gamma_closure_nodes(grid))
    checks = {}
    fg = flux[gn]
    checks["inflow on Gamma"] = (bool(np.all(fg < 0)), f"max Sigma0.nu on Gamma = {fg.max():.3e}")
    scale = float(np.abs(S).max()) or 1.0
    if rest.size:
        fr = flux[rest]
        checks["no inflow off Gamma"] = (bool(np.all(fr >= -1e-8 * scale)), f"min Sigma0.nu off Gamma = {fr.min():.3e}")
    mag = np.sqrt((S**2).sum(axis=0))
    k = int(np.argmin(mag))
    node = tuple(int(i) for i in np.unravel_index(k, grid.shape))
    checks["|Sigma0| >= delta"] = (bool(mag.min() >= delta), f"min |Sigma0| = {mag.min():.3e} at node {node}")
    fan = None
    if mag.max() == 0:
        checks["coverage"] = (False, "Sigma0 vanishes identically")
        checks["exit"] = (False, "Sigma0 vanishes identically")
        return FlowReport(checks)
    try:
        fan = trace_characteristics(grid, Sigma0, seeds)
        cov = _coverage(grid, fan)
        fan.coverage = cov
        checks["coverage"] = (bool(cov.max() <= 2 * grid.h), f"max distance to a characteristic = {cov.max() / grid.h:.2f} h")
        seed_exit = fan.all_exited
    except (TransportError, ValueError) as exc:
        checks["coverage"] = (False, str(exc))
        seed_exit = False
    probes = grid.points()[grid.interior_nodes][::probe_stride]
    pf = trace_characteristics(grid, Sigma0, probes)
    bad = [i for i, s in enumerate(pf.status) if s != EXITED]
    ok = seed_exit and not bad
    msg = f"{len(bad)} of {len(probes)} interior probes fail to exit"
    if fan is not None:
        msg += f"; max seeded length {fan.lengths.max():.3f}"
    checks["exit"] = (ok, msg)
    return FlowReport(checks, fan)


def apply_transport(grid: Grid, Sigma0: np.ndarray, sigma0: np.ndarray, f: np.ndarray) -> np.ndarray:
    """``Sigma_0 . grad f + sigma_0 f`` with second-order grid differences."""
    g = np.gradient(np.asarray(f, dtype=float), *grid.spacing, edge_order=2)
    return np.einsum("a...,a...->...", np.asarray(Sigma0), np.stack(g)) + sigma0 * f


@dataclass
class FirstOrderSolution:
    f: np.ndarray
    residual: float
    fan: Optional[CharacteristicFan] = field(default=None, repr=False)
    method: str = "idw"


def _weighted_norm(grid: Grid, a: np.ndarray, weights: Optional[np.ndarray]) -> float:
    w = grid.node_volume if weights is None else weights
    return math.sqrt(float(np.sum(w * a * a)))


def _backtrace(grid: Grid, Sigma0, sigma0, rhs, nodes: np.ndarray, ds: float, cap: float) -> tuple[np.ndarray, np.ndarray]:
    """Integrate backward from each node to the inflow boundary, accumulating the solution."""
    vint = _vector_interp(grid, Sigma0)
    sint = _interpolator(grid, sigma0)
    hint = _interpolator(grid, rhs)
    pts = grid.points()[nodes]
    n = len(pts)
    x = pts.copy()
    A = np.zeros(n)
    J = np.zeros(n)
    out = np.full(n, np.nan)
    ok = np.zeros(n, dtype=bool)
    length = np.zeros(n)
    active = np.arange(n)
    ext = np.asarray(grid.extents)
    tol = 1e-9 * grid.h

    def F(x, a):
        return -vint(x), sint(x), hint(x) * np.exp(-a)

    start_on_gamma = _on_gamma(grid, pts, 1e-9 * grid.h, closure=True)
    out[start_on_gamma] = 0.0
    ok[start_on_gamma] = True
    active = active[~start_on_gamma]
    while active.size:
        xa, aa, ja = x[active], A[active], J[active]
        k1 = F(xa, aa)
        k2 = F(xa + 0.5 * ds * k1[0], aa + 0.5 * ds * k1[1])
        k3 = F(xa + 0.5 * ds * k2[0], aa + 0.5 * ds * k2[1])
        k4 = F(xa + ds * k3[0], aa + ds * k3[1])
        xn = xa + ds / 6 * (k1[0] + 2 * k2[0] + 2 * k3[0] + k4[0])
        an = aa + ds / 6 * (k1[1] + 2 * k2[1] + 2 * k3[1] + k4[1])
        jn = ja + ds / 6 * (k1[2] + 2 * k2[2] + 2 * k3[2] + k4[2])
        inside = _inside(grid, xn, tol)
        seg = np.linalg.norm(xn - xa, axis=1)
        # exiting paths: cut at the boundary
        ex = ~inside
        if np.any(ex):
            d = xn[ex] - xa[ex]
            with np.errstate(divide="ignore", invalid="ignore"):
                t_hi = np.where(d > 0, (ext - xa[ex]) / d, np.inf)
                t_lo = np.where(d < 0, -xa[ex] / d, np.inf)
            theta = np.clip(np.minimum(t_hi.min(axis=1), t_lo.min(axis=1)), 0.0, 1.0)
            xe = xa[ex] + theta[:, None] * d
            je = ja[ex] + theta * (jn[ex] - ja[ex])
            idx = active[ex]
            out[idx] = je
            ok[idx] = _on_gamma(grid, xe, 1e-7 * grid.h, closure=True)
        idx = active[inside]
        x[idx], A[idx], J[idx] = xn[inside], an[inside], jn[inside]
        length[idx] += seg[inside]
        stuck = (length[idx] > cap) | (seg[inside] < 1e-14 * grid.h)
        out[idx[stuck]] = np.nan
        active = idx[~stuck]
    return out, ok


def solve_first_order(
    grid: Grid,
    Sigma0: np.ndarray,
    sigma0: np.ndarray,
    rhs: np.ndarray,
    *,
    scatter: str = "idw",
    weights: Optional[np.ndarray] = None,
    seeds: Optional[np.ndarray] = None,
    step: Optional[float] = None,
) -> FirstOrderSolution:
    """Solve ``Sigma_0 . grad f + sigma_0 f = rhs`` with ``f = 0`` on Gamma.

    ``scatter="idw"`` integrates along the seeded fan and interpolates to
    nodes by inverse-distance weighting over the ``2^n`` nearest samples;
    ``scatter="backtrace"`` integrates backward from every node to the
    inflow boundary (no interpolation).  The relative weighted residual of
    the grid operator is reported.
    """
    Sigma0 = np.asarray(Sigma0, dtype=float)
    sigma0 = np.broadcast_to(np.asarray(sigma0, dtype=float), grid.shape)
    rhs = np.asarray(rhs, dtype=float)
    f = np.zeros(grid.shape)
    fan = None
    if not np.any(rhs):
        return FirstOrderSolution(f, 0.0, None, scatter)
    speed_max = float(np.sqrt((Sigma0**2).sum(axis=0)).max())
    ds = step if step is not None else grid.h / (2 * speed_max)
    targets = np.setdiff1d(np.arange(grid.size), _gamma_closure_nodes(grid))
    if scatter == "idw":
        fan = trace_characteristics(grid, Sigma0, seeds, sigma0=sigma0, rhs=rhs, step=ds)
        pts, vals = fan.samples()
        tree = cKDTree(pts)
        k = 2**grid.dim
        d, j = tree.query(grid.points()[targets], k=k)
        # outflow boundary nodes may lie beyond the fan; they are extrapolated
        far = (d[:, 0] > 2 * grid.h) & grid.interior_mask.ravel()[targets]
        if np.any(far):
            bad = [tuple(int(i) for i in np.unravel_index(t, grid.shape)) for t in targets[far][:10]]
            raise TransportError(f"{int(far.sum())} nodes farther than 2h from any characteristic, e.g. {bad}")
        exact = d[:, 0] < 1e-12 * grid.h
        with np.errstate(divide="ignore"):
            wgt = 1.0 / np.where(exact[:, None], 1.0, d)
        est = np.sum(wgt * vals[j], axis=1) / np.sum(wgt, axis=1)
        est[exact] = vals[j[exact, 0]]
        f.ravel()[targets] = est
    elif scatter == "backtrace":
        vals, ok = _backtrace(grid, Sigma0, sigma0, rhs, targets, ds, 10 * grid.diameter)
        bad = ~ok | ~np.isfinite(vals)
        inner = grid.interior_mask.ravel()[targets]
        if np.any(bad & inner):
            nodes = [tuple(int(i) for i in np.unravel_index(t, grid.shape)) for t in targets[bad & inner][:10]]
            raise TransportError(f"{int((bad & inner).sum())} nodes are not reached from Gamma, e.g. {nodes}")
        if np.any(bad):
            # outflow boundary nodes near stagnation: inverse-distance fill from solved nodes
            pts = grid.points()
            good = np.concatenate([_gamma_closure_nodes(grid), targets[~bad]])
            gv = np.concatenate([np.zeros(good.size - int((~bad).sum())), vals[~bad]])
            d, j = cKDTree(pts[good]).query(pts[targets[bad]], k=2**grid.dim)
            wgt = 1.0 / np.maximum(d, 1e-12 * grid.h)
            vals = vals.copy()
            vals[bad] = np.sum(wgt * gv[j], axis=1) / np.sum(wgt, axis=1)
        f.ravel()[targets] = vals
    else:
        raise ValueError(f"unknown scatter {scatter!r}")
    res = apply_transport(grid, Sigma0, sigma0, f) - rhs
    mask = grid.interior_mask
    rel = _weighted_norm(grid, res * mask, weights) / max(_weighted_norm(grid, rhs * mask, weights), 1e-300)
    return FirstOrderSolution(f, rel, fan, scatter)


def probe_fields(grid: Grid, count: int = 20, seed: int = 0, modes: int = 3) -> list:
    """Smooth random fields vanishing on Gamma (and bounded elsewhere)."""
    rng = np.random.default_rng(seed)
    X = grid.coords()
    ext = grid.extents
    vanish = np.ones(grid.shape)
    for a, side in grid.gamma:
        vanish = vanish * (X[a] / ext[a] if side == 0 else 1 - X[a] / ext[a])
    out = []
    for _ in range(count):
        v = np.zeros(grid.shape)
        for _k in range(modes):
            phase = rng.uniform(0, 2 * np.pi, grid.dim)
            freq = rng.integers(0, 3, grid.dim)
            term = rng.standard_normal()
            for a in range(grid.dim):
                term = term * np.cos(np.pi * freq[a] * X[a] / ext[a] + phase[a])
            v = v + term
        v = (v + 1.5 * rng.standard_normal()) * vanish
        out.append(v)
    return out


def poincare_constant(grid: Grid, Sigma0: np.ndarray, probes: Optional[list] = None, seed: int = 0) -> dict:
    """Empirical ``max |v| / |Sigma_0 . grad v|`` over probes vanishing on Gamma.

    Also reports the characteristic bound ``max path length / min |Sigma_0|``.
    """
    Sigma0 = np.asarray(Sigma0, dtype=float)
    probes = probe_fields(grid, seed=seed) if probes is None else probes
    zero = np.zeros(grid.shape)
    ratios = []
    for v in probes:
        tv = apply_transport(grid, Sigma0, zero, v)
        ratios.append(_weighted_norm(grid, v, None) / _weighted_norm(grid, tv, None))
    out = {"C": float(max(ratios)), "ratios": ratios}
    mag = np.sqrt((Sigma0**2).sum(axis=0))
    try:
        fan = trace_characteristics(grid, Sigma0)
        out["characteristic_bound"] = float(fan.lengths.max() / max(mag.min(), 1e-300))
    except TransportError:
        out["characteristic_bound"] = math.inf
    return out


def lemma_bound(grid: Grid, Sigma0: np.ndarray, sigma0: np.ndarray, f: np.ndarray, C: float) -> tuple[float, float]:
    """``(|f|_H, (1 + C lam e^{C lam}) |T f|)`` with ``lam = max|sigma_0|``."""
    lam = float(np.abs(sigma0).max())
    zero = np.zeros(grid.shape)
    lhs = _weighted_norm(grid, apply_transport(grid, Sigma0, zero, f), None)
    rhs = (1 + C * lam * math.exp(C * lam)) * _weighted_norm(grid, apply_transport(grid, Sigma0, sigma0, f), None)
    return lhs, rhs


def solve_recovery_first_order(
    prob: ControlProblem,
    factors,
    measurement,
    *,
    responses: Optional[ModeResponses] = None,
    method: str = "gmres",
    scatter: str = "idw",
    tol: float = 1e-6,
    max_iter: int = 100,
    zero_compact: bool = False,
    inflow: Optional[Grid] = None,
) -> dict:
    """Solve ``[Sigma_0 . grad + sigma_0] f + K f = -C^* m_dot`` with ``f = 0`` on Gamma.

    ``K f = sum_d (P Sigma_dot_d S)^* d_d f + (P sigma_dot S)^* f``.  The
    principal part is inverted by :func:`solve_first_order`; ``method``
    selects fixed-point iteration or GMRES on ``(I + T^-1 K) f = T^-1 h``.
    ``inflow`` is the same lattice with the inflow faces as its accessible
    set, for illuminations whose inflow boundary differs from the control
    boundary.
    """
    grid = prob.grid
    n = grid.dim
    if n < 3:
        raise TransportError("the transport formulation needs n >= 3 (no admissible flow exists in the plane)")
    I = grid.interior_nodes
    nI = grid.n_interior
    S0 = factors.Sigma0
    s0 = factors.sigma0
    w = prob.operator.interior_weights
    _, V = prob.modes
    if not zero_compact:
        if responses is None:
            Sd = factors.Sigma_dot.reshape(factors.nt, n, -1)[:, :, I]
            wts = [Sd[:, d] for d in range(n)] + [np.diff(factors.sigma, axis=0).reshape(factors.nt, -1)[:, I] / factors.dt]
            responses = mode_responses(prob, weights=wts, store_C=False)
        X = responses.X
    h_int = -_C_star_modal(prob, [measurement.m_dot.values])[0]

    def to_full(v):
        out = np.zeros(grid.size)
        out[I] = v
        return out.reshape(grid.shape)

    def compact(fi):
        if zero_compact:
            return np.zeros(nI)
        full = to_full(fi)
        grads = np.gradient(full, *grid.spacing, edge_order=2)
        coef = sum(X[d].T @ (w * grads[d].ravel()[I]) for d in range(n)) + X[n].T @ (w * fi)
        return V @ coef

    report = {"residuals": []}

    def Tinv(r_int):
        sol = solve_first_order(inflow or grid, S0, s0, to_full(r_int), scatter=scatter)
        report.setdefault("transport_residuals", []).append(sol.residual)
        return sol.f.ravel()[I]

    base = Tinv(h_int)
    if not np.any(base):
        return {"f": np.zeros(grid.shape), "iterations": 0, "report": report}
    if method == "fixed_point":
        f = base.copy()
        growth = 0
        prev = None
        for it in range(1, max_iter + 1):
            fn = Tinv(h_int - compact(f))
            upd = np.linalg.norm(fn - f) / max(np.linalg.norm(fn), 1e-300)
            report["residuals"].append(upd)
            if prev is not None and upd > prev:
                growth += 1
                if growth >= 3:
                    rho = upd / prev
                    raise TransportError(f"fixed-point iteration diverges; spectral radius estimate {rho:.3f}")
            else:
                growth = 0
            prev = upd
            f = fn
            if upd <= tol:
                break
        return {"f": to_full(f), "iterations": it, "report": report}
    if method == "gmres":
        N = nI
        op = spla.LinearOperator((N, N), matvec=lambda v: v + Tinv(compact(v)), dtype=float)
        it = [0]

        def cb(_r):
            it[0] += 1

        f, info = spla.gmres(op, base, rtol=tol, atol=0.0, restart=max_iter, maxiter=max_iter, callback=cb, callback_type="pr_norm")
        if info != 0:
            warnings.warn("GMRES on the transport system did not converge", RuntimeWarning, stacklevel=2)
        report["converged"] = info == 0
        return {"f": to_full(f), "iterations": it[0], "report": report}
    raise ValueError(f"unknown method {method!r}")
