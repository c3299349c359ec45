"""Ray tracing for the metric ``c^-2 g`` and an empirical control-time estimate.

Rays follow Hamilton's equations for ``H(x, p) = 1/2 p^T G(x) p`` with
``G = c^2 g^-1`` interpolated multilinearly from the nodes.  The
integrator is the generalized (implicit) Stormer-Verlet scheme; after
each step the momentum is rescaled back onto the initial energy shell.
Rays reflect specularly (in the metric) off ``boundary \\ Gamma`` and stop
when they cross Gamma transversally.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .geometry import CoefficientSet, Grid

__all__ = [
    "RayEvent",
    "Ray",
    "GCCResult",
    "dual_metric_field",
    "trace_ray",
    "trace_rays",
    "estimate_control_time",
    "verify_metric_reflection",
    "trapping_speed",
    "write_rays_csv",
]

ESCAPED, SURVIVED = "escaped", "survived"


def dual_metric_field(grid: Grid, coeffs: CoefficientSet, speed: Optional[str] = "c") -> np.ndarray:
    """``c^2 g^-1`` at nodes, shape ``(n, n, *shape)``."""
    _, inv = coeffs.det_inv
    s = coeffs.speed(speed)
    return inv * (1.0 if s is None else s**2)


class _Multilinear:
    """Multilinear interpolation of a matrix field together with its gradient."""

    def __init__(self, grid: Grid, field_: np.ndarray):
        self.grid = grid
        n = grid.dim
        self.h = np.asarray(grid.spacing)
        self.shape = np.asarray(grid.shape)
        self.data = np.moveaxis(field_.reshape((n * n,) + grid.shape), 0, -1).reshape(-1, n * n)
        self.strides = np.array([int(np.prod(grid.shape[a + 1:])) for a in range(n)])
        self.corners = np.array(np.meshgrid(*[[0, 1]] * n, indexing="ij")).reshape(n, -1).T
        self.offsets = self.corners @ self.strides

    def __call__(self, x: np.ndarray, grad: bool = True):
        n = self.grid.dim
        s = x / self.h
        i = np.clip(np.floor(s).astype(int), 0, self.shape - 2)
        t = s - i
        base = i @ self.strides
        fv = self.data[base[:, None] + self.offsets[None, :]]  # (N, 2^n, n*n)
        # per-axis factors for each corner: t if the corner bit is set, else 1 - t
        fac = np.where(self.corners[None, :, :] == 1, t[:, None, :], 1.0 - t[:, None, :])  # (N, 2^n, n)
        w = fac.prod(axis=2)
        G = np.einsum("nc,nck->nk", w, fv).reshape(-1, n, n)
        if not grad:
            return G, None
        sign = np.where(self.corners == 1, 1.0, -1.0) / self.h[None, :]  # (2^n, n)
        dw = np.empty_like(fac)
        for a in range(n):
            other = np.ones(fac.shape[:2])
            for b in range(n):
                if b != a:
                    other = other * fac[:, :, b]
            dw[:, :, a] = other * sign[None, :, a]
        dG = np.einsum("nca,nck->nak", dw, fv).reshape(-1, n, n, n)  # (N, a, i, j)
        return G, dG


@dataclass
class RayEvent:
    kind: str  # "reflect" | "escape" | "grazing"
    time: float
    position: np.ndarray
    normal: np.ndarray
    p_in: np.ndarray
    p_out: np.ndarray
    G: np.ndarray
    cos: float


@dataclass
class Ray:
    positions: np.ndarray
    momenta: np.ndarray
    times: np.ndarray
    events: list
    status: str
    exit_time: float
    drift: float
    diffractive_suspect: bool = False
    local_error: float = 0.0


@dataclass
class GCCResult:
    tau: float
    verdict: str
    max_escape: float
    t_max: float
    exit_times: np.ndarray
    worst_ray: Optional[Ray] = field(default=None, repr=False)
    n_survived: int = 0
    n_grazing: int = 0
    max_drift: float = 0.0

    def __str__(self) -> str:
        return (
            f"verdict {self.verdict}: tau_est = {self.tau:.6g} (max escape {self.max_escape:.6g}, "
            f"T_max {self.t_max:.6g}, survivors {self.n_survived}, grazing {self.n_grazing})"
        )


def _ham(G, p):
    return 0.5 * np.einsum("ni,nij,nj->n", p, G, p)


def _face_normals(grid: Grid, x: np.ndarray, tol: float) -> tuple[np.ndarray, np.ndarray]:
    """Outward normal sum at boundary points and whether every face touched is accessible."""
    ext = np.asarray(grid.extents)
    nu = np.zeros_like(x)
    acc = np.ones(len(x), dtype=bool)
    for a in range(grid.dim):
        for side in (0, 1):
            hit = np.abs(x[:, a] - side * ext[a]) <= tol
            nu[hit, a] += 1.0 if side else -1.0
            if (a, side) not in grid.gamma:
                acc &= ~hit
    nrm = np.linalg.norm(nu, axis=1)
    nu[nrm > 0] /= nrm[nrm > 0, None]
    return nu, acc


def _reflect(p, nu, G):
    a = np.einsum("ni,nij,nj->n", nu, G, p) / np.einsum("ni,nij,nj->n", nu, G, nu)
    return p - 2 * a[:, None] * nu


def _cos(p, nu, G):
    num = np.einsum("ni,nij,nj->n", nu, G, p)
    den = np.sqrt(np.einsum("ni,nij,nj->n", nu, G, nu) * np.einsum("ni,nij,nj->n", p, G, p))
    return num / den


def _step(interp, x, p, dt, iters=3):
    """One generalized Stormer-Verlet step (fixed-point solves for the implicit stages)."""
    G0, dG0 = interp(x)
    ph = p.copy()
    for _ in range(iters):
        ph = p - 0.25 * dt * np.einsum("naij,ni,nj->na", dG0, ph, ph)
    v0 = np.einsum("nij,nj->ni", G0, ph)
    xn = x + dt * v0
    for _ in range(iters):
        G1, _ = interp(xn, grad=False)
        xn = x + 0.5 * dt * (v0 + np.einsum("nij,nj->ni", G1, ph))
    G1, dG1 = interp(xn)
    pn = ph - 0.25 * dt * np.einsum("naij,ni,nj->na", dG1, ph, ph)
    return xn, pn, G1


def trace_rays(
    grid: Grid,
    coeffs: CoefficientSet,
    x0: np.ndarray,
    directions: np.ndarray,
    *,
    dt: Optional[float] = None,
    t_max: Optional[float] = None,
    angle_tol: float = 0.05,
    project: bool = True,
    record: bool = False,
    speed: Optional[str] = "c",
) -> dict:
    """Trace many rays at once; see :func:`trace_ray` for the single-ray view.

    ``directions`` are velocity directions; momenta are scaled to unit
    speed in ``c^-2 g`` (``p^T G p = 1``).  ``drift`` is the largest
    relative Hamiltonian deviation along the stored trajectory;
    ``local_error`` the largest one-step deviation before projection.
    """
    Gf = dual_metric_field(grid, coeffs, speed)
    interp = _Multilinear(grid, Gf)
    s = coeffs.speed(speed)
    cmin = 1.0 if s is None else float(s.min())
    cmax = 1.0 if s is None else float(s.max())
    gmax = math.sqrt(coeffs.max_inverse_metric_eig())
    if t_max is None:
        t_max = 10 * grid.diameter / cmin
    if dt is None:
        dt = grid.h / (4 * cmax * gmax)
    x = np.atleast_2d(np.asarray(x0, dtype=float)).copy()
    d = np.atleast_2d(np.asarray(directions, dtype=float))
    N = len(x)
    G, _ = interp(x, grad=False)
    p = np.linalg.solve(G, d[..., None])[..., 0]
    p /= np.sqrt(np.einsum("ni,nij,nj->n", p, G, p))[:, None]
    H0 = _ham(G, p)
    t = np.zeros(N)
    status = np.array([SURVIVED] * N, dtype=object)
    exit_time = np.full(N, np.inf)
    drift = np.zeros(N)
    local = np.zeros(N)
    grazing = np.zeros(N, dtype=bool)
    events = [[] for _ in range(N)]
    paths = [[(0.0, x[i].copy(), p[i].copy())] for i in range(N)] if record else None
    active = np.arange(N)
    ext = np.asarray(grid.extents)
    tol = 1e-12 * grid.h
    while active.size:
        xa, pa = x[active], p[active]
        xn, pn, Gn = _step(interp, xa, pa, dt)
        Hn = _ham(Gn, pn)
        local[active] = np.maximum(local[active], np.abs(Hn - H0[active]) / H0[active])
        if project:
            pn *= np.sqrt(H0[active] / Hn)[:, None]
            Hn = _ham(Gn, pn)
        drift[active] = np.maximum(drift[active], np.abs(Hn - H0[active]) / H0[active])
        tn = t[active] + dt
        out = ~np.all((xn >= -tol) & (xn <= ext + tol), axis=1)
        if np.any(out):
            j = np.flatnonzero(out)
            dx = xn[j] - xa[j]
            with np.errstate(divide="ignore", invalid="ignore"):
                th_hi = np.where(dx > 0, (ext - xa[j]) / dx, np.inf)
                th_lo = np.where(dx < 0, -xa[j] / dx, np.inf)
            theta = np.clip(np.minimum(th_hi.min(axis=1), th_lo.min(axis=1)), 0.0, 1.0)
            xc = xa[j] + theta[:, None] * dx
            xc = np.clip(xc, 0.0, ext)
            Gc, _ = interp(xc, grad=False)
            pc = pa[j] + theta[:, None] * (pn[j] - pa[j])
            pc *= np.sqrt(H0[active[j]] / _ham(Gc, pc))[:, None]
            nu, acc = _face_normals(grid, xc, 1e-9 * grid.h)
            cs = _cos(pc, nu, Gc)
            tc = t[active[j]] + theta * dt
            escape = acc & (np.abs(cs) >= angle_tol)
            graze = acc & ~escape
            pr = _reflect(pc, nu, Gc)
            for k, idx in enumerate(active[j]):
                kind = "escape" if escape[k] else ("grazing" if graze[k] else "reflect")
                events[idx].append(RayEvent(kind, float(tc[k]), xc[k].copy(), nu[k].copy(), pc[k].copy(), pr[k].copy(), Gc[k].copy(), float(cs[k])))
                if escape[k]:
                    status[idx] = ESCAPED
                    exit_time[idx] = tc[k]
                if graze[k]:
                    grazing[idx] = True
            xn[j] = xc
            pn[j] = np.where(escape[:, None], pc, pr)
            tn[j] = tc
        x[active], p[active], t[active] = xn, pn, tn
        if record:
            for k, idx in enumerate(active):
                paths[idx].append((float(tn[k]), xn[k].copy(), pn[k].copy()))
        keep = (status[active] != ESCAPED) & (tn < t_max)
        active = active[keep]
    return dict(
        status=status, exit_time=exit_time, drift=drift, local_error=local, grazing=grazing, events=events, paths=paths, t_max=t_max, dt=dt
    )


def trace_ray(
    grid: Grid,
    coeffs: CoefficientSet,
    x0: Sequence[float],
    direction: Sequence[float],
    **kw,
) -> Ray:
    """Trace one unit-speed ray from ``x0`` in velocity direction ``direction``."""
    x0 = np.asarray(x0, dtype=float)
    if not np.all((x0 > 0) & (x0 < np.asarray(grid.extents))):
        raise ValueError("ray must start inside the domain")
    out = trace_rays(grid, coeffs, x0[None], np.asarray(direction, dtype=float)[None], record=True, **kw)
    path = out["paths"][0]
    return Ray(
        positions=np.array([q[1] for q in path]),
        momenta=np.array([q[2] for q in path]),
        times=np.array([q[0] for q in path]),
        events=out["events"][0],
        status=out["status"][0],
        exit_time=float(out["exit_time"][0]),
        drift=float(out["drift"][0]),
        diffractive_suspect=bool(out["grazing"][0]),
        local_error=float(out["local_error"][0]),
    )


def verify_metric_reflection(event: RayEvent) -> float:
    """Residual of the reflection law at one event.

    Checks that momentum along the face is unchanged, the normal velocity
    ``nu^T G p`` flips sign, and the Hamiltonian is preserved.
    """
    nu, G, pi, po = event.normal, event.G, event.p_in, event.p_out
    scale = max(1.0, float(np.abs(pi).max()))
    n = nu.size
    # tangent directions: orthonormal complement of nu
    q, _ = np.linalg.qr(np.column_stack([nu, np.eye(n)]))
    tang = q[:, 1:n]
    r1 = float(np.abs(tang.T @ (po - pi)).max()) if n > 1 else 0.0
    r2 = abs(float(nu @ G @ po + nu @ G @ pi))
    r3 = abs(float(po @ G @ po - pi @ G @ pi))
    return max(r1, r2, r3) / scale


def _chebyshev_points(k: int) -> np.ndarray:
    return 0.5 * (1 - np.cos(np.pi * (np.arange(k) + 0.5) / k))


def _sample_starts(grid: Grid, n_points: int) -> np.ndarray:
    """Start points clustered toward the boundary, where escape times are longest."""
    n = grid.dim
    k = max(2, int(round(n_points ** (1.0 / n))))
    axes = [_chebyshev_points(k) * L for L in grid.extents]
    pts = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, n)
    return pts[:n_points] if len(pts) > n_points else pts


def _sample_directions(n: int, count: int) -> np.ndarray:
    if n == 2:
        ang = 2 * np.pi * np.arange(count) / count
        return np.stack([np.cos(ang), np.sin(ang)], axis=1)
    i = np.arange(count) + 0.5
    phi = np.arccos(1 - 2 * i / count)
    theta = np.pi * (1 + 5**0.5) * i
    return np.stack([np.cos(theta) * np.sin(phi), np.sin(theta) * np.sin(phi), np.cos(phi)], axis=1)


def estimate_control_time(
    grid: Grid,
    coeffs: CoefficientSet,
    n_points: int = 100,
    n_directions: int = 32,
    *,
    margin: float = 1.2,
    angle_tol: float = 0.05,
    dt: Optional[float] = None,
    t_max: Optional[float] = None,
    starts: Optional[np.ndarray] = None,
    speed: Optional[str] = "c",
) -> GCCResult:
    """``tau_est = margin * max escape time`` over a start/direction sample.

    Verdict is ``PASS`` when every sampled ray crosses Gamma
    transversally before ``T_max = 10 diam / c_min``.
    """
    x0 = _sample_starts(grid, n_points) if starts is None else np.asarray(starts, dtype=float)
    dirs = _sample_directions(grid.dim, n_directions)
    X = np.repeat(x0, len(dirs), axis=0)
    D = np.tile(dirs, (len(x0), 1))
    out = trace_rays(grid, coeffs, X, D, dt=dt, t_max=t_max, angle_tol=angle_tol, speed=speed)
    et = out["exit_time"]
    survived = ~np.isfinite(et)
    worst_idx = int(np.argmax(np.where(survived, np.inf, et)))
    worst = trace_ray(grid, coeffs, X[worst_idx], D[worst_idx], dt=out["dt"], t_max=out["t_max"], angle_tol=angle_tol, speed=speed)
    max_escape = float(et[~survived].max()) if np.any(~survived) else math.inf
    verdict = "FAIL" if np.any(survived) else "PASS"
    return GCCResult(
        tau=margin * max_escape if verdict == "PASS" else math.inf,
        verdict=verdict,
        max_escape=max_escape,
        t_max=out["t_max"],
        exit_times=et,
        worst_ray=worst,
        n_survived=int(survived.sum()),
        n_grazing=int(out["grazing"].sum()),
        max_drift=float(out["drift"].max()),
    )


def trapping_speed(grid: Grid, radius: float = 0.25) -> np.ndarray:
    """``c = 0.5 + 0.5 (r / radius)^2`` about the domain center.

    ``r / c(r)`` peaks at ``r = radius``, giving a circular ray orbit and a
    band of rays trapped around it when ``radius`` is inside the domain.
    """
    X = grid.coords()
    r2 = sum((Xi - 0.5 * L) ** 2 for Xi, L in zip(X, grid.extents))
    return 0.5 + 0.5 * r2 / radius**2


def write_rays_csv(path, rays: Sequence[Ray]) -> None:
    """Polylines as rows ``ray, t, x, y[, z]``."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        n = rays[0].positions.shape[1] if rays else 2
        w.writerow(["ray", "t"] + ["x", "y", "z"][:n])
        for k, r in enumerate(rays):
            for t, x in zip(r.times, r.positions):
                w.writerow([k, repr(float(t))] + [repr(float(v)) for v in x])
