"""Box grids, Riemannian coefficients and the weighted Laplace-Beltrami operator.

Fields are plain numpy arrays shaped like ``grid.shape`` (scalar fields) or
``(n, *grid.shape)`` (vector fields).  Axis ``a`` of the array is the
coordinate ``x_a``; flat node indices use C (row-major) order.

The operator

    A_g u = mu^{-1} div_g(mu grad_g u)

is discretized in conservative form ``-W^{-1} K`` where ``K`` is a symmetric
positive semidefinite stiffness matrix assembled cell by cell with the
cell-averaged tensor ``mu det(g)^{1/2} g^{-1}`` and ``W`` is the diagonal of
trapezoidal node weights ``mu det(g)^{1/2} h^n``.  Discrete self-adjointness
in the ``W`` inner product therefore holds to roundoff.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from functools import cached_property
from typing import Callable, Optional, Sequence, Union

import numpy as np
import scipy.sparse as sp

__all__ = [
    "GeometryError",
    "Grid",
    "CoefficientSet",
    "LaplaceBeltrami",
    "assemble_laplace_beltrami",
    "grad_g",
    "weighted_inner_product",
    "weighted_norm",
    "verify_conformal_identity",
    "metric_det_inv",
    "FACE_NAMES",
]

FACE_NAMES = {"x0": (0, 0), "x1": (0, 1), "y0": (1, 0), "y1": (1, 1), "z0": (2, 0), "z1": (2, 1)}

MIN_NODES = 8


class GeometryError(ValueError):
    """Invalid grid, coefficient set or field."""


def _parse_face(face) -> tuple[int, int]:
    if isinstance(face, str):
        if face not in FACE_NAMES:
            raise GeometryError(f"unknown face {face!r}; expected one of {sorted(FACE_NAMES)}")
        return FACE_NAMES[face]
    axis, side = face
    return int(axis), int(side)


@dataclass(frozen=True)
class Grid:
    """Uniform node lattice on the box ``prod_a [0, extents[a]]``.

    ``gamma`` lists the accessible faces as ``(axis, side)`` pairs or names
    such as ``"x0"``.  A boundary node belongs to the accessible set when
    every face containing it is accessible; nodes on the rim of the
    accessible region are therefore treated as inaccessible.
    """

    shape: tuple[int, ...]
    extents: tuple[float, ...]
    gamma: tuple[tuple[int, int], ...] = ()

    def __post_init__(self):
        shape = tuple(int(s) for s in self.shape)
        extents = tuple(float(e) for e in self.extents)
        faces = tuple(sorted({_parse_face(f) for f in self.gamma}))
        object.__setattr__(self, "shape", shape)
        object.__setattr__(self, "extents", extents)
        object.__setattr__(self, "gamma", faces)
        if len(shape) not in (2, 3) or len(extents) != len(shape):
            raise GeometryError("grid must be 2D or 3D with one extent per axis")
        if min(shape) < MIN_NODES:
            raise GeometryError(f"need at least {MIN_NODES} nodes per axis, got {shape}")
        if min(extents) <= 0:
            raise GeometryError("extents must be positive")
        for axis, side in faces:
            if not (0 <= axis < len(shape) and side in (0, 1)):
                raise GeometryError(f"face {(axis, side)} does not exist in {len(shape)}D")
        if not faces:
            raise GeometryError("the accessible boundary must contain at least one face")
        if self.gamma_nodes.size == 0:
            raise GeometryError("accessible boundary has no nodes")
        if not self._gamma_connected():
            raise GeometryError("accessible boundary is not edge-connected")

    @classmethod
    def unit(cls, n: int, dim: int = 2, gamma: Union[str, Sequence] = "all") -> "Grid":
        """``n`` nodes per axis on the unit box."""
        return cls((n,) * dim, (1.0,) * dim, gamma=_faces_from_spec(gamma, dim))

    @property
    def dim(self) -> int:
        return len(self.shape)

    @property
    def size(self) -> int:
        return int(np.prod(self.shape))

    @cached_property
    def spacing(self) -> tuple[float, ...]:
        return tuple(e / (s - 1) for e, s in zip(self.extents, self.shape))

    @property
    def h(self) -> float:
        return min(self.spacing)

    @property
    def diameter(self) -> float:
        return float(np.sqrt(sum(e * e for e in self.extents)))

    def axes(self) -> list[np.ndarray]:
        return [np.linspace(0.0, e, s) for e, s in zip(self.extents, self.shape)]

    def coords(self) -> list[np.ndarray]:
        return np.meshgrid(*self.axes(), indexing="ij")

    def points(self) -> np.ndarray:
        """Node coordinates as an ``(size, n)`` array in flat order."""
        return np.stack([c.ravel() for c in self.coords()], axis=1)

    # -- boundary classification -------------------------------------------------

    @cached_property
    def _face_masks(self) -> dict:
        masks = {}
        for axis in range(self.dim):
            for side in (0, 1):
                m = np.zeros(self.shape, dtype=bool)
                idx = [slice(None)] * self.dim
                idx[axis] = 0 if side == 0 else -1
                m[tuple(idx)] = True
                masks[(axis, side)] = m
        return masks

    @cached_property
    def boundary_mask(self) -> np.ndarray:
        return np.logical_or.reduce(list(self._face_masks.values()))

    @cached_property
    def interior_mask(self) -> np.ndarray:
        return ~self.boundary_mask

    @cached_property
    def gamma_mask(self) -> np.ndarray:
        inaccessible = np.zeros(self.shape, dtype=bool)
        for face, m in self._face_masks.items():
            if face not in self.gamma:
                inaccessible |= m
        return self.boundary_mask & ~inaccessible

    @cached_property
    def interior_nodes(self) -> np.ndarray:
        return np.flatnonzero(self.interior_mask)

    @cached_property
    def boundary_nodes(self) -> np.ndarray:
        return np.flatnonzero(self.boundary_mask)

    @cached_property
    def gamma_nodes(self) -> np.ndarray:
        """Flat indices of accessible nodes; this order indexes boundary traces."""
        return np.flatnonzero(self.gamma_mask)

    @property
    def n_interior(self) -> int:
        return int(self.interior_nodes.size)

    @property
    def n_gamma(self) -> int:
        return int(self.gamma_nodes.size)

    @cached_property
    def normals(self) -> np.ndarray:
        """Outward unit normals, shape ``(n, *shape)``; zero at interior nodes.

        At edges and corners the normal is the normalized sum of the face
        normals involved.
        """
        nu = np.zeros((self.dim,) + self.shape)
        for (axis, side), m in self._face_masks.items():
            nu[axis][m] += 1.0 if side == 1 else -1.0
        norm = np.sqrt((nu**2).sum(axis=0))
        nz = norm > 0
        nu[:, nz] /= norm[nz]
        return nu

    @cached_property
    def gamma_normals(self) -> np.ndarray:
        """Unit normals at the accessible nodes, shape ``(n_gamma, n)``."""
        return self.normals.reshape(self.dim, -1)[:, self.gamma_nodes].T.copy()

    @cached_property
    def boundary_measure(self) -> np.ndarray:
        """Trapezoidal surface weights for every node (zero in the interior)."""
        w = np.zeros(self.shape)
        hs = self.spacing
        for (axis, _side), m in self._face_masks.items():
            tang = np.ones(self.shape)
            for t in range(self.dim):
                if t == axis:
                    continue
                f = np.full(self.shape[t], hs[t])
                f[0] *= 0.5
                f[-1] *= 0.5
                sh = [1] * self.dim
                sh[t] = -1
                tang = tang * f.reshape(sh)
            w[m] += tang[m]
        return w

    @cached_property
    def node_volume(self) -> np.ndarray:
        """Trapezoidal volume weights ``h^n`` halved on each boundary face."""
        v = np.ones(self.shape)
        for a, (h, s) in enumerate(zip(self.spacing, self.shape)):
            f = np.full(s, h)
            f[0] *= 0.5
            f[-1] *= 0.5
            sh = [1] * self.dim
            sh[a] = -1
            v = v * f.reshape(sh)
        return v

    @cached_property
    def gamma_edges(self) -> np.ndarray:
        """Pairs of positions (into ``gamma_nodes``) joined by a grid edge."""
        pos = -np.ones(self.size, dtype=np.int64)
        pos[self.gamma_nodes] = np.arange(self.n_gamma)
        pos = pos.reshape(self.shape)
        pairs = []
        for a in range(self.dim):
            lo = [slice(None)] * self.dim
            hi = [slice(None)] * self.dim
            lo[a] = slice(0, -1)
            hi[a] = slice(1, None)
            p, q = pos[tuple(lo)].ravel(), pos[tuple(hi)].ravel()
            keep = (p >= 0) & (q >= 0)
            pairs.append(np.stack([p[keep], q[keep], np.full(keep.sum(), a)], axis=1))
        return np.concatenate(pairs, axis=0)

    def _gamma_connected(self) -> bool:
        n = self.n_gamma
        e = self.gamma_edges
        adj = sp.coo_matrix((np.ones(len(e)), (e[:, 0], e[:, 1])), shape=(n, n))
        ncomp, _ = sp.csgraph.connected_components(adj, directed=False)
        return ncomp == 1

    def validate_field(self, u: np.ndarray, name: str = "field") -> np.ndarray:
        u = np.asarray(u, dtype=float)
        if u.shape != self.shape:
            raise GeometryError(f"{name} has shape {u.shape}, grid is {self.shape}")
        if not np.all(np.isfinite(u)):
            raise GeometryError(f"{name} has non-finite entries")
        return u


def _faces_from_spec(spec, dim: int) -> tuple:
    if isinstance(spec, str):
        if spec == "all":
            return tuple((a, s) for a in range(dim) for s in (0, 1))
        return tuple(_parse_face(f.strip()) for f in spec.split(",") if f.strip())
    return tuple(_parse_face(f) for f in spec)


def metric_det_inv(metric: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Closed-form determinant and inverse of a field of 2x2 or 3x3 matrices.

    ``metric`` has shape ``(n, n, ...)``; returns ``(det, inv)`` with shapes
    ``(...)`` and ``(n, n, ...)``.
    """
    g = metric
    n = g.shape[0]
    if n == 2:
        det = g[0, 0] * g[1, 1] - g[0, 1] * g[1, 0]
        inv = np.empty_like(g)
        inv[0, 0] = g[1, 1] / det
        inv[1, 1] = g[0, 0] / det
        inv[0, 1] = -g[0, 1] / det
        inv[1, 0] = -g[1, 0] / det
        return det, inv
    if n == 3:
        cof = np.empty_like(g)
        for i in range(3):
            for j in range(3):
                i1, i2 = (i + 1) % 3, (i + 2) % 3
                j1, j2 = (j + 1) % 3, (j + 2) % 3
                cof[i, j] = g[i1, j1] * g[i2, j2] - g[i1, j2] * g[i2, j1]
        det = g[0, 0] * cof[0, 0] + g[0, 1] * cof[0, 1] + g[0, 2] * cof[0, 2]
        inv = np.swapaxes(cof, 0, 1) / det
        return det, inv
    raise GeometryError("metric must be 2x2 or 3x3")


def _as_field(value, grid: Grid, name: str) -> np.ndarray:
    if callable(value):
        value = value(*grid.coords())
    arr = np.broadcast_to(np.asarray(value, dtype=float), grid.shape).copy()
    return arr


@dataclass
class CoefficientSet:
    """Nodal metric ``g``, weight ``mu``, speed ``c`` and optional reference speed.

    ``metric`` has shape ``(n, n, *grid.shape)``.
    """

    metric: np.ndarray
    mu: np.ndarray
    c: np.ndarray
    c_ref: Optional[np.ndarray] = None

    @classmethod
    def build(cls, grid: Grid, metric=None, mu=1.0, c=1.0, c_ref=None) -> "CoefficientSet":
        """Build from constants, arrays or callables of the coordinate arrays.

        ``metric`` may be ``None`` (identity), a constant ``n x n`` matrix, a
        length-``n`` diagonal, a full ``(n, n, *shape)`` array, or a callable
        returning any of these.
        """
        n = grid.dim
        if callable(metric):
            metric = metric(*grid.coords())
        if metric is None:
            g = np.zeros((n, n) + grid.shape)
            for a in range(n):
                g[a, a] = 1.0
        else:
            m = np.asarray(metric, dtype=float)
            if m.shape == (n,):
                m = np.diag(m)
            if m.shape == (n, n):
                g = np.broadcast_to(m.reshape((n, n) + (1,) * n), (n, n) + grid.shape).copy()
            elif m.shape == (n, n) + grid.shape:
                g = m.copy()
            else:
                raise GeometryError(f"metric shape {m.shape} incompatible with grid {grid.shape}")
        coeffs = cls(
            metric=g,
            mu=_as_field(mu, grid, "mu"),
            c=_as_field(c, grid, "c"),
            c_ref=None if c_ref is None else _as_field(c_ref, grid, "c_ref"),
        )
        coeffs.validate(grid)
        return coeffs

    def speed(self, which: Optional[str]) -> Optional[np.ndarray]:
        if which is None:
            return None
        if which == "c":
            return self.c
        if which in ("c_ref", "ref", "reference"):
            if self.c_ref is None:
                raise GeometryError("reference speed c_ref is not set")
            return self.c_ref
        raise GeometryError(f"unknown speed selector {which!r}")

    def with_speeds(self, c=None, c_ref=None) -> "CoefficientSet":
        return CoefficientSet(
            metric=self.metric,
            mu=self.mu,
            c=self.c if c is None else np.asarray(c, dtype=float),
            c_ref=self.c_ref if c_ref is None else np.asarray(c_ref, dtype=float),
        )

    def validate(self, grid: Grid, eps_spd: float = 1e-12) -> None:
        n = grid.dim
        if self.metric.shape != (n, n) + grid.shape:
            raise GeometryError("metric shape does not match grid")
        g = self.metric
        if not np.allclose(g, np.swapaxes(g, 0, 1), rtol=1e-13, atol=1e-14):
            raise GeometryError("metric is not symmetric")
        flat = np.moveaxis(g.reshape(n, n, -1), -1, 0)
        lam = np.linalg.eigvalsh(flat)[:, 0]
        bad = np.flatnonzero(~(lam >= eps_spd))
        if bad.size:
            node = np.unravel_index(bad[0], grid.shape)
            raise GeometryError(
                f"metric is not positive definite at node {tuple(int(i) for i in node)} "
                f"(min eigenvalue {lam[bad[0]]:.3g})"
            )
        for name in ("mu", "c", "c_ref"):
            v = getattr(self, name)
            if v is None:
                continue
            if v.shape != grid.shape:
                raise GeometryError(f"{name} shape {v.shape} does not match grid {grid.shape}")
            if not np.all(np.isfinite(v)) or np.any(v <= 0):
                node = np.unravel_index(int(np.argmin(np.where(np.isfinite(v), v, -np.inf))), grid.shape)
                raise GeometryError(f"{name} must be finite and positive (violated at node {node})")

    @cached_property
    def det_inv(self) -> tuple[np.ndarray, np.ndarray]:
        return metric_det_inv(self.metric)

    def node_weight(self, grid: Grid, speed: Optional[str] = None) -> np.ndarray:
        """Density ``mu det(c^{-2} g)^{1/2}`` (or ``mu det(g)^{1/2}``) at nodes."""
        det, _ = self.det_inv
        w = self.mu * np.sqrt(det)
        s = self.speed(speed)
        if s is not None:
            w = w * s ** (-grid.dim)
        return w

    def flux_tensor(self, grid: Grid, speed: Optional[str] = None) -> np.ndarray:
        """``mu det(g')^{1/2} g'^{-1}`` for ``g' = c^{-2} g`` (or ``g``)."""
        det, inv = self.det_inv
        k = self.mu * np.sqrt(det) * inv
        s = self.speed(speed)
        if s is not None:
            k = k * s ** (2 - grid.dim)
        return k

    def max_inverse_metric_eig(self) -> float:
        _, inv = self.det_inv
        n = inv.shape[0]
        flat = np.moveaxis(inv.reshape(n, n, -1), -1, 0)
        return float(np.linalg.eigvalsh(flat)[:, -1].max())


@dataclass
class LaplaceBeltrami:
    """Assembled ``A_g`` (or ``A_{c^{-2} g}``) on the full node set.

    ``stiffness`` is the symmetric matrix ``K`` over all nodes and ``weights``
    the nodal inner-product weights, so that ``(A u)_i = -(K u)_i / w_i`` at
    interior nodes.  Boundary rows of :attr:`full_matrix` are zero.
    """

    grid: Grid
    stiffness: sp.csr_matrix
    weights: np.ndarray
    speed: Optional[str] = None
    self_adjoint: bool = True
    _cache: dict = field(default_factory=dict, repr=False)

    @property
    def interior_weights(self) -> np.ndarray:
        return self.weights.ravel()[self.grid.interior_nodes]

    @property
    def gamma_weights(self) -> np.ndarray:
        """Surface quadrature weights on the accessible nodes, density included."""
        if "gw" not in self._cache:
            dens = self.weights.ravel() / self.grid.node_volume.ravel()
            gn = self.grid.gamma_nodes
            self._cache["gw"] = self.grid.boundary_measure.ravel()[gn] * dens[gn]
        return self._cache["gw"]

    @property
    def interior_matrix(self) -> sp.csr_matrix:
        """``L = -W_I^{-1} K_II`` acting on interior values."""
        if "L" not in self._cache:
            I = self.grid.interior_nodes
            kii = self.stiffness[I][:, I]
            self._cache["L"] = sp.csr_matrix(sp.diags(-1.0 / self.interior_weights) @ kii)
        return self._cache["L"]

    @property
    def interior_stiffness(self) -> sp.csr_matrix:
        if "KII" not in self._cache:
            I = self.grid.interior_nodes
            self._cache["KII"] = sp.csr_matrix(self.stiffness[I][:, I])
        return self._cache["KII"]

    @property
    def lifting(self) -> sp.csr_matrix:
        """``B = -W_I^{-1} K_{I,Gamma}``: contribution of accessible boundary values."""
        if "B" not in self._cache:
            I, G = self.grid.interior_nodes, self.grid.gamma_nodes
            kig = self.stiffness[I][:, G]
            self._cache["B"] = sp.csr_matrix(sp.diags(-1.0 / self.interior_weights) @ kig)
        return self._cache["B"]

    @property
    def gamma_interior_stiffness(self) -> sp.csr_matrix:
        """``K_{Gamma,I}``, the discrete flux functional at accessible nodes."""
        if "KGI" not in self._cache:
            I, G = self.grid.interior_nodes, self.grid.gamma_nodes
            self._cache["KGI"] = sp.csr_matrix(self.stiffness[G][:, I])
        return self._cache["KGI"]

    @property
    def full_matrix(self) -> sp.csr_matrix:
        if "A" not in self._cache:
            inv_w = np.zeros(self.grid.size)
            I = self.grid.interior_nodes
            inv_w[I] = -1.0 / self.weights.ravel()[I]
            self._cache["A"] = sp.csr_matrix(sp.diags(inv_w) @ self.stiffness)
        return self._cache["A"]

    def apply(self, u: np.ndarray) -> np.ndarray:
        """Apply to a full-grid field; boundary entries of the result are zero."""
        return (self.full_matrix @ np.asarray(u, dtype=float).ravel()).reshape(self.grid.shape)

    def apply_interior(self, u_int: np.ndarray) -> np.ndarray:
        return self.interior_matrix @ u_int

    def inner(self, u: np.ndarray, v: np.ndarray) -> float:
        return float(np.sum(np.asarray(u) * np.asarray(v) * self.weights))


def _cell_corner_offsets(n: int) -> np.ndarray:
    return np.array(list(itertools.product((0, 1), repeat=n)), dtype=np.int64)


def assemble_laplace_beltrami(
    grid: Grid, coeffs: CoefficientSet, speed_weighted: Union[bool, str] = False
) -> LaplaceBeltrami:
    """Assemble the weighted Laplace-Beltrami operator on ``grid``.

    ``speed_weighted`` selects ``A_{c^{-2} g}``: ``True`` or ``"c"`` uses the
    true speed, ``"c_ref"`` the reference speed, ``False`` gives ``A_g``.
    """
    if speed_weighted is True:
        speed = "c"
    elif speed_weighted is False or speed_weighted is None:
        speed = None
    else:
        speed = speed_weighted
    coeffs.validate(grid)
    if min(grid.shape) < 3:
        raise GeometryError("grid too coarse to form the stencil")
    n = grid.dim
    hs = np.array(grid.spacing)
    kt = coeffs.flux_tensor(grid, speed)  # (n, n, *shape)

    corners = _cell_corner_offsets(n)
    ncorner = len(corners)
    cell_shape = tuple(s - 1 for s in grid.shape)
    # cell-averaged tensor
    kc = np.zeros((n, n) + cell_shape)
    for off in corners:
        sl = tuple(slice(o, o + cs) for o, cs in zip(off, cell_shape))
        kc += kt[(slice(None), slice(None)) + sl]
    kc /= ncorner
    vol = float(np.prod(hs))

    # gradient-average vectors d_a over the cell corners
    d = np.zeros((n, ncorner))
    for a in range(n):
        d[a] = np.where(corners[:, a] == 1, 1.0, -1.0) / (hs[a] * 2 ** (n - 1))

    ncell = int(np.prod(cell_shape))
    kcf = kc.reshape(n, n, ncell)
    local = np.zeros((ncell, ncorner, ncorner))
    # diagonal terms: mean of squared edge differences along each axis
    for a in range(n):
        w_edge = vol / (hs[a] ** 2 * 2 ** (n - 1))
        for i, ci in enumerate(corners):
            if ci[a] == 1:
                continue
            cj = ci.copy()
            cj[a] = 1
            j = int(np.flatnonzero((corners == cj).all(axis=1))[0])
            coef = w_edge * kcf[a, a]
            local[:, i, i] += coef
            local[:, j, j] += coef
            local[:, i, j] -= coef
            local[:, j, i] -= coef
    # cross terms from cell-averaged gradients
    for a in range(n):
        for b in range(n):
            if a == b:
                continue
            local += vol * kcf[a, b][:, None, None] * np.outer(d[a], d[b])[None]

    base = np.stack(np.unravel_index(np.arange(ncell), cell_shape), axis=1)
    gidx = np.empty((ncell, ncorner), dtype=np.int64)
    for i, off in enumerate(corners):
        gidx[:, i] = np.ravel_multi_index(tuple((base + off).T), grid.shape)
    rows = np.repeat(gidx, ncorner, axis=1).ravel()
    cols = np.tile(gidx, (1, ncorner)).ravel()
    K = sp.coo_matrix((local.ravel(), (rows, cols)), shape=(grid.size, grid.size)).tocsr()
    K.sum_duplicates()
    K = sp.csr_matrix(0.5 * (K + K.T))

    weights = coeffs.node_weight(grid, speed) * grid.node_volume
    return LaplaceBeltrami(grid=grid, stiffness=K, weights=weights, speed=speed)


def grad_g(u: np.ndarray, grid: Grid, coeffs: CoefficientSet, speed: Optional[str] = None) -> np.ndarray:
    """Riemannian gradient ``g^{-1} grad u`` (or ``c^2 g^{-1} grad u``).

    Centered differences inside, second-order one-sided at the boundary.
    """
    u = grid.validate_field(u, "u")
    eu = np.stack(np.gradient(u, *grid.spacing, edge_order=2), axis=0)
    _, inv = coeffs.det_inv
    out = np.einsum("ab...,b...->a...", inv, eu)
    s = coeffs.speed(speed)
    if s is not None:
        out = out * s**2
    return out


def weighted_inner_product(
    u: np.ndarray, v: np.ndarray, grid: Grid, coeffs: CoefficientSet, speed_weighted: Union[bool, str] = False
) -> float:
    """``sum u v mu det(g')^{1/2} h^n`` with trapezoidal boundary weights."""
    u = np.asarray(u, dtype=float)
    v = np.asarray(v, dtype=float)
    if u.shape != grid.shape or v.shape != grid.shape:
        raise GeometryError(f"fields of shape {u.shape} and {v.shape} do not live on grid {grid.shape}")
    speed = "c" if speed_weighted is True else (None if not speed_weighted else speed_weighted)
    w = coeffs.node_weight(grid, speed) * grid.node_volume
    return float(np.sum(u * v * w))


def weighted_norm(u, grid, coeffs, speed_weighted=False) -> float:
    return float(np.sqrt(max(weighted_inner_product(u, u, grid, coeffs, speed_weighted), 0.0)))


def verify_conformal_identity(
    coeffs: CoefficientSet, grid: Grid, field: np.ndarray, op_c: LaplaceBeltrami = None, op_g: LaplaceBeltrami = None
) -> float:
    """Relative interior residual of ``A_{c^-2 g} w = c^2 A_g w + (2-n)/2 grad c^2 . grad_g w``.

    Both sides are discretized independently; the residual is measured in
    the discrete L2 norm over interior nodes.
    """
    field = grid.validate_field(field, "field")
    op_c = op_c or assemble_laplace_beltrami(grid, coeffs, speed_weighted=True)
    op_g = op_g or assemble_laplace_beltrami(grid, coeffs, speed_weighted=False)
    lhs = op_c.apply(field)
    c2 = coeffs.c**2
    rhs = c2 * op_g.apply(field)
    if grid.dim != 2:
        gc2 = np.stack(np.gradient(c2, *grid.spacing, edge_order=2), axis=0)
        rhs = rhs + 0.5 * (2 - grid.dim) * np.sum(gc2 * grad_g(field, grid, coeffs), axis=0)
    m = grid.interior_mask
    scale = np.linalg.norm(lhs[m])
    if scale == 0.0:
        return float(np.linalg.norm((lhs - rhs)[m]))
    return float(np.linalg.norm((lhs - rhs)[m]) / scale)
