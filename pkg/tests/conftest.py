import numpy as np
import pytest
import scipy.sparse.linalg as spla

from wavecontrast.control import ControlProblem
from wavecontrast.geometry import CoefficientSet, Grid, assemble_laplace_beltrami
from wavecontrast.recovery import (
    assemble_recovery_operator_2d,
    compute_source_factors,
    solve_contrast,
    synthesize_measurement,
)


def gaussian_bump(grid, center=(0.55, 0.45), width=0.12):
    X = grid.coords()
    r2 = sum((Xa - ca) ** 2 for Xa, ca in zip(X, center))
    return np.exp(-r2 / (2 * width**2))


def smooth_random(grid, rng, modes=4):
    X = grid.coords()
    out = np.zeros(grid.shape)
    for k in np.ndindex(*(modes,) * grid.dim):
        k = np.asarray(k) + 1
        term = rng.standard_normal() / float(np.prod(k))
        for a in range(grid.dim):
            term = term * np.sin(k[a] * np.pi * X[a])
        out += term
    return out


def poisson_alpha(grid, coeffs, delta=1.0):
    op = assemble_laplace_beltrami(grid, coeffs)
    a = np.zeros(grid.size)
    a[grid.interior_nodes] = spla.spsolve(op.interior_stiffness.tocsc(), -op.interior_weights * delta)
    return a.reshape(grid.shape)


class Twin:
    """Synthetic twin experiment on the unit square with full-boundary control."""

    def __init__(self, n=24, amp=0.05, tau=3.0, seed=3, same_velocity=False, dt=None, delta=1.0):
        self.grid = g = Grid.unit(n)
        self.coeffs = co = CoefficientSet.build(g, c=1 + amp * gaussian_bump(g), c_ref=1.0)
        self.opg = assemble_laplace_beltrami(g, co)
        self.alpha = poisson_alpha(g, co, delta)
        rng = np.random.default_rng(seed)
        self.beta = smooth_random(g, rng)
        self.beta_ref = self.beta if same_velocity else smooth_random(g, rng)
        self.prob = ControlProblem(g, co, tau=tau, dt=dt)
        self.meas = synthesize_measurement(
            g, co, self.alpha, self.beta, self.beta_ref, nt=self.prob.nt, dt=self.prob.dt, operator=self.prob.operator
        )
        self.factors = compute_source_factors(self.meas.reference, g, co, self.opg)
        self.f_true = (co.c**2 - 1.0) * g.interior_mask
        self._system = None
        self._solution = None

    @property
    def system(self):
        if self._system is None:
            self._system = assemble_recovery_operator_2d(self.prob, self.factors, self.meas)
        return self._system

    @property
    def solution(self):
        if self._solution is None:
            self._solution = solve_contrast(self.system, self.coeffs)
        return self._solution

    def weighted(self, v):
        w = self.prob.operator.interior_weights
        vi = np.asarray(v).ravel()[self.grid.interior_nodes]
        return float(np.sqrt(np.sum(w * vi * vi)))

    def f_error(self):
        return self.weighted(self.solution.f - self.f_true) / self.weighted(self.f_true)


@pytest.fixture(scope="session")
def twin24():
    return Twin()


@pytest.fixture(scope="session")
def twin24_same_speed(twin24):
    return Twin(amp=0.0, dt=twin24.prob.dt)


@pytest.fixture(scope="session")
def hum16():
    g = Grid.unit(16)
    co = CoefficientSet.build(g)
    return ControlProblem(g, co, tau=3.0)


@pytest.fixture(scope="session")
def hum16_variable():
    g = Grid.unit(16)
    x, y = g.coords()
    co = CoefficientSet.build(g, metric=lambda x, y: np.array([[1 + 0.2 * x, 0.1 * y], [0.1 * y, 1.0 + 0 * x]]),
                              c=1 + 0.1 * np.sin(np.pi * x) * y)
    return ControlProblem(g, co, tau=3.0)
