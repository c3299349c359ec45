import numpy as np
import pytest

from wavecontrast.control import ControlProblem
from wavecontrast.geometry import CoefficientSet, Grid
from wavecontrast.recovery import Measurement, SourceFactors
from wavecontrast.transport import (
    EXITED,
    TransportError,
    apply_transport,
    lemma_bound,
    poincare_constant,
    probe_fields,
    solve_first_order,
    solve_recovery_first_order,
    trace_characteristics,
    validate_flow_assumption,
)
from wavecontrast.wave import BoundaryTrace


def uniform(grid, axis=0, value=1.0):
    S = np.zeros((grid.dim,) + grid.shape)
    S[axis] = value
    return S


def strip(n=33):
    return Grid((n, n), (1.0, 1.0), gamma=["x0"])


# ---------------------------------------------------------------- flow checks

def test_uniform_flow_passes_all_checks():
    g = Grid.unit(10, 3, gamma=["x0"])
    rep = validate_flow_assumption(g, uniform(g), delta=0.5)
    assert rep.passed, str(rep)


def test_vanishing_field_fails_delta():
    g = Grid.unit(10, 3, gamma=["x0"])
    S = uniform(g)
    S[0, 4, 5, 6] = 0.0
    rep = validate_flow_assumption(g, S, delta=0.5)
    ok, msg = rep.checks["|Sigma0| >= delta"]
    assert not ok and "(4, 5, 6)" in msg


def test_rotational_field_fails_exit():
    g = Grid.unit(10, 3, gamma=["x0"])
    x, y, z = g.coords()
    S = np.stack([-(y - 0.5), x - 0.5, np.zeros_like(x)])
    rep = validate_flow_assumption(g, S, delta=0.0, probe_stride=7)
    assert not rep.checks["exit"][0]
    assert not rep.passed


def test_outflow_on_gamma_fails_inflow_check():
    g = Grid.unit(10, 3, gamma=["x0"])
    rep = validate_flow_assumption(g, uniform(g, value=-1.0), delta=0.5)
    assert not rep.checks["inflow on Gamma"][0]


# ---------------------------------------------------------------- characteristics

def test_uniform_paths_are_straight_unit_segments():
    g = Grid.unit(10, 3, gamma=["x0"])
    fan = trace_characteristics(g, uniform(g))
    assert fan.all_exited
    np.testing.assert_allclose(fan.lengths, 1.0, atol=1e-12)
    for p in fan.paths:
        assert np.abs(p[:, 1:] - p[0, 1:]).max() <= 1e-14


def test_curved_field_matches_parabola():
    # x' = 1, y' = x from (0, y0): y = y0 + s^2 / 2
    g = Grid.unit(16, 3, gamma=["x0"])
    x = g.coords()[0]
    S = np.stack([np.ones_like(x), x, np.zeros_like(x)])
    seeds = np.array([[0.0, 0.1, 0.5], [0.0, 0.3, 0.2]])
    fan = trace_characteristics(g, S, seeds)
    assert all(s == EXITED for s in fan.status)
    for seed, p in zip(seeds, fan.paths):
        # interior steps are exact for this quadratic; the exit point is cut on the chord
        np.testing.assert_allclose(p[:-1, 1], seed[1] + 0.5 * p[:-1, 0] ** 2, atol=1e-12)
        assert abs(p[-1, 1] - seed[1] - 0.5 * p[-1, 0] ** 2) <= g.h**2


def test_vanishing_field_rejected():
    g = Grid.unit(8, 3, gamma=["x0"])
    with pytest.raises(TransportError):
        trace_characteristics(g, np.zeros((3,) + g.shape))


# ---------------------------------------------------------------- first-order solves

@pytest.mark.parametrize("scatter", ["idw", "backtrace"])
def test_linear_solution(scatter):
    g = strip()
    sol = solve_first_order(g, uniform(g), 0.0, np.ones(g.shape), scatter=scatter)
    assert np.abs(sol.f - g.coords()[0]).max() <= 1e-3


@pytest.mark.parametrize("scatter", ["idw", "backtrace"])
def test_integrating_factor_solution(scatter):
    g = strip()
    sol = solve_first_order(g, uniform(g), 1.0, np.ones(g.shape), scatter=scatter)
    assert np.abs(sol.f - (1 - np.exp(-g.coords()[0]))).max() <= 1e-3


def test_zero_rhs_gives_zero():
    g = strip(9)
    sol = solve_first_order(g, uniform(g), 1.0, np.zeros(g.shape))
    assert not np.any(sol.f) and sol.residual == 0.0


def test_transport_residual_small_for_smooth_solution():
    g = Grid.unit(16, 3, gamma=["x0"])
    x, y, z = g.coords()
    S = np.stack([np.ones_like(x), 0.3 * np.sin(np.pi * y), np.zeros_like(x)])
    f_true = x * np.cos(y) * (1 + z)
    rhs = apply_transport(g, S, 0.5, f_true)
    sol = solve_first_order(g, S, 0.5, rhs, scatter="backtrace")
    assert np.abs(sol.f - f_true).max() <= 2e-2
    assert sol.residual <= 0.05


def test_uncovered_nodes_reported():
    g = Grid.unit(12, 3, gamma=["x0"])
    seeds = np.array([[0.0, 0.5, 0.5]])
    with pytest.raises(TransportError, match="farther than 2h"):
        solve_first_order(g, uniform(g), 0.0, np.ones(g.shape), seeds=seeds)


def test_unknown_scatter():
    g = strip(9)
    with pytest.raises(ValueError):
        solve_first_order(g, uniform(g), 0.0, np.ones(g.shape), scatter="nearest")


# ---------------------------------------------------------------- Poincare constant and lemma bound

def test_probe_fields_vanish_on_gamma():
    g = Grid.unit(10, 3, gamma=["x0", "y0"])
    for v in probe_fields(g, count=5):
        assert np.abs(v.reshape(-1)[g.gamma_nodes]).max() <= 1e-14


def test_uniform_strip_constant_at_most_width():
    g = strip()
    C = poincare_constant(g, uniform(g))["C"]
    assert 0 < C <= 1.0


@pytest.mark.parametrize("s", [2.0, 0.5, 3.7])
def test_constant_homogeneity(s):
    g = Grid.unit(10, 3, gamma=["x0"])
    x, y, z = g.coords()
    S = np.stack([1 + 0.2 * y, 0.1 * np.sin(np.pi * x), 0.1 * z])
    C1 = poincare_constant(g, S)["C"]
    Cs = poincare_constant(g, s * S)["C"]
    assert abs(Cs * s - C1) <= 1e-10 * C1


def test_lemma_bound_on_probes():
    g = Grid.unit(12, 3, gamma=["x0"])
    x, y, z = g.coords()
    S = np.stack([1 + 0.2 * y, 0.1 * np.sin(np.pi * x), np.zeros_like(x)])
    s0 = 0.5 * np.cos(np.pi * y)
    probes = probe_fields(g, count=20, seed=3)
    C = poincare_constant(g, S, probes)["C"]
    for v in probes:
        lhs, rhs = lemma_bound(g, S, s0, v, C)
        assert lhs <= rhs


# ---------------------------------------------------------------- perturbed recovery equation

def test_recovery_needs_three_dimensions():
    g = Grid.unit(10)
    prob = ControlProblem(g, CoefficientSet.build(g, c_ref=1.0), tau=1.0)
    fs = SourceFactors(prob.dt, np.ones((prob.nt + 1,) + g.shape), np.zeros((prob.nt + 1, 2) + g.shape))
    meas = Measurement(BoundaryTrace(prob.dt, np.zeros((prob.nt + 1, g.n_gamma))))
    with pytest.raises(TransportError, match="n >= 3"):
        solve_recovery_first_order(prob, fs, meas)


@pytest.fixture(scope="module")
def linear_setup():
    g = Grid.unit(8, 3)
    prob = ControlProblem(g, CoefficientSet.build(g, c_ref=1.0), tau=1.0)
    nt = prob.nt
    S = np.broadcast_to(uniform(g, value=0.5), (nt + 1, 3) + g.shape).copy()
    fs = SourceFactors(prob.dt, np.zeros((nt + 1,) + g.shape), S)
    t = np.arange(nt + 1) * prob.dt
    m = np.sin(np.pi * t / prob.tau)[:, None] * np.random.default_rng(0).standard_normal(g.n_gamma)[None]
    return prob, fs, Measurement(BoundaryTrace(prob.dt, m))


def test_zero_measurement_gives_zero(linear_setup):
    prob, fs, _ = linear_setup
    zero = Measurement(BoundaryTrace(prob.dt, np.zeros((prob.nt + 1, prob.grid.n_gamma))))
    out = solve_recovery_first_order(prob, fs, zero, zero_compact=True, inflow=Grid.unit(8, 3, gamma=["x0"]))
    assert not np.any(out["f"]) and out["iterations"] == 0


def test_zero_compact_reduces_to_first_order_solve(linear_setup):
    from wavecontrast.control import apply_C_star

    prob, fs, meas = linear_setup
    inflow = Grid.unit(8, 3, gamma=["x0"])
    out = solve_recovery_first_order(prob, fs, meas, zero_compact=True, inflow=inflow)
    h = -apply_C_star(prob, meas.m_dot) * prob.grid.interior_mask
    ref = solve_first_order(inflow, fs.Sigma0, fs.sigma0, h)
    scale = np.abs(ref.f).max()
    assert np.abs(out["f"] - ref.f * prob.grid.interior_mask).max() <= 1e-6 * scale
