import csv
import math

import numpy as np
import pytest

from wavecontrast.gcc import (
    estimate_control_time,
    trace_ray,
    trapping_speed,
    verify_metric_reflection,
    write_rays_csv,
)
from wavecontrast.geometry import CoefficientSet, Grid


@pytest.fixture(scope="module")
def flat24():
    g = Grid.unit(24)
    return g, CoefficientSet.build(g)


def variable_speed(gamma=("x0",)):
    g = Grid.unit(24, gamma=list(gamma))
    x, y = g.coords()
    return g, CoefficientSet.build(g, c=1 + 0.3 * np.sin(np.pi * x) * y)


def test_flat_square_full_boundary(flat24):
    g, co = flat24
    res = estimate_control_time(g, co)
    assert res.verdict == "PASS"
    assert 1.2 * math.sqrt(2) * 0.98 <= res.tau <= 1.2 * math.sqrt(2) * 1.1
    assert res.max_escape <= math.sqrt(2) + 1e-9


def test_flat_exit_time_matches_billiard(flat24):
    g, co = flat24
    ray = trace_ray(g, co, [0.25, 0.5], [1.0, 0.0])
    assert ray.status == "escaped"
    assert ray.exit_time == pytest.approx(0.75, rel=0.02)
    ray = trace_ray(g, co, [0.2, 0.3], [0.6, 0.8])
    # first crossing of y = 1 at t = 0.7 / 0.8
    assert ray.exit_time == pytest.approx(0.875, rel=0.02)


def test_single_edge_has_bouncing_ball_orbits(flat24):
    # rays parallel to the controlled edge reflect between y = 0 and y = 1 forever
    g1 = Grid.unit(24, gamma=["x0"])
    ray = trace_ray(g1, flat24[1], [0.5, 0.5], [0.0, 1.0], t_max=5.0)
    assert ray.status == "survived" and math.isinf(ray.exit_time)
    assert all(e.kind == "reflect" for e in ray.events)
    assert estimate_control_time(g1, flat24[1], 36, 16).verdict == "FAIL"


def test_reflected_rays_reach_single_edge(flat24):
    g1 = Grid.unit(24, gamma=["x0"])
    ray = trace_ray(g1, flat24[1], [0.5, 0.5], [0.6, 0.8])
    assert ray.status == "escaped" and len(ray.events) >= 3
    # unfolded straight line: x travels 0.5 + 1 before reaching x = 0
    assert ray.exit_time == pytest.approx(1.5 / 0.6, rel=0.02)


def test_enlarging_gamma_never_increases_escape(flat24):
    _, co = flat24
    starts = np.array([[0.3, 0.4], [0.7, 0.2], [0.5, 0.8]])
    times = []
    for gamma in (["x0", "y0"], ["x0", "y0", "x1"], "all"):
        g = Grid.unit(24, gamma=gamma)
        times.append(estimate_control_time(g, co, starts=starts, n_directions=16).exit_times)
    assert np.all(times[1] <= times[0] + 1e-12)
    assert np.all(times[2] <= times[1] + 1e-12)


def test_trapping_profile_fails():
    g = Grid.unit(24)
    co = CoefficientSet.build(g, c=trapping_speed(g))
    res = estimate_control_time(g, co, 49, 16)
    assert res.verdict == "FAIL" and res.n_survived > 0
    assert res.worst_ray is not None and res.worst_ray.status == "survived"


def test_hamiltonian_drift_with_projection():
    g, co = variable_speed()
    ray = trace_ray(g, co, [0.3, 0.4], [0.6, 0.8], t_max=1.0)
    assert ray.drift <= 1e-6


def test_unprojected_drift_shrinks_with_step():
    g, co = variable_speed()
    d = [trace_ray(g, co, [0.3, 0.4], [0.6, 0.8], t_max=1.0, project=False, dt=g.h / k).drift for k in (4, 32)]
    assert d[1] < d[0] < 1e-2


def test_unit_speed_start():
    g, co = variable_speed()
    ray = trace_ray(g, co, [0.3, 0.4], [3.0, 4.0], t_max=0.5)
    G = np.eye(2) * (1 + 0.3 * np.sin(np.pi * 0.3) * 0.4) ** 2
    p = ray.momenta[0]
    assert p @ G @ p == pytest.approx(1.0, rel=1e-3)


def test_start_outside_rejected(flat24):
    with pytest.raises(ValueError):
        trace_ray(*flat24, [1.2, 0.5], [1.0, 0.0])


# ---------------------------------------------------------------- reflection law

def _reflections(ray):
    return [e for e in ray.events if e.kind == "reflect"]


def test_flat_mirror_law():
    g = Grid.unit(24, gamma=["x0"])
    co = CoefficientSet.build(g)
    ev = _reflections(trace_ray(g, co, [0.5, 0.5], [1.0, 1.0]))[0]
    assert verify_metric_reflection(ev) <= 1e-10
    tang = np.abs(ev.normal) < 0.5
    np.testing.assert_allclose(ev.p_out[tang], ev.p_in[tang], atol=1e-14)
    np.testing.assert_allclose(ev.p_out[~tang], -ev.p_in[~tang], atol=1e-14)


def test_anisotropic_reflection_preserves_hamiltonian():
    g = Grid.unit(24, gamma=["x0"])
    co = CoefficientSet.build(g, metric=[1.0, 4.0])
    ray = trace_ray(g, co, [0.5, 0.5], [0.3, 1.0])
    evs = _reflections(ray)
    assert evs
    for ev in evs:
        assert verify_metric_reflection(ev) <= 1e-10
        assert abs(ev.p_out @ ev.G @ ev.p_out - ev.p_in @ ev.G @ ev.p_in) <= 1e-12


def test_normal_incidence_negates_momentum():
    g = Grid.unit(24, gamma=["x0"])
    co = CoefficientSet.build(g)
    ev = _reflections(trace_ray(g, co, [0.5, 0.5], [1.0, 0.0]))[0]
    np.testing.assert_allclose(ev.p_out, -ev.p_in, atol=1e-14)
    assert verify_metric_reflection(ev) <= 1e-10


def test_rays_csv(tmp_path, flat24):
    rays = [trace_ray(*flat24, [0.3, 0.4], [0.6, 0.8]), trace_ray(*flat24, [0.5, 0.5], [1.0, 0.0])]
    p = tmp_path / "rays.csv"
    write_rays_csv(p, rays)
    rows = list(csv.reader(open(p)))
    assert rows[0] == ["ray", "t", "x", "y"]
    assert len(rows) == 1 + sum(len(r.times) for r in rays)
    assert {r[0] for r in rows[1:]} == {"0", "1"}
