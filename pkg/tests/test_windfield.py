import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from puffassim.windfield import (
    GridSpec,
    WindDataError,
    WindGrid,
    WindPerturbationSpec,
    adjust_mass_consistency,
    divergence,
    interpolate_field,
    perturb_observations,
    read_wind_csv,
    sample_wind_at,
    speed_dir_to_uv,
    uv_to_speed_dir,
    write_wind_csv,
)

from conftest import station


# ---------------------------------------------------------------------------
# perturb_observations
# ---------------------------------------------------------------------------

def test_zero_sigma_is_identity(rng):
    obs = [station("A", 0, 0, 3.0, 358.0), station("B", 5, 5, 0.0, 12.5)]
    assert perturb_observations(obs, WindPerturbationSpec(0.0, 0.0), rng) == obs


def test_direction_wraps_past_north():
    class FixedDraws:
        def standard_normal(self, shape):
            out = np.zeros(shape)
            out[:, 1] = 1.0
            return out

    obs = [station("A", 0, 0, 3.0, 358.0)]
    (out,) = perturb_observations(obs, WindPerturbationSpec(0.0, 4.0), FixedDraws())
    assert out.direction == pytest.approx(2.0)


def test_speed_sampling_statistics():
    rng = np.random.default_rng(2024)
    spec = WindPerturbationSpec(0.5, 5.0)
    obs = [station("A", 0, 0, 2.0, 90.0)]
    speeds = np.array([perturb_observations(obs, spec, rng)[0].speed for _ in range(10_000)])
    assert abs(speeds.mean() - 2.0) < 0.02
    assert abs(speeds.std(ddof=1) - 0.5) < 0.02


def test_negative_draws_clamp_to_zero():
    rng = np.random.default_rng(0)
    obs = [station("A", 0, 0, 0.1, 90.0)] * 200
    out = perturb_observations(obs, WindPerturbationSpec(2.0, 0.0), rng)
    assert min(o.speed for o in out) == 0.0


def test_perturb_rejects_empty(rng):
    with pytest.raises(WindDataError, match="no wind data"):
        perturb_observations([], WindPerturbationSpec(), rng)


@given(seed=st.integers(0, 2**32 - 1))
@settings(max_examples=25, deadline=None)
def test_perturb_same_seed_bit_identical(seed):
    obs = [station(f"S{i}", i, -i, 2.0 + i, 30.0 * i) for i in range(6)]
    spec = WindPerturbationSpec(0.5, 5.0)
    a = perturb_observations(obs, spec, np.random.default_rng(seed))
    b = perturb_observations(obs, spec, np.random.default_rng(seed))
    assert [(o.speed, o.direction) for o in a] == [(o.speed, o.direction) for o in b]


# ---------------------------------------------------------------------------
# direction convention
# ---------------------------------------------------------------------------

def test_north_wind_blows_south():
    u, v = speed_dir_to_uv(5.0, 0.0)
    assert u == pytest.approx(0.0, abs=1e-12) and v == pytest.approx(-5.0)
    u, v = speed_dir_to_uv(5.0, 270.0)  # westerly blows toward +x
    assert u == pytest.approx(5.0) and v == pytest.approx(0.0, abs=1e-12)


@given(speed=st.floats(0.01, 50.0), direction=st.floats(0.0, 359.999))
def test_direction_round_trip(speed, direction):
    s, d = uv_to_speed_dir(*speed_dir_to_uv(speed, direction))
    assert s == pytest.approx(speed, abs=1e-9)
    gap = abs(d - direction) % 360.0
    assert min(gap, 360.0 - gap) < 1e-9


# ---------------------------------------------------------------------------
# interpolate_field
# ---------------------------------------------------------------------------

def test_single_station_gives_uniform_field(grid10):
    g = interpolate_field([station("A", 3.3, 7.1, 4.0, 225.0)], grid10)
    u, v = speed_dir_to_uv(4.0, 225.0)
    np.testing.assert_allclose(g.u, u, rtol=0, atol=1e-12)
    np.testing.assert_allclose(g.v, v, rtol=0, atol=1e-12)


def test_equal_stations_give_that_vector(grid10):
    g = interpolate_field([station("A", 0, 0, 3.0, 90.0), station("B", 9, 9, 3.0, 90.0)], grid10)
    np.testing.assert_allclose(g.u, -3.0, atol=1e-12)


def test_equidistant_stations_average():
    # cell at x=2 sits 1 m from stations at x=1 (u=1) and x=3 (u=3): weights 1/1^2 each
    spec = GridSpec(origin=(0.0, 0.0), dx=2.0, dy=2.0, nx=3, ny=2)
    obs = [station("A", 1.0, 0.0, 1.0, 270.0), station("B", 3.0, 0.0, 3.0, 270.0)]
    g = interpolate_field(obs, spec)
    assert g.u[0, 1] == pytest.approx(2.0)


def test_cell_on_station_copies_it(grid10):
    obs = [station("A", 2.1, 3.0, 1.0, 270.0), station("B", 8.0, 8.0, 6.0, 90.0)]
    g = interpolate_field(obs, grid10)
    assert g.u[3, 2] == pytest.approx(1.0, abs=0) and g.v[3, 2] == pytest.approx(0.0, abs=1e-15)


def test_interpolate_requires_data(grid10):
    with pytest.raises(WindDataError, match="no wind data"):
        interpolate_field([], grid10)


@given(
    pts=st.lists(
        st.tuples(st.floats(-5, 15), st.floats(-5, 15), st.floats(0, 20), st.floats(0, 359.9)),
        min_size=1, max_size=8,
    )
)
@settings(max_examples=60, deadline=None)
def test_idw_is_a_convex_combination(pts, ):
    spec = GridSpec(origin=(0.0, 0.0), dx=1.0, dy=1.0, nx=10, ny=10)
    obs = [station(f"S{i}", x, y, s, d) for i, (x, y, s, d) in enumerate(pts)]
    g = interpolate_field(obs, spec)
    us = np.array([o.uv[0] for o in obs])
    vs = np.array([o.uv[1] for o in obs])
    tol = 1e-9 * (1 + np.abs(us).max() + np.abs(vs).max())
    assert g.u.min() >= us.min() - tol and g.u.max() <= us.max() + tol
    assert g.v.min() >= vs.min() - tol and g.v.max() <= vs.max() + tol


# ---------------------------------------------------------------------------
# adjust_mass_consistency
# ---------------------------------------------------------------------------

def test_uniform_field_unchanged(grid10):
    g = WindGrid.uniform(grid10, 2.0, -1.0)
    out = adjust_mass_consistency(g, 50, 1.0)
    np.testing.assert_array_equal(out.u, g.u)
    np.testing.assert_array_equal(out.v, g.v)
    assert out.adjustment_distance == 0.0


def test_zero_iterations_is_identity(grid10, rng):
    g = WindGrid(grid10, rng.normal(size=(10, 10)), rng.normal(size=(10, 10)))
    assert adjust_mass_consistency(g, 0) is g


def test_linear_divergent_field_is_improved(grid10):
    x = grid10.x
    g = WindGrid(grid10, np.tile(x, (10, 1)), np.zeros((10, 10)))
    before = g.divergence_norm()
    out = adjust_mass_consistency(g, 50, 1.0)
    assert before > 0
    assert out.divergence_norm() < before
    assert out.adjustment_distance > 0


def _reference_divergence(u, v, dx, dy):
    ny, nx = u.shape
    out = np.zeros((ny - 2, nx - 2))
    for j in range(1, ny - 1):
        for i in range(1, nx - 1):
            out[j - 1, i - 1] = (u[j, i + 1] - u[j, i - 1]) / (2 * dx) + (v[j + 1, i] - v[j - 1, i]) / (2 * dy)
    return out


def test_divergence_matches_loop_reference(rng):
    u, v = rng.normal(size=(2, 7, 9))
    np.testing.assert_allclose(divergence(u, v, 2.0, 3.0), _reference_divergence(u, v, 2.0, 3.0))


@given(
    seed=st.integers(0, 10_000),
    nx=st.integers(2, 12),
    ny=st.integers(2, 12),
    dx=st.floats(0.5, 500.0),
    dy=st.floats(0.5, 500.0),
    iters=st.integers(0, 30),
    relax=st.floats(0.05, 1.0),
)
@settings(max_examples=80, deadline=None)
def test_relaxation_never_increases_divergence(seed, nx, ny, dx, dy, iters, relax):
    r = np.random.default_rng(seed)
    spec = GridSpec(origin=(0.0, 0.0), dx=dx, dy=dy, nx=nx, ny=ny)
    g = WindGrid(spec, r.normal(scale=5, size=(ny, nx)), r.normal(scale=5, size=(ny, nx)))
    out = adjust_mass_consistency(g, iters, relax)
    assert out.divergence_norm() <= g.divergence_norm() * (1 + 1e-12) + 1e-15


# ---------------------------------------------------------------------------
# sample_wind_at
# ---------------------------------------------------------------------------

def test_lookup_exact_at_cell_centres(grid10, rng):
    g = WindGrid(grid10, rng.normal(size=(10, 10)), rng.normal(size=(10, 10)))
    for i, j in [(0, 0), (3, 7), (9, 9), (5, 0)]:
        s = sample_wind_at(g, (grid10.x[i], grid10.y[j]))
        assert (s.u, s.v) == (g.u[j, i], g.v[j, i])
        assert not s.clamped


def test_lookup_uniform(grid10):
    g = WindGrid.uniform(grid10, 1.5, -0.5)
    for p in [(0.2, 0.3), (4.5, 8.9), (9.0, 0.0)]:
        s = sample_wind_at(g, p)
        assert s.u == pytest.approx(1.5) and s.v == pytest.approx(-0.5)


def test_lookup_midpoint_is_mean():
    spec = GridSpec(origin=(0.0, 0.0), dx=1.0, dy=1.0, nx=2, ny=2)
    g = WindGrid(spec, np.array([[0.0, 2.0], [0.0, 2.0]]), np.zeros((2, 2)))
    assert sample_wind_at(g, (0.5, 0.0)).u == pytest.approx(1.0)


def test_lookup_outside_is_clamped(grid10, caplog):
    u = np.tile(np.arange(10.0), (10, 1))
    g = WindGrid(grid10, u, np.zeros((10, 10)))
    s = sample_wind_at(g, (25.0, 4.0))
    assert s.clamped and s.u == 9.0
    assert "outside the grid" in caplog.text


# ---------------------------------------------------------------------------
# files
# ---------------------------------------------------------------------------

def test_wind_csv_round_trip(tmp_path):
    obs = [station("A", 1.5, -2.0, 3.25, 359.5, t=900.0), station("B", 0, 0, 0.0, 0.0)]
    p = tmp_path / "w.csv"
    write_wind_csv(p, obs)
    assert p.read_text().splitlines()[0] == "station_id,x_m,y_m,z_m,time_s,speed_ms,dir_deg"
    assert read_wind_csv(p) == obs


def test_wind_csv_errors_name_the_line(tmp_path):
    p = tmp_path / "w.csv"
    p.write_text("station_id,x_m,y_m,z_m,time_s,speed_ms,dir_deg\nA,0,0,10,0,3,90\nB,0,0,10,0,-1,90\n")
    with pytest.raises(WindDataError, match="line 3"):
        read_wind_csv(p)
