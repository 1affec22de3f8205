import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from nlch.diagnostics import (CSV_COLUMNS, DASHBOARD_KEYS, cauchy_schwarz_ok, diagnostics_csv,
                              energy_dissipation_residual, entropy_dissipation_residual, estimate_dashboard,
                              moment_identity_residual, record, record_density, refinement_ratio)
from nlch.grid import make_grid
from nlch.kernels import make_kernel, sample_kernel
from nlch.solver import InitialDataSpec, SchemeParams, SolverState, init_state, initial_density, run


def constant_records(grid, c, times):
    k = sample_kernel(make_kernel("gaussian", grid.d), 0.5, grid)
    rho = np.full(grid.shape, c)
    return [record_density(grid, rho, k.hat**2, k.hat, t=t) for t in times]


@pytest.fixture(scope="module")
def blob_runs():
    g = make_grid(1, 128, 8.0)
    k = sample_kernel(make_kernel("gaussian", 1), 0.2, g)
    out = []
    for dt in (1e-4, 5e-5):
        s = init_state(InitialDataSpec(sigma=0.5), g, 0.2, k, SchemeParams(dt=dt))
        out.append(run(s, 0.02, recorder=record)[1])
    return g, out


def test_constant_state_values():
    g = make_grid(2, 32, 4.0)
    c = 1.7
    (r,) = constant_records(g, c, [0.0])
    V = g.volume
    assert r.mass == pytest.approx(c * V, rel=1e-14)
    assert abs(r.energy) <= 1e-14
    assert r.entropy == pytest.approx(c * V * math.log(c), rel=1e-13)
    for name in ("fisher", "lap_moll_sq", "weighted_velocity_sq", "grad_sqrt_sq", "gradient_l1"):
        assert abs(getattr(r, name)) <= 1e-12


@pytest.mark.parametrize("d", [1, 2])
def test_blob_second_moment(d):
    g = make_grid(d, 256, 16.0)
    sigma = 1.0  # = L / 16
    rho = initial_density(InitialDataSpec(sigma=sigma, mass=2.0), g)
    r = record_density(g, rho, 1.0, 1.0)
    assert r.second_moment == pytest.approx(d * sigma**2 * 2.0, rel=1e-2)


def test_impulse_second_moment():
    g = make_grid(2, 32, 4.0)
    rho = np.zeros(g.shape)
    rho[16, 16] = 1 / g.cell_volume
    assert record_density(g, rho, 1.0, 1.0).second_moment <= g.h**2


def test_vacuum_cells_are_flagged():
    g = make_grid(1, 32, 4.0)
    rho = np.zeros(g.shape)
    rho[:16] = 1.0
    rho[20] = -1e-6
    r = record_density(g, rho, 1.0, 1.0)
    assert r.excluded_mass > 0 and r.excluded_flag


def test_constant_trajectory_residuals_vanish():
    g = make_grid(2, 16, 4.0)
    recs = constant_records(g, 0.8, [0.0, 0.1, 0.2])
    assert energy_dissipation_residual(recs).residual == 0.0
    assert entropy_dissipation_residual(recs).residual == 0.0


@pytest.mark.parametrize("fn", [energy_dissipation_residual, entropy_dissipation_residual])
def test_dissipation_residuals_are_first_order_in_time(blob_runs, fn):
    _, (coarse, fine) = blob_runs
    a, b = fn(coarse.records), fn(fine.records)
    assert a.passed and b.passed
    assert abs(b.normalized) <= 1e-2
    assert 1.5 <= refinement_ratio(a, b) <= 3.0


def test_moment_residual_on_localized_run(blob_runs):
    g, (coarse, fine) = blob_runs
    a = moment_identity_residual(coarse.records, g, snapshots=coarse.snapshots)
    b = moment_identity_residual(fine.records, g, snapshots=fine.snapshots)
    assert a.passed and b.passed and not a.flags
    assert 1.5 <= refinement_ratio(a, b) <= 3.0


def test_moment_residual_flags_seam_contact():
    g = make_grid(1, 32, 4.0)
    recs = constant_records(g, 1.0, [0.0, 0.1])
    rep = moment_identity_residual(recs, g, snapshots=[np.ones(g.shape)])
    assert "seam" in rep.flags and not rep.passed


def test_functionals_non_increasing_along_run(blob_runs):
    _, (coarse, _) = blob_runs
    E = np.array([r.energy for r in coarse.records])
    P = np.array([r.entropy for r in coarse.records])
    assert np.all(np.diff(E) <= 1e-12) and np.all(np.diff(P) <= 1e-12)


def test_window_selection(blob_runs):
    _, (coarse, _) = blob_runs
    rep = energy_dissipation_residual(coarse.records, window=(0.005, 0.015))
    assert rep.t_start == pytest.approx(0.005) and rep.t_end == pytest.approx(0.015)
    with pytest.raises(ValueError):
        energy_dissipation_residual(coarse.records, window=(0.0, 1.0))


def test_dashboard_on_constant_run():
    g = make_grid(2, 16, 4.0)
    dash = estimate_dashboard(constant_records(g, 2.0, [0.0, 0.5, 1.0]))
    assert set(dash) == set(DASHBOARD_KEYS)
    for key in ("C_weighted_vel_int", "D_h2_int", "F_grad_sqrt_int", "G_grad_l1_sq_int"):
        assert abs(dash[key]) <= 1e-20
    assert dash["A_mass"] == pytest.approx(2.0 * g.volume)


@given(st.integers(0, 2**31 - 1))
def test_cauchy_schwarz_on_random_positive_fields(seed):
    g = make_grid(2, 16, 4.0)
    rho = np.random.default_rng(seed).random(g.shape) + 1e-3
    assert cauchy_schwarz_ok(record_density(g, rho, 1.0, 1.0))


@given(st.integers(0, 2**31 - 1))
def test_quadratic_terms_nonnegative(seed):
    g = make_grid(1, 32, 4.0)
    k = sample_kernel(make_kernel("gaussian", 1), 0.5, g)
    rho = np.random.default_rng(seed).random(g.shape) + 0.1
    r = record(SolverState(g, rho, 0.0, 0.5, k))
    for name in ("energy", "fisher", "lap_moll_sq", "weighted_velocity_sq", "grad_sqrt_sq", "upwind_fisher"):
        assert getattr(r, name) >= -1e-12


def test_csv_layout():
    g = make_grid(1, 16, 4.0)
    text = diagnostics_csv(constant_records(g, 1.0, [0.0, 0.25]))
    lines = text.splitlines()
    assert lines[0].split(",") == list(CSV_COLUMNS)
    assert len(lines) == 3
    assert CSV_COLUMNS[:11] == ("t", "mass", "moment2", "energy", "entropy", "fisher", "lap_moll_sq",
                                "weighted_vel_sq", "grad_sqrt_sq", "grad_l1", "excluded_mass")
