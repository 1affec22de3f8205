import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy.special import lambertw

from nlch.grid import make_grid
from nlch.kernels import make_kernel, sample_kernel
from nlch.limit_lab import (SweepConfig, TestFunctionSpec, choose_truncation_level, commutator_error,
                            d2_decomposition_test, epsilon_sweep, fit_slope, halving_ratios, j1_domination, j1_term,
                            j2_bound_check, uniform_integrability_probe, weak_form_residual)
from nlch.solver import InitialDataSpec, SchemeParams, init_state, initial_density, run


def truncation_oracle(eps):
    """M^2 log M = eps^-4  <=>  M = exp(W(2 eps^-4) / 2)."""
    return math.exp(lambertw(2 * eps**-4).real / 2)


@pytest.fixture(scope="module")
def frozen():
    g = make_grid(2, 128, 8.0)
    rho = initial_density(InitialDataSpec(sigma=1.0), g)
    return g, rho


# --- test functions ---

def test_test_function_derivatives_match_differences():
    g = make_grid(2, 256, 8.0)
    phi = TestFunctionSpec(radius=1.5, center=(0.2, -0.1))
    u = phi.value(g)
    for a, ga in enumerate(phi.gradient(g)):
        fd = (np.roll(u, -1, axis=a) - np.roll(u, 1, axis=a)) / (2 * g.h)
        assert np.max(np.abs(fd - ga)) <= 2e-3 * np.max(np.abs(ga))
    lap_fd = sum(np.roll(u, -1, axis=a) - 2 * u + np.roll(u, 1, axis=a) for a in range(2)) / g.h**2
    lap = phi.laplacian(g)
    assert np.max(np.abs(lap_fd - lap)) <= 2e-3 * np.max(np.abs(lap))
    H = phi.hessian(g)
    assert np.allclose(H[0][1], H[1][0], rtol=1e-14, atol=0)


def test_test_function_support_and_window():
    g = make_grid(2, 64, 4.0)
    with pytest.raises(ValueError, match="seam"):
        TestFunctionSpec(radius=2.0).value(g)
    phi = TestFunctionSpec(radius=1.0, T=2.0)
    th, dth = phi.time_window(np.array([0.0, 2.0]))
    assert th.tolist() == [1.0, 0.0] and dth[0] == 0.0 and dth[1] == 0.0


# --- frozen-field commutators ---

def test_commutator_vanishes_for_zero_density(frozen):
    g, _ = frozen
    k = sample_kernel(make_kernel("gaussian", 2), 0.2, g)
    assert commutator_error(np.zeros(g.shape), TestFunctionSpec(radius=1.5), k) == 0.0


def test_commutator_for_constant_density_is_smoothing_error():
    # rho = 1: the commutator is w_eps * Lap phi - Lap phi, second order in eps
    errs = []
    for eps in (0.2, 0.1):
        g = make_grid(1, 4096, 8.0)
        k = sample_kernel(make_kernel("gaussian", 1), eps, g)
        errs.append(commutator_error(np.ones(g.shape), TestFunctionSpec(radius=1.5), k))
    assert errs[0] / errs[1] >= 3.0


def test_commutator_shrinks_with_eps(frozen):
    g, rho = frozen
    spec = make_kernel("gaussian", 2)
    errs = [commutator_error(rho, TestFunctionSpec(radius=1.5), sample_kernel(spec, e, g)) for e in (0.4, 0.2)]
    assert halving_ratios(errs)[0] >= 1.8


def test_off_diagonal_first_moment_term_is_second_order(frozen):
    # odd in each axis: zero integral, and the field itself is O(eps^2) for smooth rho
    g, rho = frozen
    spec = make_kernel("gaussian", 2)
    fields = [j1_term(rho, sample_kernel(spec, e, g), 0, 1) for e in (0.4, 0.2)]
    assert all(abs(f.sum()) * g.cell_volume <= 1e-14 for f in fields)
    l1 = [np.sum(np.abs(f)) * g.cell_volume for f in fields]
    assert l1[0] / l1[1] >= 3.0  # 4 asymptotically


def test_diagonal_first_moment_term_linear_in_eps(frozen, certifications):
    g, rho = frozen
    spec = make_kernel("gaussian", 2)
    C = certifications["gaussian"].C_best
    dist = [j1_domination(rho, sample_kernel(spec, e, g), 0, 0, C).limit_distance for e in (0.4, 0.2)]
    consts = [dv / e for dv, e in zip(dist, (0.4, 0.2))]
    assert consts[1] == pytest.approx(consts[0], rel=0.5)


@pytest.mark.parametrize("family", ["gaussian", "bump", "carrillo_exponential"])
def test_pointwise_dominations(frozen, certifications, family):
    g, rho = frozen
    k = sample_kernel(make_kernel(family, 2), 0.5, g)
    C = certifications[family].C_best
    for i in range(2):
        for j in range(2):
            assert j1_domination(rho, k, i, j, C).passed
    assert j2_bound_check(rho, k, C).passed


def test_j2_zero_density(frozen, certifications):
    g, _ = frozen
    k = sample_kernel(make_kernel("gaussian", 2), 0.2, g)
    rep = j2_bound_check(np.zeros(g.shape), k, certifications["gaussian"].C_best)
    assert rep.lhs_norm == 0 and rep.rhs_norm == 0 and rep.passed


def test_domination_fails_with_too_small_constant(frozen, certifications):
    g, rho = frozen
    k = sample_kernel(make_kernel("gaussian", 2), 0.2, g)
    assert not j1_domination(rho, k, 0, 0, 0.01 * certifications["gaussian"].C_best).passed


# --- truncation and the d = 2 decomposition ---

@given(st.floats(0.05, 1.0))
def test_truncation_level_matches_lambert_oracle(eps):
    lv = choose_truncation_level(eps)
    assert lv.residual <= 1e-10
    assert lv.M == pytest.approx(truncation_oracle(eps), rel=1e-12)


def test_truncation_reference_values():
    assert choose_truncation_level(1.0).M == pytest.approx(1.5315843936664952, rel=1e-12)
    assert choose_truncation_level(0.5).M == pytest.approx(3.5526522512143712, rel=1e-12)


@pytest.mark.parametrize("eps", [0.0, -0.1, 1.5])
def test_truncation_domain(eps):
    with pytest.raises(ValueError):
        choose_truncation_level(eps)


def test_decomposition_identity_exact(frozen):
    g, rho = frozen
    x = g.centered_coords
    spiky = rho + 30 * np.exp(-((x[0] - 0.3) ** 2 + x[1] ** 2) / (2 * 0.3**2))
    rep = d2_decomposition_test(spiky, TestFunctionSpec(radius=1.5), sample_kernel(make_kernel("gaussian", 2), 0.2, g))
    assert rep.identity_error <= 1e-13
    assert rep.I3B > 0


def test_decomposition_no_truncated_mass(frozen):
    g, rho = frozen
    assert rho.max() < choose_truncation_level(0.2).M
    rep = d2_decomposition_test(rho, TestFunctionSpec(radius=1.5), sample_kernel(make_kernel("gaussian", 2), 0.2, g))
    assert rep.I3A == 0.0 and rep.I3B == 0.0


def test_decomposition_requires_two_dimensions():
    g = make_grid(1, 64, 8.0)
    with pytest.raises(ValueError):
        d2_decomposition_test(np.ones(g.shape), TestFunctionSpec(),
                              sample_kernel(make_kernel("gaussian", 1), 0.5, g))


# --- weak form, probes and sweeps ---

def test_weak_form_constant_state_is_exact():
    g = make_grid(2, 32, 8.0)
    snaps = [np.full(g.shape, 1.3)] * 3
    assert weak_form_residual(g, [0.0, 0.1, 0.2], snaps, TestFunctionSpec(radius=1.0)).residual == pytest.approx(
        0.0, abs=1e-14)


def test_weak_form_of_local_run_is_small():
    g = make_grid(1, 128, 8.0)
    s = init_state(InitialDataSpec(sigma=0.5), g, params=SchemeParams(dt=1e-4, stabilize=True))
    _, tr = run(s, 0.02, cadence=0.001)
    w = weak_form_residual(g, tr.times, tr.snapshots, TestFunctionSpec(radius=1.5, T=0.02))
    assert abs(w.normalized) <= 1e-2
    with pytest.raises(ValueError):
        weak_form_residual(g, tr.times, tr.snapshots, TestFunctionSpec(radius=1.5, T=0.01))


def test_uniform_integrability_probe():
    g = make_grid(1, 16, 4.0)
    low = [np.full(g.shape, 2.0)] * 2
    assert uniform_integrability_probe(g, [0, 1], low, 0.25) == 0.0
    high = [np.full(g.shape, 5.0)] * 2
    assert uniform_integrability_probe(g, [0, 1], high, 0.25) == pytest.approx(math.sqrt(25 * 4.0))


def test_fit_slope_power_law():
    eps = [0.4, 0.2, 0.1]
    assert fit_slope(eps, [3 * e**1.5 for e in eps]) == pytest.approx(1.5)
    assert fit_slope([0.1], [1.0]) is None


def test_small_sweep_decreases():
    g = make_grid(1, 128, 8.0)
    cfg = SweepConfig(g, make_kernel("gaussian", 1), InitialDataSpec(sigma=0.5), T=0.005, cadence=0.001, dt_max=1e-4)
    rep = epsilon_sweep(cfg, [0.4, 0.2])
    assert rep.strictly_decreasing() and rep.slope > 1.0
    assert len(rep.rows()) == 2
    with pytest.raises(ValueError):
        epsilon_sweep(cfg, [0.2, 0.4])
