"""Acceptance criteria, each at its stated tolerance and runtime budget.

Every test prints one ``PASS``/``FAIL`` line (also collected into the
terminal summary) before asserting.
"""
import math
import time

import numpy as np
import pytest
from scipy.integrate import solve_ivp
from scipy.special import lambertw

from conftest import ACCEPTANCE_LINES
from nlch.cli import main
from nlch.diagnostics import energy_dissipation_residual, entropy_dissipation_residual, record, refinement_ratio
from nlch.grid import make_grid
from nlch.kernels import (FAMILIES, certify_assumption, lattice_moments, make_kernel, sample_kernel,
                          self_convolution)
from nlch.limit_lab import (SweepConfig, TestFunctionSpec, choose_truncation_level, commutator_error,
                            d2_decomposition_test, epsilon_sweep, halving_ratios, j1_domination, j2_bound_check)
from nlch.particles import (InteractionKernel, ParticleState, compare_to_pde, sample_particles, simulate_particles)
from nlch.solver import InitialDataSpec, SchemeParams, SolverState, init_state, initial_density, run, step_nonlocal
from nlch.system import (build_coupling, init_system, run_system, sandwich_identity, step_system, system_energy,
                         system_entropy)


def verdict(number, title, ok, detail, elapsed, budget):
    ok = bool(ok) and elapsed <= budget
    line = f"{'PASS' if ok else 'FAIL'} criterion {number} ({title}): {detail}; runtime {elapsed:.1f}s <= {budget:g}s"
    print(line)
    ACCEPTANCE_LINES.append(line)
    assert ok, line


def blob_run(dt_max):
    g = make_grid(2, 128, 8.0)
    k = sample_kernel(make_kernel("gaussian", 2), 0.2, g)
    s = init_state(InitialDataSpec(sigma=0.5), g, 0.2, k, SchemeParams(dt_max=dt_max))
    worst = [0.0]

    def watch(st, rec):
        worst[0] = min(worst[0], st.rho.min() / st.rho.max())

    _, traj = run(s, 0.05, observers=[watch], recorder=record)
    return g, traj, worst[0]


def test_criterion_1_conservation_and_positivity():
    t0 = time.perf_counter()
    g, traj, worst = blob_run(1e-3)
    m = np.array([r.mass for r in traj.records])
    drift = float(np.max(np.abs(m - m[0])) / m[0])
    ok = drift <= 1e-12 and worst >= -1e-12
    verdict(1, "conservation and positivity", ok, f"mass drift {drift:.2e} <= 1e-12, min rho/max rho {worst:.2e} "
            f">= -1e-12 over {traj.steps[-1]} steps", time.perf_counter() - t0, 120)


def test_criterion_2_dissipation_structure():
    t0 = time.perf_counter()
    _, coarse, _ = blob_run(1e-3)
    _, fine, _ = blob_run(5e-4)
    parts, ok = [], True
    for name, fn in (("energy", energy_dissipation_residual), ("entropy", entropy_dissipation_residual)):
        a, b = fn(coarse.records), fn(fine.records)
        ratio = refinement_ratio(a, b)
        ok &= abs(a.normalized) <= 1e-2 and abs(b.normalized) <= 1e-2 and 1.5 <= ratio <= 3.0
        ok &= a.monotone and b.monotone
        parts.append(f"{name} residual {abs(a.normalized):.2e}/{abs(b.normalized):.2e} ratio {ratio:.2f} "
                     f"max rise {max(a.max_increase, b.max_increase):.1e}")
    verdict(2, "dissipation structure", ok, "; ".join(parts), time.perf_counter() - t0, 300)


def test_criterion_3_kernel_certification():
    t0 = time.perf_counter()
    parts, ok = [], True
    for fam in FAMILIES:
        spec = make_kernel(fam, 2)
        rep = certify_assumption(spec)
        mom = lattice_moments(spec, 32)  # h = eps/32 <= eps/8
        merr = float(np.max(np.abs(mom + np.eye(2))))
        ok &= rep.pass_ and math.isfinite(rep.C_best) and rep.agreement <= 0.05 and rep.decay_pass and merr <= 1e-3
        parts.append(f"{fam} C={rep.C_best:.4g} (resolutions agree {rep.agreement:.1e}) decay "
                     f"{'ok' if rep.decay_pass else 'bad'} moment err {merr:.1e}")
    g = make_grid(2, 128, 16.0)  # h = 1/8 at eps = 1
    sc = self_convolution(make_kernel("gaussian", 2), 1.0, g)
    r2 = sum(z**2 for z in g.origin_coords)
    serr = float(np.max(np.abs(sc.samples - np.exp(-r2 / 4) / (4 * math.pi))))
    ok &= serr <= 1e-4
    parts.append(f"gaussian self-convolution err {serr:.1e} <= 1e-4")
    verdict(3, "kernel certification", ok, "; ".join(parts), time.perf_counter() - t0, 60)


@pytest.mark.slow
def test_criterion_4_epsilon_limit():
    t0 = time.perf_counter()
    g = make_grid(2, 256, 8.0)
    cfg = SweepConfig(g, make_kernel("gaussian", 2), InitialDataSpec(sigma=0.5), T=0.05, cadence=0.005,
                      dt_max=1e-4)
    rep = epsilon_sweep(cfg, [0.4, 0.2, 0.1, 0.05])
    ok = rep.strictly_decreasing() and rep.slope >= 1.0
    dists = ", ".join(f"{e:g}:{d:.3e}" for e, d in zip(rep.eps, rep.sup_l1))
    verdict(4, "epsilon limit", ok, f"sup_t L1 {dists}; slope {rep.slope:.2f} >= 1.0",
            time.perf_counter() - t0, 1800)


def test_criterion_5_frozen_field_mechanism(certifications):
    t0 = time.perf_counter()
    g = make_grid(2, 256, 8.0)
    rho = initial_density(InitialDataSpec(sigma=1.0), g)
    phi = TestFunctionSpec(radius=1.5)
    spec = make_kernel("gaussian", 2)
    C = certifications["gaussian"].C_best
    comm, j1, j2, dominated = [], [], [], True
    for eps in (0.2, 0.1, 0.05):
        k = sample_kernel(spec, eps, g)
        comm.append(commutator_error(rho, phi, k))
        reps = [j1_domination(rho, k, i, j, C) for i in range(2) for j in range(2)]
        q = j2_bound_check(rho, k, C)
        dominated &= all(r.passed for r in reps) and q.passed
        j1.append(reps[0].limit_distance)
        j2.append(q.lhs_norm)
    ratios = {"commutator": halving_ratios(comm), "j1": halving_ratios(j1), "j2": halving_ratios(j2)}
    ok = dominated and all(r >= 1.8 for v in ratios.values() for r in v)
    text = "; ".join(f"{k} ratios " + "/".join(f"{r:.2f}" for r in v) for k, v in ratios.items())
    verdict(5, "frozen-field mechanism", ok, f"{text} (floor 1.8); dominations {'hold' if dominated else 'fail'}",
            time.perf_counter() - t0, 180)


def test_criterion_6_system():
    t0 = time.perf_counter()
    g = make_grid(2, 32, 8.0)
    worst = 0.0
    for seed in range(20):
        rng = np.random.default_rng(seed)
        N = 2 + seed % 2
        A = rng.normal(size=(N, N)) + 3 * np.eye(N)
        c = build_coupling(A, [make_kernel(f, 2) for f in FAMILIES[:N]], 1.0, g)
        worst = max(worst, sandwich_identity(rng.normal(size=(N,) + g.shape), c).relative_error)

    g2 = make_grid(2, 64, 8.0)
    spec = make_kernel("gaussian", 2)
    k = sample_kernel(spec, 0.5, g2)
    rho = initial_density(InitialDataSpec(sigma=0.5), g2)
    scalar = SolverState(g2, rho.copy(), 0.0, 0.5, k)
    single = init_system(g2, [rho], build_coupling([[1.0]], k, 0.5, g2), 0.5)
    for _ in range(200):
        scalar = step_nonlocal(scalar)
        single = step_system(single)
    match = float(np.max(np.abs(single.rho[0] - scalar.rho)) / scalar.rho.max())

    a = initial_density(InitialDataSpec(sigma=0.5, center=(0.4, 0.0)), g2)
    b = initial_density(InitialDataSpec(sigma=0.4, center=(-0.4, 0.0)), g2)
    pair = init_system(g2, [a, b], build_coupling([[1.0, 0.5], [0.0, 1.0]], spec, 0.5, g2), 0.5)
    _, recs = run_system(pair, 0.05, recorder=lambda s: (system_energy(s), system_entropy(s)))
    E, P = np.array(recs).T
    riseE = float(np.max(np.diff(E), initial=0.0)) / abs(E[0])
    riseP = float(np.max(np.diff(P), initial=0.0)) / abs(P[0])
    slack = 10 * 1e-2
    ok = worst <= 1e-10 and match <= 1e-12 and riseE <= slack and riseP <= slack
    verdict(6, "system", ok, f"sandwich rel err {worst:.1e} <= 1e-10 over 20 sets; N=1 match {match:.1e} <= 1e-12; "
            f"relative rise E {riseE:.1e}, entropy {riseP:.1e} <= {slack:g}", time.perf_counter() - t0, 300)


def test_criterion_7_truncation_and_decomposition():
    t0 = time.perf_counter()
    lv1, lv05 = choose_truncation_level(1.0), choose_truncation_level(0.5)
    oracle = [math.exp(lambertw(2 * e**-4).real / 2) for e in (1.0, 0.5)]
    trunc_ok = (max(lv1.residual, lv05.residual) <= 1e-10 and abs(lv1.M - 1.5315) <= 1e-4
                and abs(lv05.M - 3.56) <= 0.01 * 3.56
                and all(abs(m - o) <= 1e-12 * o for m, o in zip((lv1.M, lv05.M), oracle)))
    g = make_grid(2, 256, 8.0)
    x = g.centered_coords
    rho = initial_density(InitialDataSpec(sigma=0.5), g) + 6 * np.exp(-((x[0] - 0.3) ** 2 + x[1] ** 2) / (2 * 0.3**2))
    phi = TestFunctionSpec(radius=1.5)
    reps = [d2_decomposition_test(rho, phi, sample_kernel(make_kernel("gaussian", 2), e, g)) for e in (0.4, 0.2, 0.1)]
    rem = [r.remainder_norm for r in reps]
    ratio = [r.ratio for r in reps]
    ident = max(r.identity_error for r in reps)
    ok = trunc_ok and ident <= 1e-13 and rem[0] > rem[1] > rem[2] and max(ratio) / min(ratio) <= 10
    verdict(7, "truncation and decomposition", ok,
            f"M(1)={lv1.M:.6f} M(0.5)={lv05.M:.6f} residual {max(lv1.residual, lv05.residual):.1e}; identity err "
            f"{ident:.1e}; remainders " + "/".join(f"{v:.3g}" for v in rem)
            + "; remainder/bound " + "/".join(f"{v:.3g}" for v in ratio), time.perf_counter() - t0, 180)


@pytest.mark.slow
def test_criterion_8_particles():
    t0 = time.perf_counter()
    W = InteractionKernel("gaussian", 0.5, 1)
    pair, _ = simulate_particles(ParticleState([[0.1], [-0.1]], 0.0, W), 1.0, 0.01)

    def rhs(_, s):
        return [W.normalization * s[0] / W.scale**2 * math.exp(-0.5 * (s[0] / W.scale) ** 2)]

    sep_err = abs(pair.positions[0, 0] - pair.positions[1, 0] - solve_ivp(rhs, (0, 1), [0.2], rtol=1e-13,
                                                                           atol=1e-14).y[0, -1])
    grid = make_grid(1, 256, 16.0)
    dist, com = {}, 0.0
    for N in (1000, 10000):
        s = sample_particles(N, 1, 1.0, 2024, W)
        final, traj = simulate_particles(s, 0.5, 0.03, snapshot_every=6)
        com = max(com, float(np.max(np.abs(final.center_of_mass() - s.center_of_mass()))))
        dist[N] = compare_to_pde(traj, W, grid, 1.0).distances[-1]
    ok = sep_err <= 1e-6 and com <= 1e-12 and dist[10000] < dist[1000]
    verdict(8, "particles", ok, f"separation err {sep_err:.1e} <= 1e-6; COM drift {com:.1e} <= 1e-12; "
            f"L1 distance N=1e3 {dist[1000]:.4f} > N=1e4 {dist[10000]:.4f}", time.perf_counter() - t0, 300)


def test_criterion_9_reproducibility(tmp_path):
    t0 = time.perf_counter()
    text = """
[grid]
d = 2
n = 128
L = 8.0
[kernel]
family = "gaussian"
epsilon = 0.2
[solver]
T = 0.05
dt_max = {dt_max}
[initial]
family = "{family}"
{extra}
"""
    same = []
    # perturbed-constant modes decay at rate ~100, hence the smaller step cap
    for family, extra, dt_max in (("gaussian-blob", "sigma = 0.5", 1e-3), ("perturbed-constant", "seed = 7", 2e-4)):
        cfg = tmp_path / f"{family}.toml"
        cfg.write_text(text.format(family=family, extra=extra, dt_max=dt_max))
        blobs = []
        for rep in ("a", "b"):
            out = tmp_path / f"{family}-{rep}"
            assert main(["run", str(cfg), "--out", str(out)]) == 0
            blobs.append(((out / "diagnostics.csv").read_bytes(), (out / "summary.json").read_bytes()))
        same.append(blobs[0] == blobs[1])
    verdict(9, "reproducibility", all(same), "diagnostics.csv and summary.json byte-identical for blob and seeded "
            "perturbed-constant runs", time.perf_counter() - t0, 300)
