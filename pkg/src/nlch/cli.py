"""Command-line entry point.

Exit codes: 0 all hard monitors pass, 1 a monitor failed, 2 configuration
error, 3 numerical abort. ``summary.json`` is deterministic for a fixed
config; wall-clock times go to ``timing.json``.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .config import SCHEMA_VERSION, ConfigError, RunConfig, load_config
from .diagnostics import (cauchy_schwarz_ok, diagnostics_csv, energy_dissipation_residual,
                          entropy_dissipation_residual, estimate_dashboard, moment_identity_residual, record)
from .grid import make_grid, write_snapshot
from .kernels import FAMILIES, KernelError, certify_assumption, lattice_moments, make_kernel, sample_kernel
from .limit_lab import (SweepConfig, TestFunctionSpec, choose_truncation_level, commutator_error,
                        d2_decomposition_test, epsilon_sweep, halving_ratios, j1_domination, j2_bound_check)
from .particles import InteractionKernel, compare_to_pde, sample_particles, simulate_particles
from .solver import InitialDataSpec, SchemeParams, SolverError, init_state, initial_density, run
from .system import build_coupling, init_system, run_system, species_records, system_energy, system_entropy

EXIT_OK, EXIT_FAIL, EXIT_CONFIG, EXIT_ABORT = 0, 1, 2, 3
THREADS_ENV = "NLCH_THREADS"

log = logging.getLogger("nlch")


# --- helpers ------------------------------------------------------------------

def _json(obj) -> str:
    def default(o):
        if isinstance(o, np.generic):
            return o.item()
        if isinstance(o, np.ndarray):
            return o.tolist()
        raise TypeError(f"not serializable: {type(o)}")

    return json.dumps(obj, indent=2, sort_keys=True, default=default, allow_nan=True) + "\n"


def _monitor(value, tol, ok=None) -> dict:
    passed = bool(value <= tol) if ok is None else bool(ok)
    return {"value": float(value), "tolerance": float(tol), "pass": passed}


class Outputs:
    def __init__(self, cfg: RunConfig, override: str | None = None):
        self.dir = Path(override or cfg["output"]["dir"])
        self.dir.mkdir(parents=True, exist_ok=True)
        (self.dir / "config.toml").write_text(cfg.to_toml())
        self.cfg = cfg
        self.t0 = time.perf_counter()

    def write(self, name: str, text: str) -> Path:
        p = self.dir / name
        p.write_text(text)
        return p

    def finish(self, monitors: dict, extra: dict, status: str = "complete") -> int:
        failing = sorted(k for k, m in monitors.items() if m.get("hard", True) and not m["pass"])
        summary = {"schema_version": SCHEMA_VERSION, "version": __version__, "command": self.cfg.command,
                   "config_hash": self.cfg.digest, "status": status, "monitors": monitors,
                   "failing": failing, **extra}
        self.write("summary.json", _json(summary))
        self.write("timing.json", _json({"wall_clock_seconds": time.perf_counter() - self.t0}))
        for name in failing:
            log.error("monitor failed: %s %s", name, monitors[name])
        return EXIT_FAIL if failing else EXIT_OK

    def abort(self, exc: Exception, extra: dict | None = None) -> int:
        summary = {"schema_version": SCHEMA_VERSION, "version": __version__, "command": self.cfg.command,
                   "config_hash": self.cfg.digest, "status": "aborted", "error": str(exc), **(extra or {})}
        self.write("summary.json", _json(summary))
        self.write("timing.json", _json({"wall_clock_seconds": time.perf_counter() - self.t0}))
        log.error("numerical abort: %s", exc)
        return EXIT_ABORT


def _initial_spec(d: dict) -> InitialDataSpec:
    return InitialDataSpec(family=d["family"], sigma=d["sigma"], mass=d["mass"],
                           center=tuple(d["center"]) if d["center"] is not None else None,
                           separation=d["separation"], sigma2=d["sigma2"], mass2=d["mass2"], c=d["c"],
                           amp=d["amp"], seed=d["seed"], modes=d["modes"], path=d["path"])


def _params(s: dict, dt_max=None) -> SchemeParams:
    return SchemeParams(dt=s["dt"], dt_max=s["dt_max"] if dt_max is None else dt_max, safety=s["safety"],
                        stabilize=s["stabilize"])


# --- subcommands ----------------------------------------------------------------

def cmd_run(cfg: RunConfig, out_dir=None) -> int:
    out = Outputs(cfg, out_dir)
    g, k, s, tol = cfg["grid"], cfg["kernel"], cfg["solver"], cfg["tolerances"]
    grid = make_grid(g["d"], g["n"], g["L"])
    eps = k["epsilon"]
    spec = make_kernel(k["family"], g["d"], k["f_family"])
    kernel = sample_kernel(spec, eps, grid) if eps > 0 else None
    ini = _initial_spec(cfg["initial"])
    state = init_state(ini, grid, eps, kernel, _params(s))
    worst_neg = [0.0]

    def watch(st, rec):
        worst_neg[0] = min(worst_neg[0], rec.rho_min / rec.rho_max)

    try:
        final, traj = run(state, s["T"], observers=[watch], cadence=s["cadence"], recorder=record)
    except SolverError as exc:
        return out.abort(exc)
    out.write("diagnostics.csv", diagnostics_csv(traj.records))
    if cfg["output"]["snapshots"]:
        snap = out.dir / "snapshots"
        snap.mkdir(exist_ok=True)
        for i, (t, rho) in enumerate(zip(traj.times, traj.snapshots)):
            write_snapshot(snap / f"snap_{i:05d}.bin", grid, rho, t, eps)
    recs = traj.records
    m0 = recs[0].mass
    drift = max(abs(r.mass - m0) for r in recs) / m0
    res_tol = tol["residual"]
    e_rep = energy_dissipation_residual(recs, tol=res_tol)
    p_rep = entropy_dissipation_residual(recs, tol=res_tol)
    monitors = {
        "mass_drift": _monitor(drift, tol["mass_drift"]),
        "positivity": _monitor(-worst_neg[0], tol["positivity"]),
        "energy_monotone": {"value": e_rep.max_increase, "tolerance": tol["monotone_factor"] * res_tol * e_rep.scale,
                            "pass": e_rep.max_increase <= tol["monotone_factor"] * res_tol * e_rep.scale},
        "entropy_monotone": {"value": p_rep.max_increase,
                             "tolerance": tol["monotone_factor"] * res_tol * p_rep.scale,
                             "pass": p_rep.max_increase <= tol["monotone_factor"] * res_tol * p_rep.scale},
        "cauchy_schwarz": {"value": 0.0, "tolerance": 0.0, "pass": all(cauchy_schwarz_ok(r) for r in recs)},
    }
    # the stabilized local scheme does not satisfy the discrete energy law
    exact_law = kernel is not None or not s["stabilize"]
    monitors["energy_residual"] = {**_monitor(abs(e_rep.normalized), res_tol), "hard": exact_law}
    monitors["entropy_residual"] = {**_monitor(abs(p_rep.normalized), res_tol), "hard": exact_law}
    reports = [e_rep.to_dict(), p_rep.to_dict()]
    if ini.localized:
        m_rep = moment_identity_residual(recs, tol=res_tol, grid=grid, snapshots=traj.snapshots)
        monitors["moment_residual"] = {**_monitor(abs(m_rep.normalized), res_tol), "hard": False}
        reports.append(m_rep.to_dict())
    out.write("residuals.json", _json(reports))
    final_rec = recs[-1]
    extra = {"seeds": {"initial": ini.seed}, "steps": final.step, "final": final_rec.__dict__,
             "residuals": reports, "dashboard": estimate_dashboard(recs)}
    return out.finish(monitors, extra)


def cmd_sweep(cfg: RunConfig, out_dir=None) -> int:
    out = Outputs(cfg, out_dir)
    g, k, s, sw, tol = cfg["grid"], cfg["kernel"], cfg["solver"], cfg["sweep"], cfg["tolerances"]
    grid = make_grid(g["d"], g["n"], g["L"])
    cad = s["cadence"] if s["cadence"] is not None else s["T"] / 10
    scfg = SweepConfig(grid, make_kernel(k["family"], g["d"], k["f_family"]), _initial_spec(cfg["initial"]),
                       T=s["T"], cadence=cad, dt=s["dt"], dt_max=sw["dt_max"], stabilize_local=s["stabilize"])
    try:
        rep = epsilon_sweep(scfg, sw["epsilons"])
    except SolverError as exc:
        return out.abort(exc)
    buf = [["epsilon", "sup_t_L1", "L1_t_L1", "L2_t_L1", "slope_so_far"]]
    buf += [[repr(float(v)) if v is not None else "" for v in row] for row in rep.rows()]
    out.write("sweep.csv", "".join(",".join(r) + "\n" for r in buf))
    monitors = {"strictly_decreasing": {"value": 0.0, "tolerance": 0.0, "pass": rep.strictly_decreasing()}}
    if rep.slope is not None:
        monitors["slope"] = {"value": rep.slope, "tolerance": tol["sweep_slope_floor"],
                             "pass": rep.slope >= tol["sweep_slope_floor"]}
    d = rep.to_dict()
    d.pop("runtime")
    for e in d["entries"]:
        e.pop("runtime")
    return out.finish(monitors, {"sweep": d, "seeds": {"initial": cfg["initial"]["seed"]}})


def cmd_system(cfg: RunConfig, out_dir=None) -> int:
    out = Outputs(cfg, out_dir)
    g, k, s, sc, tol = cfg["grid"], cfg["kernel"], cfg["solver"], cfg["system"], cfg["tolerances"]
    grid = make_grid(g["d"], g["n"], g["L"])
    N = len(sc["A"])
    fams = sc["kernels"] or [k["family"]] * N
    specs = [make_kernel(f, g["d"]) for f in fams]
    coupling = build_coupling(np.array(sc["A"], dtype=float), specs, k["epsilon"], grid)
    dens = [initial_density(_initial_spec(sp), grid) for sp in sc["species"]]
    state = init_system(grid, dens, coupling, k["epsilon"], _params(s), sign=sc["sign"])

    def rec(st):
        return (st.t, system_energy(st), system_entropy(st), [float(r.sum() * grid.cell_volume) for r in st.rho],
                float(min(r.min() / r.max() for r in st.rho)), species_records(st))

    try:
        final, recs = run_system(state, s["T"], recorder=rec)
    except SolverError as exc:
        return out.abort(exc)
    lines = ["t,energy,entropy," + ",".join(f"mass_{i}" for i in range(N)) + "\n"]
    for t, E, P, masses, _, _ in recs:
        lines.append(",".join(repr(float(v)) for v in [t, E, P, *masses]) + "\n")
    out.write("system.csv", "".join(lines))
    for i in range(N):
        out.write(f"diagnostics_species{i}.csv", diagnostics_csv([r[5][i] for r in recs]))
    E = np.array([r[1] for r in recs])
    P = np.array([r[2] for r in recs])
    m = np.array([r[3] for r in recs])
    drift = float(np.max(np.abs(m - m[0]) / m[0]))
    scaleE = abs(E[0]) + 1e-300
    scaleP = abs(P[0]) + 1e-300
    slack = tol["monotone_factor"] * tol["residual"]
    monitors = {
        "mass_drift": _monitor(drift, tol["mass_drift"]),
        "positivity": _monitor(-min(0.0, min(r[4] for r in recs)), tol["positivity"]),
        "energy_monotone": _monitor(max(0.0, float(np.max(np.diff(E), initial=0.0))) / scaleE, slack),
        "entropy_monotone": _monitor(max(0.0, float(np.max(np.diff(P), initial=0.0))) / scaleP, slack),
    }
    extra = {"steps": final.step, "final_energy": float(E[-1]), "final_entropy": float(P[-1]),
             "seeds": {f"species{i}": sp["seed"] for i, sp in enumerate(sc["species"])}}
    return out.finish(monitors, extra)


def cmd_particles(cfg: RunConfig, out_dir=None) -> int:
    out = Outputs(cfg, out_dir)
    p, tol = cfg["particles"], cfg["tolerances"]
    W = InteractionKernel(p["W_family"], p["W_scale"], p["d"])
    st = sample_particles(p["N"], p["d"], p["sigma0"], p["seed"], W)
    com0 = st.center_of_mass()
    try:
        final, traj = simulate_particles(st, p["T"], p["dt"], snapshot_every=p["snapshot_every"])
    except (RuntimeError, ValueError) as exc:
        return out.abort(exc)
    rows = ["snapshot,time,particle," + ",".join(f"x{a}" for a in range(p["d"])) + "\n"]
    for k, (t, X) in enumerate(zip(traj.times, traj.positions)):
        for i, x in enumerate(X):
            rows.append(f"{k},{t!r},{i}," + ",".join(repr(float(v)) for v in x) + "\n")
    out.write("positions.csv", "".join(rows))
    grid = make_grid(p["d"], p["grid_n"], p["grid_L"])
    cmp_ = compare_to_pde(traj, W, grid, p["sigma0"])
    out.write("distances.csv", "time,L1_distance\n" + "".join(f"{t!r},{d!r}\n" for t, d in cmp_.rows()))
    drift = float(np.max(np.abs(final.center_of_mass() - com0)))
    monitors = {"center_of_mass": _monitor(drift, tol["center_of_mass"])}
    return out.finish(monitors, {"seeds": {"particles": p["seed"]}, "bandwidth": cmp_.bandwidth,
                                 "distances": cmp_.rows()})


def cmd_kernel_check(args) -> int:
    spec = make_kernel(args.family, args.d, args.f_family)
    rep = certify_assumption(spec, R_max=args.r_max)
    report = rep.to_dict()
    resolution = 32.0 if args.d < 3 else 8.0
    mom = lattice_moments(spec, resolution)
    report["moment_identity"] = mom.tolist()
    report["moment_identity_resolution"] = resolution
    report["moment_identity_error"] = float(np.abs(mom + np.eye(args.d)).max())
    print(_json(report), end="")
    ok = rep.pass_ and rep.decay_pass and report["moment_identity_error"] <= 1e-3
    return EXIT_OK if ok else EXIT_FAIL


def _frozen_setup(args):
    grid = make_grid(2, args.n, args.L)
    spec = make_kernel(args.family, 2)
    rho = initial_density(InitialDataSpec(sigma=args.sigma), grid)
    return grid, spec, rho, TestFunctionSpec(radius=args.phi_radius)


def cmd_commutator(args) -> int:
    grid, spec, rho, phi = _frozen_setup(args)
    rows, comm, j2 = [], [], []
    ok = True
    for eps in args.epsilons:
        k = sample_kernel(spec, eps, grid)
        c = commutator_error(rho, phi, k)
        d1 = [j1_domination(rho, k, i, j) for i in range(2) for j in range(2)]
        q = j2_bound_check(rho, k)
        ok &= all(r.passed for r in d1) and q.passed
        comm.append(c)
        j2.append(q.lhs_norm)
        rows.append({"epsilon": eps, "commutator_l2": c, "j1_l1_to_limit": d1[0].limit_distance,
                     "j1_dominated": all(r.passed for r in d1), "j2_lhs_l2": q.lhs_norm, "j2_rhs_l2": q.rhs_norm,
                     "j2_dominated": q.passed})
    ratios = {"commutator": halving_ratios(comm), "j2": halving_ratios(j2)}
    ok &= all(r >= args.ratio_floor for v in ratios.values() for r in v)
    print(_json({"rows": rows, "halving_ratios": ratios, "pass": bool(ok)}), end="")
    return EXIT_OK if ok else EXIT_FAIL


def cmd_decomposition_d2(args) -> int:
    grid, spec, rho, phi = _frozen_setup(args)
    x = grid.centered_coords
    rho = rho + args.spike_height * np.exp(-((x[0] - 0.3) ** 2 + x[1] ** 2) / (2 * args.spike_width**2))
    rows = [d2_decomposition_test(rho, phi, sample_kernel(spec, e, grid)).to_dict() for e in args.epsilons]
    w = csv.writer(sys.stdout, lineterminator="\n")
    keys = ["eps", "M", "I1A", "I1B", "I2A", "I2B", "I3A", "I3B", "identity_error", "remainder_norm",
            "bound_value", "ratio"]
    w.writerow(keys)
    for r in rows:
        w.writerow([repr(float(r[k])) for k in keys])
    return EXIT_OK


def cmd_truncation(args) -> int:
    lv = choose_truncation_level(args.epsilon)
    print(f"epsilon={lv.eps!r} M={lv.M!r} residual={lv.residual:.3e}")
    return EXIT_OK


# --- parser --------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="nlch", description="Nonlocal Cahn-Hilliard solver and limit laboratory")
    ap.add_argument("--version", action="version", version=__version__)
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)
    for name in ("run", "sweep", "system-run", "particles"):
        p = sub.add_parser(name)
        p.add_argument("config", help="TOML configuration file")
        p.add_argument("--out", help="output directory (overrides [output].dir)")
    p = sub.add_parser("kernel-check")
    p.add_argument("--family", choices=FAMILIES, required=True)
    p.add_argument("--f-family", choices=FAMILIES)
    p.add_argument("--d", type=int, choices=(1, 2, 3), default=2)
    p.add_argument("--r-max", type=float, default=8.0)
    for name in ("commutator-test", "appendix-d2"):
        p = sub.add_parser(name)
        p.add_argument("--family", choices=FAMILIES, default="gaussian")
        p.add_argument("--n", type=int, default=256)
        p.add_argument("--L", type=float, default=8.0)
        # the J2 kernel has width ~2 eps; sigma=0.5 is still pre-asymptotic at eps=0.2
        p.add_argument("--sigma", type=float, default=1.0 if name == "commutator-test" else 0.5)
        p.add_argument("--phi-radius", type=float, default=1.5)
    sub.choices["commutator-test"].add_argument("--epsilons", type=float, nargs="+", default=[0.2, 0.1, 0.05])
    sub.choices["commutator-test"].add_argument("--ratio-floor", type=float, default=1.8)
    sub.choices["appendix-d2"].add_argument("--epsilons", type=float, nargs="+", default=[0.4, 0.2, 0.1])
    sub.choices["appendix-d2"].add_argument("--spike-height", type=float, default=6.0)
    sub.choices["appendix-d2"].add_argument("--spike-width", type=float, default=0.3)
    p = sub.add_parser("truncation-level")
    p.add_argument("--epsilon", type=float, required=True)
    return ap


CONFIG_COMMANDS = {"run": cmd_run, "sweep": cmd_sweep, "system-run": cmd_system, "particles": cmd_particles}
ARG_COMMANDS = {"kernel-check": cmd_kernel_check, "commutator-test": cmd_commutator,
                "appendix-d2": cmd_decomposition_d2, "truncation-level": cmd_truncation}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    threads = os.environ.get(THREADS_ENV)
    if threads:
        import numba

        numba.set_num_threads(int(threads))
    try:
        if args.command in CONFIG_COMMANDS:
            cfg = load_config(args.config, args.command)
            return CONFIG_COMMANDS[args.command](cfg, args.out)
        return ARG_COMMANDS[args.command](args)
    except ConfigError as exc:
        print(str(exc), file=sys.stderr)
        return EXIT_CONFIG
    except (KernelError, ValueError, OSError) as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except SolverError as exc:
        print(f"numerical abort: {exc}", file=sys.stderr)
        return EXIT_ABORT


if __name__ == "__main__":
    sys.exit(main())
