"""Per-step observables, dissipation residuals and the a priori estimate dashboard.

Transport-related integrals (``weighted_vel_sq``, ``upwind_fisher``,
``moment_flux``) are face-based upwind quadratures: they are the terms the
stepper actually dissipates, so the discrete energy, entropy and moment
identities close up to the time-stepping error alone.
"""
from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass

import numpy as np

from .grid import Grid, forward, gradient
from .solver import SolverState, face_velocities, potential, seam_guard, upwind_fluxes

RHO_FLOOR = 1e-30
EXCLUDED_MASS_FLAG = 1e-8

CSV_COLUMNS = ("t", "mass", "moment2", "energy", "entropy", "fisher", "lap_moll_sq", "weighted_vel_sq",
               "grad_sqrt_sq", "grad_l1", "excluded_mass", "upwind_fisher", "moment_flux")


@dataclass
class DiagnosticsRecord:
    t: float
    mass: float
    second_moment: float
    energy: float
    entropy: float
    fisher: float
    lap_moll_sq: float
    weighted_velocity_sq: float
    grad_sqrt_sq: float
    gradient_l1: float
    excluded_mass: float
    upwind_fisher: float
    moment_flux: float
    entropy_abs: float = 0.0
    h1_moll_sq: float = 0.0
    h2_moll_sq: float = 0.0
    rho_min: float = 0.0
    rho_max: float = 0.0
    step: int = 0
    dt: float = 0.0

    @property
    def excluded_flag(self) -> bool:
        return self.excluded_mass > EXCLUDED_MASS_FLAG

    def row(self) -> list:
        return [self.t, self.mass, self.second_moment, self.energy, self.entropy, self.fisher, self.lap_moll_sq,
                self.weighted_velocity_sq, self.grad_sqrt_sq, self.gradient_l1, self.excluded_mass,
                self.upwind_fisher, self.moment_flux]


def _spectral_sum(grid: Grid, weight, uhat) -> float:
    """(1/L^d) sum_k weight(k) |uhat(k)|^2 over the full spectrum (rfft layout)."""
    w = np.full(grid.spectral_shape[-1], 2.0)
    w[0] = 1.0
    w[-1] = 1.0
    return float(np.sum(weight * np.abs(uhat) ** 2 * w) / grid.volume)


def record(state: SolverState) -> DiagnosticsRecord:
    return record_density(state.grid, state.rho, state.multiplier, state.kernel.hat if state.kernel else 1.0,
                          t=state.t, step=state.step, dt=state.dt_last)


def record_density(grid: Grid, rho: np.ndarray, multiplier, kernel_hat, t: float = 0.0, step: int = 0,
                   dt: float = 0.0, mu: np.ndarray | None = None) -> DiagnosticsRecord:
    """All observables of a density; ``multiplier`` is the double-mollification symbol.

    ``mu`` overrides the potential (systems pass their coupled potential).
    """
    hd = grid.cell_volume
    rho_hat = forward(grid, rho)
    ksq = grid.k_squared
    lam = grid.fd_laplacian_symbol
    mult = np.broadcast_to(multiplier, grid.spectral_shape)
    khat = np.broadcast_to(kernel_hat, grid.spectral_shape)

    mass = float(rho.sum() * hd)
    r2 = sum(x**2 for x in grid.centered_coords)
    moment2 = float(np.sum(r2 * rho) * hd)

    energy = 0.5 * _spectral_sum(grid, ksq * khat**2, rho_hat)
    lap_moll_sq = _spectral_sum(grid, lam * ksq * mult, rho_hat)
    h1 = _spectral_sum(grid, (1 + ksq) * khat**2, rho_hat)
    h2 = _spectral_sum(grid, ksq**2 * khat**2, rho_hat)

    rmax = float(rho.max())
    floor = RHO_FLOOR * rmax
    pos = rho > floor
    excluded = float(np.sum(np.where(pos, 0.0, np.abs(rho))) * hd)
    safe = np.where(pos, rho, 1.0)
    logr = np.log(safe)
    entropy = float(np.sum(np.where(pos, rho * logr, 0.0)) * hd)
    entropy_abs = float(np.sum(np.where(pos, rho * np.abs(logr), 0.0)) * hd)

    if mu is None:
        mu = potential(grid, rho_hat, multiplier)
    vf = face_velocities(grid, mu)
    fluxes = upwind_fluxes(rho, vf)
    fisher = 0.0
    upwind_fisher = 0.0
    weighted = 0.0
    moment_flux = 0.0
    for a in range(grid.d):
        nb = np.roll(rho, -1, axis=a)
        ok = pos & (nb > floor)
        dr = (nb - rho) / grid.h
        dlog = (np.log(np.where(ok, nb, 1.0)) - np.log(np.where(ok, safe, 1.0))) / grid.h
        fisher += float(np.sum(np.where(ok, dr * dlog, 0.0)) * hd)
        v = vf[a]
        rup = np.where(v > 0, rho, nb)
        upwind_fisher += float(np.sum(np.where(ok, v * (dr - rup * dlog), 0.0)) * hd)
        weighted += float(np.sum(fluxes[a] * v) * hd)
        x = grid.centered_coords[a]
        xn = np.roll(np.broadcast_to(x, grid.shape), -1, axis=a)
        moment_flux += float(np.sum(fluxes[a] * (xn**2 - x**2) / grid.h) * hd)

    grads = gradient(grid, rho)
    gnorm = np.sqrt(sum(gc**2 for gc in grads))
    grad_l1 = float(gnorm.sum() * hd)
    grad_sqrt_sq = float(0.25 * np.sum(np.where(pos, gnorm**2 / safe, 0.0)) * hd)

    return DiagnosticsRecord(t=float(t), mass=mass, second_moment=moment2, energy=energy, entropy=entropy,
                             fisher=fisher, lap_moll_sq=lap_moll_sq, weighted_velocity_sq=weighted,
                             grad_sqrt_sq=grad_sqrt_sq, gradient_l1=grad_l1, excluded_mass=excluded,
                             upwind_fisher=upwind_fisher, moment_flux=moment_flux, entropy_abs=entropy_abs,
                             h1_moll_sq=h1, h2_moll_sq=h2, rho_min=float(rho.min()), rho_max=rmax,
                             step=int(step), dt=float(dt))


# --- residuals ------------------------------------------------------------

@dataclass
class ResidualReport:
    name: str
    residual: float
    normalized: float
    scale: float
    t_start: float
    t_end: float
    tolerance: float
    passed: bool
    monotone: bool = True
    max_increase: float = 0.0
    flags: list | None = None

    def to_dict(self) -> dict:
        return asdict(self)


def _window(records, window):
    if not records:
        raise ValueError("trajectory has no records")
    t = np.array([r.t for r in records])
    if window is None:
        lo, hi = t[0], t[-1]
    else:
        lo, hi = window
        if lo < t[0] - 1e-12 or hi > t[-1] + 1e-12 or hi < lo:
            raise ValueError(f"window {window} outside trajectory [{t[0]}, {t[-1]}]")
    sel = (t >= lo - 1e-12) & (t <= hi + 1e-12)
    return [r for r, s in zip(records, sel) if s]


def _trapz(t, y):
    if len(t) < 2:
        return 0.0
    return float(np.trapezoid(y, t))


def _monotone(values, tol):
    inc = np.diff(np.asarray(values, dtype=float))
    worst = float(inc.max()) if inc.size else 0.0
    return worst <= tol, max(worst, 0.0)


def energy_dissipation_residual(records, window=None, tol: float = 1e-2) -> ResidualReport:
    """(E(t2) - E(t1)) + int (lap_moll_sq + weighted_vel_sq) dt, normalized."""
    rs = _window(records, window)
    t = np.array([r.t for r in rs])
    E = np.array([r.energy for r in rs])
    D = np.array([r.lap_moll_sq + r.weighted_velocity_sq for r in rs])
    diss = _trapz(t, D)
    res = float(E[-1] - E[0] + diss)
    scale = float(abs(E[0]) + abs(diss))
    norm = res / scale if scale > 0 else 0.0
    mono, inc = _monotone(E, 10 * tol * scale)
    return ResidualReport("energy", res, norm, scale, float(t[0]), float(t[-1]), tol,
                          bool(abs(norm) <= tol and mono), mono, inc)


def entropy_dissipation_residual(records, window=None, tol: float = 1e-2) -> ResidualReport:
    """(Phi(t2) - Phi(t1)) + int (fisher + upwind_fisher + lap_moll_sq) dt, normalized.

    ``upwind_fisher`` is the entropy the upwind transport dissipates beyond the
    exact flux; it is nonnegative and vanishes as h -> 0.
    """
    rs = _window(records, window)
    t = np.array([r.t for r in rs])
    P = np.array([r.entropy for r in rs])
    D = np.array([r.fisher + r.upwind_fisher + r.lap_moll_sq for r in rs])
    diss = _trapz(t, D)
    res = float(P[-1] - P[0] + diss)
    scale = float(abs(P[0]) + abs(diss))
    norm = res / scale if scale > 0 else 0.0
    mono, inc = _monotone(P, 10 * tol * scale)
    flags = ["vacuum"] if any(r.excluded_flag for r in rs) else []
    return ResidualReport("entropy", res, norm, scale, float(t[0]), float(t[-1]), tol,
                          bool(abs(norm) <= tol and mono), mono, inc, flags)


def moment_identity_residual(records, grid: Grid, window=None, tol: float = 1e-2,
                             snapshots=None) -> ResidualReport:
    """m2(t2) - m2(t1) - int (2 d mass + moment_flux) dt, normalized by the moment scale.

    The diffusion contributes ``2 d mass``; ``moment_flux`` is the discrete
    ``2 int rho x . v``. Pass ``snapshots`` to enforce the seam guard.
    """
    rs = _window(records, window)
    flags = []
    if snapshots is not None:
        for s in snapshots:
            try:
                seam_guard(grid, s)
            except ValueError:
                flags.append("seam")
                break
    d = grid.d
    t = np.array([r.t for r in rs])
    m2 = np.array([r.second_moment for r in rs])
    rate = np.array([2 * d * r.mass + r.moment_flux for r in rs])
    src = _trapz(t, rate)
    res = float(m2[-1] - m2[0] - src)
    scale = float(abs(m2[-1] - m2[0]) + abs(src))
    norm = res / scale if scale > 0 else 0.0
    return ResidualReport("moment", res, norm, scale, float(t[0]), float(t[-1]), tol,
                          bool(abs(norm) <= tol and not flags), True, 0.0, flags)


def refinement_ratio(coarse: ResidualReport, fine: ResidualReport) -> float:
    return abs(coarse.residual) / abs(fine.residual) if fine.residual != 0 else np.inf


# --- dashboard ------------------------------------------------------------

DASHBOARD_KEYS = ("A_mass", "A_entropy_abs", "C_weighted_vel_int", "D_h1_sup", "D_h2_int", "E_moment_sup",
                  "F_grad_sqrt_int", "G_grad_l1_sq_int")


def estimate_dashboard(records) -> dict:
    t = np.array([r.t for r in records])
    col = lambda name: np.array([getattr(r, name) for r in records])  # noqa: E731
    return {
        "A_mass": float(np.max(col("mass"))),
        "A_entropy_abs": float(np.max(col("entropy_abs"))),
        "C_weighted_vel_int": _trapz(t, col("weighted_velocity_sq")),
        "D_h1_sup": float(np.sqrt(np.max(col("h1_moll_sq")))),
        "D_h2_int": _trapz(t, col("h2_moll_sq")),
        "E_moment_sup": float(np.max(col("second_moment"))),
        "F_grad_sqrt_int": _trapz(t, col("grad_sqrt_sq")),
        "G_grad_l1_sq_int": _trapz(t, col("gradient_l1") ** 2),
    }


def cauchy_schwarz_ok(rec: DiagnosticsRecord, rel: float = 1e-12) -> bool:
    """(int |grad rho|)^2 <= 4 mass int |grad sqrt rho|^2, the split grad rho = (grad rho / sqrt rho) sqrt rho."""
    lhs = rec.gradient_l1**2
    rhs = 4 * rec.mass * rec.grad_sqrt_sq
    return lhs <= rhs * (1 + rel) + 1e-300 or rec.excluded_flag


# --- output ---------------------------------------------------------------

def _fmt(x) -> str:
    return repr(float(x))


def diagnostics_csv(records) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_COLUMNS)
    for r in records:
        w.writerow([_fmt(v) for v in r.row()])
    return buf.getvalue()


def write_diagnostics_csv(path, records) -> None:
    with open(path, "w", newline="") as fh:
        fh.write(diagnostics_csv(records))


def residuals_json(reports) -> str:
    return json.dumps([r.to_dict() for r in reports], indent=2, sort_keys=True)
