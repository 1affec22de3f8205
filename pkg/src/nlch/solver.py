"""IMEX time stepping for the nonlocal equation and its local limit.

One step of ``d_t rho = Lap rho - div(rho grad Lap(K * rho))`` with
``K = w_eps * w_eps`` (or the identity for the local equation):

1. ``mu = -Lap(K * rho)`` is computed spectrally from the current density.
2. Face velocities are the face-normal differences ``v = -(mu_+ - mu)/h``,
   transported with first-order upwind fluxes ``F = rho_upwind * v``; the
   explicit update is positivity preserving when ``dt max|v| / h <= 1/(2d)``.
3. Diffusion is implicit with the finite-difference Laplacian symbol, whose
   resolvent is entrywise positive.

Steps 1-3 make the semi-discrete energy law hold exactly with the face-based
dissipation terms computed in :mod:`nlch.diagnostics`.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np

from .grid import Grid, forward, integral, inverse, read_snapshot
from .kernels import KernelSamples

log = logging.getLogger(__name__)


class SolverError(RuntimeError):
    pass


class CFLError(SolverError):
    def __init__(self, dt, admissible, reason="CFL"):
        self.dt = dt
        self.admissible = admissible
        super().__init__(f"{reason} violated: dt={dt:.6g} exceeds admissible dt={admissible:.6g}")


class NumericalAbort(SolverError):
    def __init__(self, message, last_state=None, step=None):
        self.last_state = last_state
        self.step = step
        super().__init__(message)


class SeamGuardError(ValueError):
    pass


@dataclass
class SchemeParams:
    """Time-step controls.

    ``dt`` fixes the step (refused if inadmissible); otherwise the step is
    ``min(safety * stability bounds, dt_max)``.
    """

    dt: float | None = None
    dt_max: float = math.inf
    safety: float = 0.9
    stabilize: bool = False
    check_stiffness: bool = True


@dataclass
class SolverState:
    grid: Grid
    rho: np.ndarray
    t: float
    eps: float
    kernel: KernelSamples | None
    params: SchemeParams = field(default_factory=SchemeParams)
    step: int = 0
    dt_last: float = 0.0

    @property
    def local(self) -> bool:
        return self.kernel is None

    @property
    def multiplier(self):
        """Fourier multiplier of the double mollification (1 for the local equation)."""
        if self.kernel is None:
            return 1.0
        return self.kernel.hat * self.kernel.hat

    def copy(self) -> "SolverState":
        return replace(self, rho=self.rho.copy())


# --- initial data ---------------------------------------------------------

@dataclass
class InitialDataSpec:
    family: str = "gaussian-blob"
    sigma: float = 0.5
    mass: float = 1.0
    center: tuple | None = None
    # double-bump
    separation: float = 1.0
    sigma2: float | None = None
    mass2: float | None = None
    # perturbed-constant
    c: float = 1.0
    amp: float = 0.01
    seed: int = 0
    modes: int = 4
    path: str | None = None

    @property
    def localized(self) -> bool:
        return self.family in ("gaussian-blob", "double-bump", "from-file")

    @property
    def width(self) -> float:
        if self.family == "gaussian-blob":
            return self.sigma
        if self.family == "double-bump":
            return max(self.sigma, self.sigma2 or self.sigma) + self.separation / 2
        return 0.0


def _blob(grid: Grid, sigma: float, mass: float, offset) -> np.ndarray:
    disp = grid.centered_coords
    r2 = sum((x - o) ** 2 for x, o in zip(disp, offset))
    g = np.exp(-0.5 * r2 / sigma**2)
    g = np.broadcast_to(g, grid.shape).astype(float)
    return mass * g / integral(grid, g)


def initial_density(spec: InitialDataSpec, grid: Grid) -> np.ndarray:
    d = grid.d
    offset = tuple(spec.center) if spec.center is not None else (0.0,) * d
    if len(offset) != d:
        raise ValueError(f"center has {len(offset)} coordinates, grid has d={d}")
    if spec.family == "gaussian-blob":
        return _blob(grid, spec.sigma, spec.mass, offset)
    if spec.family == "double-bump":
        shift = np.zeros(d)
        shift[0] = spec.separation / 2
        a = _blob(grid, spec.sigma, spec.mass, np.asarray(offset) - shift)
        b = _blob(grid, spec.sigma2 or spec.sigma, spec.mass2 if spec.mass2 is not None else spec.mass,
                  np.asarray(offset) + shift)
        return a + b
    if spec.family == "perturbed-constant":
        rng = np.random.default_rng(spec.seed)
        xi = np.zeros(grid.shape)
        ks = range(-spec.modes, spec.modes + 1)
        for kvec in np.array(np.meshgrid(*([list(ks)] * d), indexing="ij")).reshape(d, -1).T:
            if not np.any(kvec):
                continue
            phase = rng.uniform(0, 2 * np.pi)
            amp = rng.normal()
            arg = sum(2 * np.pi * k * x / grid.L for k, x in zip(kvec, grid.coords))
            xi = xi + amp * np.cos(arg + phase)
        xi /= np.abs(xi).max()
        return spec.c * (1.0 + spec.amp * xi)
    if spec.family == "from-file":
        g2, rho, _, _ = read_snapshot(spec.path)
        if g2 != grid:
            raise ValueError(f"snapshot grid {g2} differs from run grid {grid}")
        return rho
    raise ValueError(f"unknown initial data family {spec.family!r}")


def concentration(grid: Grid, rho: np.ndarray, radius: float) -> float:
    inside = grid.radius_from_center() <= radius
    return float(np.sum(np.where(inside, rho, 0.0)) / np.sum(rho))


def seam_guard(grid: Grid, rho: np.ndarray, fraction: float = 0.999) -> None:
    c = concentration(grid, rho, grid.L / 4)
    if c < fraction:
        raise SeamGuardError(
            f"seam guard: only {c:.6f} of the mass lies within L/4 of the center (need {fraction})")


def init_state(spec: InitialDataSpec, grid: Grid, eps: float = 0.0, kernel: KernelSamples | None = None,
               params: SchemeParams | None = None) -> SolverState:
    rho = initial_density(spec, grid)
    if not np.all(np.isfinite(rho)):
        raise ValueError("initial density has non-finite entries")
    if rho.min() < -1e-12 * rho.max():
        raise ValueError(f"initial density is negative (min {rho.min():.3g})")
    if spec.localized:
        seam_guard(grid, rho)
        width = max(eps, spec.width)
        if grid.L < 16 * width * (1 - 1e-12):
            raise SeamGuardError(f"seam guard: L={grid.L:g} < 16 * max(eps, data width) = {16 * width:g}")
    if kernel is not None and abs(kernel.eps - eps) > 1e-14 * max(eps, 1.0):
        raise ValueError(f"kernel scale {kernel.eps} differs from eps={eps}")
    if kernel is None and eps != 0:
        raise ValueError("nonlocal state needs kernel samples")
    return SolverState(grid, rho, 0.0, float(eps), kernel, params or SchemeParams())


# --- discrete operators shared by every stepper ----------------------------

def potential(grid: Grid, rho_hat: np.ndarray, multiplier) -> np.ndarray:
    """mu = -Lap(K * rho) from the spectrum of rho."""
    return inverse(grid, grid.k_squared * multiplier * rho_hat)


def face_velocities(grid: Grid, mu: np.ndarray) -> list:
    """v on the face between node i and i+e_a: -(mu_{i+e_a} - mu_i)/h."""
    return [-(np.roll(mu, -1, axis=a) - mu) / grid.h for a in range(grid.d)]


def upwind_fluxes(rho: np.ndarray, vfaces: list) -> list:
    return [v * np.where(v > 0, rho, np.roll(rho, -1, axis=a)) for a, v in enumerate(vfaces)]


def flux_divergence(grid: Grid, fluxes: list) -> np.ndarray:
    out = np.zeros_like(fluxes[0])
    for a, F in enumerate(fluxes):
        out += F - np.roll(F, 1, axis=a)
    return out / grid.h


def stiffness_symbol_max(grid: Grid, multiplier) -> float:
    """max_k lambda_h(k) |k|^2 K(k): the explicit transport's linear rate per unit density."""
    return float(np.max(grid.fd_laplacian_symbol * grid.k_squared * np.broadcast_to(multiplier, grid.spectral_shape)))


def admissible_dt(grid: Grid, rho: np.ndarray, vfaces: list, multiplier, params: SchemeParams,
                  stabilized: bool = False) -> tuple[float, float]:
    """(CFL bound, stiffness bound), both before the safety factor."""
    vmax = max(float(np.abs(v).max()) for v in vfaces)
    cfl = grid.h / (2 * grid.d * vmax) if vmax > 0 else math.inf
    stiff = math.inf
    if params.check_stiffness and not stabilized:
        lam = stiffness_symbol_max(grid, multiplier)
        rmax = float(rho.max())
        if lam > 0 and rmax > 0:
            stiff = 1.0 / (rmax * lam)
    return cfl, stiff


def imex_update(grid: Grid, rho: np.ndarray, dt: float, fluxes: list, stab_symbol=None,
                rho_hat: np.ndarray | None = None) -> np.ndarray:
    """Explicit upwind transport, then implicit diffusion (and stabilization)."""
    star = rho - dt * flux_divergence(grid, fluxes)
    denom = 1.0 + dt * grid.fd_laplacian_symbol
    rhs = forward(grid, star)
    if stab_symbol is not None:
        denom = denom + dt * stab_symbol
        rhs = rhs + dt * stab_symbol * rho_hat
    return inverse(grid, rhs / denom)


def _choose_dt(state: SolverState, cfl: float, stiff: float, limit: float) -> float:
    p = state.params
    if p.dt is not None:
        if p.dt > cfl * (1 + 1e-12):
            raise CFLError(p.dt, p.safety * cfl, "CFL")
        if p.dt > stiff * (1 + 1e-12):
            raise CFLError(p.dt, p.safety * stiff, "stiffness guard")
        dt = p.dt
    else:
        dt = min(p.safety * cfl, p.safety * stiff, p.dt_max)
    return min(dt, limit)


def _advance(state: SolverState, limit: float, multiplier, stabilize: bool) -> SolverState:
    grid, rho = state.grid, state.rho
    rho_hat = forward(grid, rho)
    mu = potential(grid, rho_hat, multiplier)
    vf = face_velocities(grid, mu)
    cfl, stiff = admissible_dt(grid, rho, vf, multiplier, state.params, stabilized=stabilize)
    dt = _choose_dt(state, cfl, stiff, limit)
    if not dt > 0:
        raise NumericalAbort(f"no admissible time step at t={state.t}", state, state.step)
    stab = None
    if stabilize:
        kappa = float(rho.max())
        stab = kappa * grid.fd_laplacian_symbol * grid.k_squared * np.broadcast_to(multiplier, grid.spectral_shape)
    new = imex_update(grid, rho, dt, upwind_fluxes(rho, vf), stab, rho_hat)
    if not np.all(np.isfinite(new)):
        raise NumericalAbort(f"non-finite density after step {state.step + 1} (t={state.t + dt:.6g})",
                             state, state.step + 1)
    return replace(state, rho=new, t=state.t + dt, step=state.step + 1, dt_last=dt)


def step_nonlocal(state: SolverState, limit: float = math.inf) -> SolverState:
    if state.kernel is None:
        raise ValueError("step_nonlocal needs kernel samples; use step_local for eps = 0")
    return _advance(state, limit, state.multiplier, stabilize=False)


def step_local(state: SolverState, limit: float = math.inf) -> SolverState:
    return _advance(state, limit, 1.0, stabilize=state.params.stabilize)


def step(state: SolverState, limit: float = math.inf) -> SolverState:
    return step_local(state, limit) if state.local else step_nonlocal(state, limit)


# --- trajectories ---------------------------------------------------------

@dataclass
class Trajectory:
    times: list = field(default_factory=list)
    snapshots: list = field(default_factory=list)
    records: list = field(default_factory=list)
    steps: list = field(default_factory=list)

    @property
    def final(self):
        return self.snapshots[-1]


def run(state: SolverState, T: float, observers: list[Callable] | None = None, cadence: float | None = None,
        recorder: Callable | None = None, stepper: Callable | None = None) -> tuple[SolverState, Trajectory]:
    """Advance to ``t + T``; snapshots land exactly on multiples of ``cadence``.

    ``recorder(state)`` produces the per-step diagnostics record; each
    ``observer(state, record)`` is called after every step (and at t=0).
    """
    if T < 0:
        raise ValueError("T must be nonnegative")
    observers = observers or []
    stepper = stepper or step
    if cadence is not None and state.params.dt is not None and cadence < state.params.dt * (1 - 1e-12):
        raise ValueError(f"cadence {cadence} is shorter than dt {state.params.dt}")
    t_end = state.t + T
    traj = Trajectory()

    def observe(s):
        rec = recorder(s) if recorder is not None else None
        traj.records.append(rec)
        traj.steps.append(s.step)
        for ob in observers:
            ob(s, rec)

    observe(state)
    traj.times.append(state.t)
    traj.snapshots.append(state.rho.copy())
    if T == 0:
        return state, traj
    t0 = state.t
    next_snap = t0 + cadence if cadence else t_end
    while state.t < t_end - 1e-12 * max(1.0, abs(t_end)):
        target = min(next_snap, t_end)
        try:
            state = stepper(state, limit=target - state.t)
        except SolverError as exc:
            exc.args = (f"step {state.step + 1}: {exc.args[0]}",)
            raise
        if abs(state.t - target) <= 1e-12 * max(1.0, abs(target)):
            state = replace(state, t=target)
            traj.times.append(state.t)
            traj.snapshots.append(state.rho.copy())
            if cadence:
                k = round((target - t0) / cadence) + 1
                next_snap = t0 + k * cadence
        observe(state)
    return state, traj
