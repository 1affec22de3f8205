"""Multi-species systems coupled through Gram-type kernel matrices.

Species ``i`` feels the potential ``mu^i = -Lap(sum_j K^{ij} * rho^j)`` with
``K^{ij} = sum_k a_ik a_jk  w^i * w^j``. At each wavenumber the coupling is the
matrix ``D A A^T D`` with ``D = diag(w^i hat)``, hence positive semidefinite.
Every species is advanced with the same discrete operators as the scalar solver.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .diagnostics import DiagnosticsRecord, record_density
from .grid import Grid, GridMismatchError, forward, inverse
from .kernels import KernelSamples, KernelSpec, sample_kernel
from .solver import (CFLError, NumericalAbort, SchemeParams, face_velocities, imex_update, upwind_fluxes)

SINGULAR_RATIO = 1e-8


class SingularCouplingError(ValueError):
    pass


@dataclass
class CouplingMatrix:
    A: np.ndarray
    kernels: list  # KernelSamples per species
    multipliers: np.ndarray  # (N, N, *spectral_shape)
    max_eig: np.ndarray  # largest eigenvalue of the coupling at each wavenumber

    @property
    def N(self) -> int:
        return self.A.shape[0]

    @property
    def grid(self) -> Grid:
        return self.kernels[0].grid

    @property
    def gram(self) -> np.ndarray:
        return self.A @ self.A.T


def check_invertible(A: np.ndarray) -> np.ndarray:
    A = np.atleast_2d(np.asarray(A, dtype=float))
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise SingularCouplingError(f"coupling matrix must be square, got shape {A.shape}")
    s = np.linalg.svd(A, compute_uv=False)
    if not s[-1] >= SINGULAR_RATIO * s[0]:
        raise SingularCouplingError(f"coupling matrix is singular: singular values {s}")
    return A


def build_coupling(A, specs, eps: float, grid: Grid, check: bool = True) -> CouplingMatrix:
    """Spectral multipliers of every K^{ij}; ``specs`` is one kernel spec per species (or a single shared one)."""
    A = check_invertible(A)
    N = A.shape[0]
    if isinstance(specs, (KernelSpec, KernelSamples)):
        specs = [specs] * N
    if len(specs) != N:
        raise ValueError(f"{len(specs)} kernel specs for {N} species")
    kernels = [s if isinstance(s, KernelSamples) else sample_kernel(s, eps, grid, check=check) for s in specs]
    G = A @ A.T
    hats = np.stack([k.hat for k in kernels])
    mult = G[:, :, None] * (hats[:, None] * hats[None, :]).reshape(N, N, -1)
    mult = mult.reshape((N, N) + grid.spectral_shape)
    if N == 1:
        max_eig = mult[0, 0]
    else:
        flat = np.moveaxis(mult.reshape(N, N, -1), -1, 0)
        max_eig = np.linalg.eigvalsh(flat)[:, -1].reshape(grid.spectral_shape)
    return CouplingMatrix(A, kernels, mult, max_eig)


@dataclass
class SystemState:
    grid: Grid
    rho: np.ndarray  # (N, *grid.shape)
    t: float
    eps: float
    coupling: CouplingMatrix
    params: SchemeParams = field(default_factory=SchemeParams)
    sign: int = 1
    step: int = 0
    dt_last: float = 0.0

    @property
    def N(self) -> int:
        return self.rho.shape[0]

    def copy(self) -> "SystemState":
        return replace(self, rho=self.rho.copy())


def init_system(grid: Grid, densities, coupling: CouplingMatrix, eps: float, params: SchemeParams | None = None,
                sign: int = 1) -> SystemState:
    """``sign=+1`` advances ``d_t rho^i = Lap rho^i - div(rho^i grad Lap sum_j K^{ij} * rho^j)``; ``-1`` flips the transport."""
    rho = np.stack([np.asarray(r, dtype=float) for r in densities])
    if rho.shape[1:] != grid.shape:
        raise GridMismatchError(f"species fields have shape {rho.shape[1:]}, grid is {grid.shape}")
    if rho.shape[0] != coupling.N:
        raise ValueError(f"{rho.shape[0]} densities for a {coupling.N}-species coupling")
    if sign not in (1, -1):
        raise ValueError("sign must be +1 or -1")
    if rho.min() < -1e-12 * rho.max():
        raise ValueError("initial densities must be nonnegative")
    return SystemState(grid, rho, 0.0, float(eps), coupling, params or SchemeParams(), sign)


def system_potentials(state: SystemState, rho_hat: np.ndarray | None = None) -> np.ndarray:
    grid, C = state.grid, state.coupling
    if rho_hat is None:
        rho_hat = np.stack([forward(grid, r) for r in state.rho])
    mus = []
    for i in range(state.N):
        acc = sum(C.multipliers[i, j] * rho_hat[j] for j in range(state.N))
        mus.append(state.sign * inverse(grid, grid.k_squared * acc))
    return np.stack(mus)


def step_system(state: SystemState, limit: float = math.inf) -> SystemState:
    """One IMEX step for all species with a common dt."""
    grid, p = state.grid, state.params
    rho_hat = np.stack([forward(grid, r) for r in state.rho])
    mus = system_potentials(state, rho_hat)
    vfs = [face_velocities(grid, mu) for mu in mus]
    vmax = max(float(np.abs(v).max()) for vf in vfs for v in vf)
    cfl = grid.h / (2 * grid.d * vmax) if vmax > 0 else math.inf
    stiff = math.inf
    if p.check_stiffness:
        lam = float(np.max(grid.fd_laplacian_symbol * grid.k_squared * state.coupling.max_eig))
        rmax = float(state.rho.max())
        if lam > 0 and rmax > 0:
            stiff = 1.0 / (rmax * lam)
    if p.dt is not None:
        if p.dt > cfl * (1 + 1e-12):
            raise CFLError(p.dt, p.safety * cfl, "CFL")
        if p.dt > stiff * (1 + 1e-12):
            raise CFLError(p.dt, p.safety * stiff, "stiffness guard")
        dt = p.dt
    else:
        dt = min(p.safety * cfl, p.safety * stiff, p.dt_max)
    dt = min(dt, limit)
    new = np.stack([imex_update(grid, state.rho[i], dt, upwind_fluxes(state.rho[i], vfs[i]))
                    for i in range(state.N)])
    if not np.all(np.isfinite(new)):
        raise NumericalAbort(f"non-finite density after step {state.step + 1}", state, state.step + 1)
    return replace(state, rho=new, t=state.t + dt, step=state.step + 1, dt_last=dt)


def run_system(state: SystemState, T: float, recorder=None):
    """Advance to ``t + T``; returns the final state and the per-step records."""
    t_end = state.t + T
    records = [recorder(state)] if recorder else []
    while state.t < t_end - 1e-12 * max(1.0, abs(t_end)):
        state = step_system(state, limit=t_end - state.t)
        if recorder:
            records.append(recorder(state))
    return state, records


# --- functionals ------------------------------------------------------------

def _spectral_quadratic(grid: Grid, weight, uhat, vhat) -> float:
    w = np.full(grid.spectral_shape[-1], 2.0)
    w[0] = 1.0
    w[-1] = 1.0
    return float(np.sum(weight * (uhat * np.conj(vhat)).real * w) / grid.volume)


def system_energy(state: SystemState) -> float:
    """(1/2) sum_ij int grad rho^i . grad(K^{ij} * rho^j), the functional the system dissipates."""
    grid, C = state.grid, state.coupling
    rh = [forward(grid, r) for r in state.rho]
    return 0.5 * sum(_spectral_quadratic(grid, grid.k_squared * C.multipliers[i, j], rh[i], rh[j])
                     for i in range(state.N) for j in range(state.N))


def species_energy_sum(state: SystemState) -> float:
    """sum_i int |grad(rho^i * w^i)|^2 / 2; equals the system energy when A is the identity."""
    grid = state.grid
    total = 0.0
    for r, k in zip(state.rho, state.coupling.kernels):
        u = forward(grid, r) * k.hat
        total += 0.5 * _spectral_quadratic(grid, grid.k_squared, u, u)
    return total


def system_entropy(state: SystemState) -> float:
    """sum_i int rho^i (log rho^i - 1) with 0 log 0 = 0."""
    hd = state.grid.cell_volume
    total = 0.0
    for r in state.rho:
        pos = r > 0
        total += float(np.sum(np.where(pos, r * (np.log(np.where(pos, r, 1.0)) - 1.0), 0.0)) * hd)
    return total


def species_records(state: SystemState) -> list[DiagnosticsRecord]:
    """Scalar-solver diagnostics of each species under its coupled potential."""
    mus = system_potentials(state)
    return [record_density(state.grid, state.rho[i], state.coupling.multipliers[i, i], state.coupling.kernels[i].hat,
                           t=state.t, step=state.step, dt=state.dt_last, mu=mus[i]) for i in range(state.N)]


# --- sandwich identity ------------------------------------------------------

@dataclass
class SandwichResult:
    lhs: float
    rhs: float

    @property
    def relative_error(self) -> float:
        scale = max(abs(self.lhs), abs(self.rhs))
        return abs(self.lhs - self.rhs) / scale if scale > 0 else 0.0


def _check_fields(coupling: CouplingMatrix, etas) -> np.ndarray:
    etas = np.stack([np.asarray(e, dtype=float) for e in etas])
    if etas.shape[0] != coupling.N:
        raise ValueError(f"{etas.shape[0]} fields for a {coupling.N}-species coupling")
    if etas.shape[1:] != coupling.grid.shape:
        raise GridMismatchError(f"fields have shape {etas.shape[1:]}, coupling grid is {coupling.grid.shape}")
    return etas


def sandwich_identity(etas, coupling: CouplingMatrix) -> SandwichResult:
    """Both sides of sum_ij int eta^i K^{ij}*eta^j = int sum_k (sum_i a_ik eta^i * w^i)^2, evaluated independently."""
    etas = _check_fields(coupling, etas)
    grid, N, A = coupling.grid, coupling.N, coupling.A
    hd = grid.cell_volume
    lhs = 0.0
    for i in range(N):
        for j in range(N):
            conv = inverse(grid, coupling.multipliers[i, j] * forward(grid, etas[j]))
            lhs += float(np.sum(etas[i] * conv) * hd)
    smooth = [inverse(grid, forward(grid, e) * k.hat) for e, k in zip(etas, coupling.kernels)]
    rhs = 0.0
    for k in range(N):
        s = sum(A[i, k] * smooth[i] for i in range(N))
        rhs += float(np.sum(s * s) * hd)
    return SandwichResult(lhs, rhs)


@dataclass
class SandwichBounds:
    lambda_min: float
    lambda_max: float
    lower: float
    middle: float
    upper: float
    passed: bool
    message: str = ""

    def to_dict(self) -> dict:
        return dict(self.__dict__)


def sandwich_bounds_check(etas, A, coupling: CouplingMatrix | None = None, rel: float = 1e-10) -> SandwichBounds:
    """lambda_min(AA^T) sum_i int (eta^i*w^i)^2 <= middle <= lambda_max(AA^T) sum_i int (eta^i*w^i)^2."""
    A = np.atleast_2d(np.asarray(A, dtype=float))
    try:
        check_invertible(A)
    except SingularCouplingError as exc:
        return SandwichBounds(math.nan, math.nan, math.nan, math.nan, math.nan, False, str(exc))
    if coupling is None:
        raise ValueError("a prepared coupling is required for invertible A")
    etas = _check_fields(coupling, etas)
    grid = coupling.grid
    lam = np.linalg.eigvalsh(A @ A.T)
    base = sum(float(np.sum(inverse(grid, forward(grid, e) * k.hat) ** 2) * grid.cell_volume)
               for e, k in zip(etas, coupling.kernels))
    middle = sandwich_identity(etas, coupling).lhs
    lo, hi = lam[0] * base, lam[-1] * base
    slack = rel * max(abs(hi), 1e-300)
    ok = lo - slack <= middle <= hi + slack
    return SandwichBounds(float(lam[0]), float(lam[-1]), float(lo), middle, float(hi), bool(ok))
