"""Interacting particles ``X_i' = -(1/N) sum_{j != i} grad W(X_i - X_j)`` in free space.

Forces are O(N^2) pair sums compiled with numba; each pair contributes
equal and opposite forces, so the center of mass is conserved. The mean-field
limit ``d_t mu = div(mu grad(W * mu))`` is solved on a periodic grid with the
solver's upwind transport and compared against kernel density estimates.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numba
import numpy as np

from .grid import Grid, forward, integral, inverse
from .kernels import make_kernel, sample_kernel
from .solver import face_velocities, flux_divergence, upwind_fluxes

BLOWUP_NORM = 1e6
W_FAMILIES = {"gaussian": 0, "bump": 1}
GUARD_WIDTHS = 8.0  # tail of a Gaussian beyond 8 bandwidths is < 1e-14


class ParticleBlowup(RuntimeError):
    pass


@dataclass(frozen=True)
class InteractionKernel:
    """Even interaction potential ``W(x) = delta^-d w(x/delta)`` with unit mass."""

    family: str = "gaussian"
    scale: float = 0.5
    d: int = 1

    def __post_init__(self):
        if self.family not in W_FAMILIES:
            raise ValueError(f"interaction family must be one of {sorted(W_FAMILIES)}, got {self.family!r}")
        if not self.scale > 0:
            raise ValueError("interaction scale must be positive")

    @property
    def normalization(self) -> float:
        return make_kernel(self.family, self.d).mass_constant / self.scale**self.d

    def gradient(self, x: np.ndarray) -> np.ndarray:
        """grad W at the rows of ``x`` (shape (m, d))."""
        x = np.atleast_2d(np.asarray(x, dtype=float))
        out = np.empty_like(x)
        for k in range(x.shape[0]):
            out[k] = _grad_w(x[k], W_FAMILIES[self.family], self.scale, self.normalization)
        return out

    def lipschitz_bound(self) -> float:
        """sup |D^2 W| (Gaussian: attained at the origin; bump: sampled)."""
        if self.family == "gaussian":
            return self.normalization / self.scale**2
        r = np.linspace(0, self.scale * (1 - 1e-9), 20001)
        spec = make_kernel("bump", self.d)
        s = r / self.scale
        f1 = np.abs(spec.dprofile(s))
        with np.errstate(divide="ignore", invalid="ignore"):
            radial_over_r = np.where(s > 0, f1 / s, 0.0)
        h = np.gradient(spec.dprofile(s), s)
        return float(max(np.max(np.abs(h)), np.max(radial_over_r)) * self.normalization / self.scale**2)


@numba.njit(cache=False)
def _grad_w(x, fam, delta, norm):
    d = x.shape[0]
    q = 0.0
    for a in range(d):
        q += x[a] * x[a]
    q /= delta * delta
    out = np.zeros(d)
    if fam == 0:
        c = -norm * math.exp(-0.5 * q) / (delta * delta)
    else:
        if q >= 1.0:
            return out
        w = norm * math.exp(-1.0 / (1.0 - q))
        c = -2.0 * w / (delta * delta * (1.0 - q) ** 2)
    for a in range(d):
        out[a] = c * x[a]
    return out


@numba.njit(cache=False)
def _velocities(X, fam, delta, norm):
    n, d = X.shape
    out = np.zeros((n, d))
    diff = np.empty(d)
    for i in range(n):
        for j in range(i + 1, n):
            q = 0.0
            for a in range(d):
                diff[a] = X[i, a] - X[j, a]
                q += diff[a] * diff[a]
            q /= delta * delta
            if fam == 0:
                c = -norm * math.exp(-0.5 * q) / (delta * delta)
            else:
                if q >= 1.0:
                    continue
                c = -2.0 * norm * math.exp(-1.0 / (1.0 - q)) / (delta * delta * (1.0 - q) ** 2)
            for a in range(d):
                g = c * diff[a]
                out[i, a] -= g
                out[j, a] += g
    for i in range(n):
        for a in range(d):
            out[i, a] /= n
    return out


@dataclass
class ParticleState:
    positions: np.ndarray  # (N, d)
    t: float
    kernel: InteractionKernel

    def __post_init__(self):
        self.positions = np.atleast_2d(np.asarray(self.positions, dtype=float))
        if self.positions.shape[0] < 1:
            raise ValueError("need at least one particle")
        if self.positions.shape[1] != self.kernel.d:
            raise ValueError(f"positions have d={self.positions.shape[1]}, kernel has d={self.kernel.d}")
        if not np.all(np.isfinite(self.positions)):
            raise ValueError("positions must be finite")

    @property
    def N(self) -> int:
        return self.positions.shape[0]

    @property
    def d(self) -> int:
        return self.positions.shape[1]

    def center_of_mass(self) -> np.ndarray:
        return self.positions.mean(axis=0)


def velocities(state: ParticleState, X: np.ndarray | None = None) -> np.ndarray:
    k = state.kernel
    X = state.positions if X is None else X
    return _velocities(np.ascontiguousarray(X), W_FAMILIES[k.family], k.scale, k.normalization)


def sample_particles(N: int, d: int, sigma: float, seed: int, kernel: InteractionKernel) -> ParticleState:
    """N i.i.d. draws from the centered Gaussian law of standard deviation ``sigma``."""
    rng = np.random.default_rng(seed)
    return ParticleState(rng.normal(scale=sigma, size=(N, d)), 0.0, kernel)


@dataclass
class ParticleTrajectory:
    times: list = field(default_factory=list)
    positions: list = field(default_factory=list)


def rk4_step(state: ParticleState, dt: float) -> ParticleState:
    X = state.positions
    k1 = velocities(state, X)
    k2 = velocities(state, X + 0.5 * dt * k1)
    k3 = velocities(state, X + 0.5 * dt * k2)
    k4 = velocities(state, X + dt * k3)
    new = X + dt / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)
    if not np.all(np.isfinite(new)) or np.max(np.abs(new)) > BLOWUP_NORM:
        raise ParticleBlowup(f"particle positions blew up at t={state.t + dt:.6g}")
    return replace(state, positions=new, t=state.t + dt)


def simulate_particles(state: ParticleState, T: float, dt: float, snapshot_every: int | None = None,
                       check_stability: bool = True) -> tuple[ParticleState, ParticleTrajectory]:
    """Classical RK4 over ``|T|`` (negative ``T`` integrates backwards); steps are ``T/ceil(|T|/dt)``."""
    if not dt > 0:
        raise ValueError("dt must be positive")
    if check_stability and dt * state.kernel.lipschitz_bound() > 0.1 * (1 + 1e-12):
        raise ValueError(f"dt={dt:g} exceeds the stability heuristic dt * Lip(grad W) <= 0.1")
    n_steps = int(math.ceil(abs(T) / dt - 1e-9)) if T != 0 else 0
    h = T / n_steps if n_steps else 0.0
    traj = ParticleTrajectory([state.t], [state.positions.copy()])
    t0 = state.t
    for k in range(1, n_steps + 1):
        state = rk4_step(state, h)
        state.t = t0 + k * h
        if k == n_steps or (snapshot_every and k % snapshot_every == 0):
            traj.times.append(state.t)
            traj.positions.append(state.positions.copy())
    return state, traj


# --- densities ---------------------------------------------------------------------

def default_bandwidth(N: int, grid: Grid) -> float:
    return max(2 * grid.h, N ** (-1.0 / (grid.d + 4)))


def empirical_density(positions: np.ndarray, grid: Grid, bandwidth: float) -> np.ndarray:
    """(1/N) sum_i G_b(x - X_i) with free-space positions mapped to the grid center."""
    X = np.atleast_2d(np.asarray(positions, dtype=float))
    N, d = X.shape
    if d != grid.d:
        raise ValueError(f"positions have d={d}, grid has d={grid.d}")
    reach = np.max(np.abs(X)) + GUARD_WIDTHS * bandwidth
    if reach > grid.L / 2:
        raise ValueError(f"particle guard: positions plus {GUARD_WIDTHS:g} bandwidths reach {reach:g} > L/2")
    x = (np.arange(grid.n) * grid.h - grid.center)
    c = 1.0 / (math.sqrt(2 * math.pi) * bandwidth)
    # separable Gaussian factors, one (N, n) matrix per axis
    fac = [c * np.exp(-0.5 * ((x[None, :] - X[:, a, None]) / bandwidth) ** 2) for a in range(d)]
    if d == 1:
        return fac[0].sum(axis=0) / N
    if d == 2:
        return fac[0].T @ fac[1] / N
    return np.einsum("ia,ib,ic->abc", *fac, optimize=True) / N


def gaussian_law_density(grid: Grid, sigma: float) -> np.ndarray:
    r2 = sum(x**2 for x in grid.centered_coords)
    g = np.broadcast_to(np.exp(-0.5 * r2 / sigma**2), grid.shape).astype(float)
    return g / integral(grid, g)


# --- mean-field PDE ---------------------------------------------------------------

def transport_run(grid: Grid, mu0: np.ndarray, kernel: InteractionKernel, times, safety: float = 0.45,
                  dt_max: float = math.inf):
    """Upwind solution of d_t mu = div(mu grad(W * mu)); returns densities at ``times``."""
    if kernel.d != grid.d:
        raise ValueError("interaction kernel and grid dimensions differ")
    W = sample_kernel(make_kernel(kernel.family, grid.d), kernel.scale, grid)
    mu = np.array(mu0, dtype=float)
    t = 0.0
    out = []
    for target in times:
        while t < target - 1e-12 * max(1.0, target):
            pot = inverse(grid, forward(grid, mu) * W.hat)
            vf = face_velocities(grid, pot)
            vmax = max(float(np.abs(v).max()) for v in vf)
            dt = min(safety * grid.h / (grid.d * vmax) if vmax > 0 else math.inf, dt_max, target - t)
            mu = mu - dt * flux_divergence(grid, upwind_fluxes(mu, vf))
            t += dt
        t = target
        out.append(mu.copy())
    return out


@dataclass
class PDEComparison:
    times: list
    distances: list
    bandwidth: float
    N: int

    def rows(self) -> list:
        return list(zip(self.times, self.distances))


def compare_to_pde(traj: ParticleTrajectory, kernel: InteractionKernel, grid: Grid, sigma0: float,
                   bandwidth: float | None = None) -> PDEComparison:
    """L1 distance between the mollified empirical measure and the mean-field solution from the sampling law."""
    N = traj.positions[0].shape[0]
    b = default_bandwidth(N, grid) if bandwidth is None else bandwidth
    mu0 = gaussian_law_density(grid, sigma0)
    rel = [t - traj.times[0] for t in traj.times]
    pde = transport_run(grid, mu0, kernel, rel)
    dist = [float(np.sum(np.abs(empirical_density(X, grid, b) - m)) * grid.cell_volume)
            for X, m in zip(traj.positions, pde)]
    return PDEComparison(list(traj.times), dist, b, N)
