"""Measurements of the nonlocal-to-local limit.

Frozen-field checks (commutators, the first-moment terms and the pointwise
kernel domination), weak-form residuals of the local equation, the d = 2
truncation decomposition and epsilon sweeps against a local reference run.
"""
from __future__ import annotations

import logging
import math
import time
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy import optimize

from .diagnostics import estimate_dashboard, record
from .grid import Grid, divergence, forward, gradient, grad_laplacian, inverse, lp_time_norm
from .kernels import KernelError, KernelSamples, KernelSpec, certify_assumption, radial_convolution, sample_kernel
from .solver import InitialDataSpec, SchemeParams, init_state, run

log = logging.getLogger(__name__)


# --- test functions -----------------------------------------------------------

@dataclass(frozen=True)
class TestFunctionSpec:
    """phi(x, t) = (1 - |x - c|^2 / R^2)_+^power * (1 - (t/T)^2)^2.

    ``center`` defaults to the domain center; ``T=None`` makes phi time independent.
    """

    __test__ = False  # not a pytest class

    radius: float = 1.0
    power: int = 6
    center: tuple | None = None
    T: float | None = None

    def _offsets(self, grid: Grid):
        c = self.center if self.center is not None else (0.0,) * grid.d
        if len(c) != grid.d:
            raise ValueError(f"center has {len(c)} coordinates, grid has d={grid.d}")
        ys = [x - ci for x, ci in zip(grid.centered_coords, c)]
        far = max(abs(ci) for ci in c) + self.radius
        if far > grid.L / 2 * (1 - 1e-12):
            raise ValueError(f"test function support reaches the seam ({far:g} > L/2 = {grid.L / 2:g})")
        return ys

    def time_window(self, t):
        if self.T is None:
            return np.ones_like(np.asarray(t, dtype=float)), np.zeros_like(np.asarray(t, dtype=float))
        s = np.asarray(t, dtype=float) / self.T
        return (1 - s**2) ** 2, -4 * s * (1 - s**2) / self.T

    def _core(self, grid):
        ys = self._offsets(grid)
        q = sum(y**2 for y in ys) / self.radius**2
        inside = q < 1
        base = np.where(inside, 1 - q, 0.0)
        return ys, base

    def value(self, grid: Grid) -> np.ndarray:
        _, b = self._core(grid)
        return np.broadcast_to(b**self.power, grid.shape).copy()

    def gradient(self, grid: Grid) -> list:
        ys, b = self._core(grid)
        p, R2 = self.power, self.radius**2
        g = -2 * p * b ** (p - 1) / R2
        return [np.broadcast_to(g * y, grid.shape).copy() for y in ys]

    def hessian(self, grid: Grid) -> list:
        ys, b = self._core(grid)
        p, R2 = self.power, self.radius**2
        a = 4 * p * (p - 1) * b ** (p - 2) / R2**2
        c = -2 * p * b ** (p - 1) / R2
        return [[np.broadcast_to(a * yi * yj + (c if i == j else 0.0), grid.shape).copy()
                 for j, yj in enumerate(ys)] for i, yi in enumerate(ys)]

    def laplacian(self, grid: Grid) -> np.ndarray:
        H = self.hessian(grid)
        return sum(H[i][i] for i in range(grid.d))


# --- kernel bound helpers -------------------------------------------------------

_DOUBLE_TABLES: dict = {}


def double_kernel_samples(kernel: KernelSamples, n_table: int = 1500) -> np.ndarray:
    """Samples of ``w_eps * f_eps`` from an accurate radial quadrature table (log-linear interpolation)."""
    spec = kernel.spec
    if spec.comparison is None:
        raise KernelError("kernel carries no comparison kernel f")
    grid, eps = kernel.grid, kernel.eps
    r = np.sqrt(sum(z**2 for z in grid.origin_coords)) / eps
    rmax = float(np.max(r)) * (1 + 1e-9)
    key = (spec.family, spec.comparison.family, spec.d, id(spec.profile), id(spec.comparison.profile))
    table = _DOUBLE_TABLES.get(key)
    if table is None or table[0][-1] < rmax:
        radii = np.linspace(0.0, rmax, n_table)
        table = (radii, radial_convolution(spec, spec.comparison, radii))
        _DOUBLE_TABLES[key] = table
    radii, vals = table
    pos = vals > 0
    logv = np.log(np.where(pos, vals, 1.0))
    out = np.exp(np.interp(r, radii, logv))
    # zero wherever either neighbouring table node vanishes
    nz = np.interp(r, radii, pos.astype(float)) >= 1.0
    out = np.where(nz, out, np.interp(r, radii, vals))
    return np.broadcast_to(out / eps**grid.d, grid.shape).copy()


_C_BEST: dict = {}


def certified_constant(spec: KernelSpec) -> float:
    key = (spec.family, spec.d, id(spec.profile), id(spec.comparison.profile) if spec.comparison else None)
    if key not in _C_BEST:
        rep = certify_assumption(spec)
        if not rep.pass_:
            raise KernelError(f"kernel {spec.family} failed certification: {rep.message}")
        _C_BEST[key] = rep.C_best
    return _C_BEST[key]


def _conv(grid, u, samples):
    return inverse(grid, forward(grid, u) * forward(grid, samples))


def _l2(grid, u):
    return float(np.sqrt(np.sum(u**2) * grid.cell_volume))


def _l1(grid, u):
    return float(np.sum(np.abs(u)) * grid.cell_volume)


# --- frozen-field commutators ----------------------------------------------------

def commutator_error(rho: np.ndarray, phi: TestFunctionSpec, kernel: KernelSamples) -> float:
    """|| (grad phi rho) * grad w_eps - div(grad phi rho) ||_2 with sampled kernel gradients."""
    grid = kernel.grid
    gphi = phi.gradient(grid)
    flux = [g * rho for g in gphi]
    lhs = inverse(grid, sum(forward(grid, f) * gh for f, gh in zip(flux, kernel.grad_hat)))
    rhs = divergence(grid, flux)
    return _l2(grid, lhs - rhs)


def j1_term(rho: np.ndarray, kernel: KernelSamples, i: int, j: int) -> np.ndarray:
    """int rho(y) (x_i - y_i) d_j w_eps(x - y) dy."""
    grid = kernel.grid
    return _conv(grid, rho, grid.origin_coords[i] * kernel.grad[j])


@dataclass
class DominationReport:
    max_excess: float
    scale: float
    lhs_norm: float
    rhs_norm: float
    passed: bool
    limit_distance: float | None = None

    def to_dict(self) -> dict:
        return asdict(self)


def _dominated(grid, lhs, rhs, slack=1e-10):
    scale = float(np.max(np.abs(rhs))) if rhs.size else 0.0
    excess = float(np.max(np.abs(lhs) - rhs))
    return excess, scale, excess <= slack * max(scale, 1e-300)


def j1_domination(rho: np.ndarray, kernel: KernelSamples, i: int, j: int, C_best: float | None = None,
                  slack: float = 1e-10) -> DominationReport:
    """|J1_ij| <= C_best rho * w_eps * f_eps cellwise; also reports the L1 distance to -rho delta_ij."""
    grid = kernel.grid
    C = certified_constant(kernel.spec) if C_best is None else C_best
    field_ = j1_term(rho, kernel, i, j)
    rhs = C * _conv(grid, rho, double_kernel_samples(kernel))
    excess, scale, ok = _dominated(grid, field_, rhs, slack)
    target = -rho if i == j else 0.0 * rho
    return DominationReport(excess, scale, _l2(grid, field_), _l2(grid, rhs), ok, _l1(grid, field_ - target))


def j2_bound_check(rho: np.ndarray, kernel: KernelSamples, C_best: float | None = None,
                   slack: float = 1e-10) -> DominationReport:
    """int rho(y) |x-y|^2 |grad w_eps(x-y)| dy <= eps C_best rho * w_eps * f_eps cellwise."""
    grid = kernel.grid
    C = certified_constant(kernel.spec) if C_best is None else C_best
    z2 = sum(z**2 for z in grid.origin_coords)
    gnorm = np.sqrt(sum(g**2 for g in kernel.grad))
    lhs = _conv(grid, rho, z2 * gnorm)
    rhs = kernel.eps * C * _conv(grid, rho, double_kernel_samples(kernel))
    excess, scale, ok = _dominated(grid, lhs, rhs, slack)
    return DominationReport(excess, scale, _l2(grid, lhs), _l2(grid, rhs), ok)


def halving_ratios(values) -> list:
    v = list(values)
    return [a / b if b != 0 else math.inf for a, b in zip(v, v[1:])]


# --- weak form of the local equation ---------------------------------------------

@dataclass
class WeakFormResidual:
    residual: float
    normalized: float
    terms: dict


def weak_form_residual(grid: Grid, times, snapshots, phi: TestFunctionSpec) -> WeakFormResidual:
    """int rho phi |_0^T + int int (-rho d_t phi + grad rho . grad phi - rho grad Lap rho . grad phi), trapezoid in t."""
    times = np.asarray(times, dtype=float)
    if len(times) != len(snapshots) or len(times) < 2:
        raise ValueError("need at least two snapshots with matching times")
    if phi.T is not None and times[-1] > phi.T * (1 + 1e-12):
        raise ValueError(f"snapshots reach t={times[-1]:g} beyond the test function window T={phi.T:g}")
    hd = grid.cell_volume
    val = phi.value(grid)
    gphi = phi.gradient(grid)
    theta, dtheta = phi.time_window(times)
    dt_term, diff_term, tr_term = [], [], []
    for rho, th, dth in zip(snapshots, theta, dtheta):
        g = gradient(grid, rho)
        gl = grad_laplacian(grid, rho)
        dt_term.append(-float(np.sum(rho * val) * hd) * dth)
        diff_term.append(th * float(np.sum(sum(a * b for a, b in zip(g, gphi))) * hd))
        tr_term.append(-th * float(np.sum(rho * sum(a * b for a, b in zip(gl, gphi))) * hd))
    terms = {
        "boundary": float(np.sum(snapshots[-1] * val) * hd * theta[-1] - np.sum(snapshots[0] * val) * hd * theta[0]),
        "time": float(np.trapezoid(dt_term, times)),
        "diffusion": float(np.trapezoid(diff_term, times)),
        "transport": float(np.trapezoid(tr_term, times)),
    }
    res = sum(terms.values())
    scale = sum(abs(v) for v in terms.values())
    return WeakFormResidual(float(res), float(res / scale) if scale > 0 else 0.0, terms)


# --- truncation level and the d = 2 decomposition ------------------------------

@dataclass
class TruncationLevel:
    eps: float
    M: float
    residual: float


def choose_truncation_level(eps: float) -> TruncationLevel:
    """Root M > 1 of eps^2 M sqrt(log M) = 1 by bisection."""
    if not 0 < eps <= 1:
        raise ValueError(f"truncation level needs 0 < eps <= 1, got {eps}")
    g = lambda M: eps**2 * M * math.sqrt(math.log(M)) - 1.0  # noqa: E731
    lo, hi = 1.0 + 1e-6, max(eps**-4, 4.0)
    M = optimize.bisect(g, lo, hi, xtol=1e-300, rtol=4 * np.finfo(float).eps, maxiter=500)
    return TruncationLevel(float(eps), float(M), abs(g(M)))


@dataclass
class D2Decomposition:
    I1A: float
    I1B: float
    I2A: float
    I2B: float
    I3A: float
    I3B: float
    identity_error: float
    remainder_norm: float
    bound_value: float
    M: float
    eps: float

    @property
    def ratio(self) -> float:
        return self.remainder_norm / self.bound_value

    def to_dict(self) -> dict:
        return {**asdict(self), "ratio": self.ratio}


def d2_decomposition_test(rho: np.ndarray, phi: TestFunctionSpec, kernel: KernelSamples,
                          M: float | None = None) -> D2Decomposition:
    """L2 norms of the six truncation pieces of div(grad phi rho) * w_eps and of the remainder.

    I1 = (Lap phi T) * w, I2 = div(grad phi T) * w - I1, I3 = div(grad phi (rho - T)) * w
    with T = min(rho, M); their sum is div(grad phi rho) * w up to round-off.
    """
    grid = kernel.grid
    if grid.d != 2:
        raise ValueError("the truncation decomposition is two-dimensional")
    eps = kernel.eps
    if M is None:
        M = choose_truncation_level(eps).M
    if not M > 1:
        raise ValueError(f"truncation level must exceed 1, got {M}")
    T = np.minimum(rho, M)
    gphi = phi.gradient(grid)
    lphi = phi.laplacian(grid)
    what = kernel.hat
    smooth = lambda u: inverse(grid, forward(grid, u) * what)  # noqa: E731

    full = smooth(divergence(grid, [g * rho for g in gphi]))
    I1 = smooth(lphi * T)
    I2 = smooth(divergence(grid, [g * T for g in gphi])) - I1
    I3 = smooth(divergence(grid, [g * (rho - T) for g in gphi]))
    I1B = lphi * smooth(T)
    I2B = sum(g * smooth(gt) for g, gt in zip(gphi, gradient(grid, T)))
    I3B = sum(g * smooth(ge) for g, ge in zip(gphi, gradient(grid, rho - T)))
    remainder = full - I1B - sum(g * gr for g, gr in zip(gphi, gradient(grid, smooth(rho))))
    scale = _l2(grid, full) + _l2(grid, I1) + _l2(grid, I2) + _l2(grid, I3)
    bound = eps * math.sqrt(M) + 1.0 / (eps * math.sqrt(M) * math.sqrt(math.log(M)))
    return D2Decomposition(
        I1A=_l2(grid, I1 - I1B), I1B=_l2(grid, I1B), I2A=_l2(grid, I2 - I2B), I2B=_l2(grid, I2B),
        I3A=_l2(grid, I3 - I3B), I3B=_l2(grid, I3B),
        identity_error=_l2(grid, I1 + I2 + I3 - full) / max(scale, 1e-300),
        remainder_norm=_l2(grid, remainder), bound_value=bound, M=float(M), eps=float(eps))


def uniform_integrability_probe(grid: Grid, times, snapshots, eps: float) -> float:
    """|| rho 1_{rho > 1/eps} ||_{L2(t, x)} with the trapezoid rule in time."""
    vals = [float(np.sum(np.where(s > 1.0 / eps, s, 0.0) ** 2) * grid.cell_volume) for s in snapshots]
    if len(vals) == 1:
        return math.sqrt(vals[0])
    return math.sqrt(float(np.trapezoid(vals, np.asarray(times, dtype=float))))


# --- epsilon sweeps -------------------------------------------------------------

@dataclass
class SweepConfig:
    grid: Grid
    kernel: KernelSpec
    initial: InitialDataSpec = field(default_factory=InitialDataSpec)
    T: float = 0.05
    cadence: float = 0.005
    dt: float | None = None
    dt_max: float = math.inf
    stabilize_local: bool = True


@dataclass
class SweepEntry:
    eps: float
    sup_l1: float
    lp_l1: dict
    dashboard: dict
    ui_probe: float
    steps: int
    runtime: float


@dataclass
class SweepReport:
    eps: list
    entries: list
    slope: float | None
    reference_steps: int
    runtime: float

    @property
    def sup_l1(self) -> list:
        return [e.sup_l1 for e in self.entries]

    def strictly_decreasing(self) -> bool:
        d = self.sup_l1
        return all(b < a for a, b in zip(d, d[1:]))

    def rows(self) -> list:
        """(eps, sup_t L1, L1_t L1, L2_t L1, slope so far) per entry."""
        out = []
        for k, e in enumerate(self.entries):
            s = fit_slope(self.eps[: k + 1], self.sup_l1[: k + 1])
            out.append((e.eps, e.sup_l1, e.lp_l1[1], e.lp_l1[2], s))
        return out

    def to_dict(self) -> dict:
        return {"eps": self.eps, "entries": [asdict(e) for e in self.entries], "slope": self.slope,
                "reference_steps": self.reference_steps, "runtime": self.runtime}


def fit_slope(eps, dist) -> float | None:
    """Least-squares slope of log(dist) against log(eps)."""
    if len(eps) < 2:
        return None
    return float(np.polyfit(np.log(eps), np.log(dist), 1)[0])


def _trajectory(cfg: SweepConfig, eps: float, kernel: KernelSamples | None):
    params = SchemeParams(dt=cfg.dt, dt_max=cfg.dt_max, stabilize=cfg.stabilize_local and kernel is None)
    state = init_state(cfg.initial, cfg.grid, eps, kernel, params)
    t0 = time.perf_counter()
    _, traj = run(state, cfg.T, cadence=cfg.cadence, recorder=record)
    return traj, time.perf_counter() - t0


def epsilon_sweep(cfg: SweepConfig, eps_list, reference=None) -> SweepReport:
    """Distances between each nonlocal run and one local reference run on the same grid.

    Runs execute sequentially; ``reference`` may pass a precomputed local trajectory.
    """
    eps_list = [float(e) for e in eps_list]
    if any(b >= a for a, b in zip(eps_list, eps_list[1:])):
        raise ValueError("eps list must be strictly decreasing")
    kernels = [sample_kernel(cfg.kernel, e, cfg.grid) for e in eps_list]  # fails early on under-resolution
    t_start = time.perf_counter()
    ref = reference if reference is not None else _trajectory(cfg, 0.0, None)[0]
    grid = cfg.grid
    entries = []
    for eps, ker in zip(eps_list, kernels):
        traj, dt_run = _trajectory(cfg, eps, ker)
        if len(traj.times) != len(ref.times) or not np.allclose(traj.times, ref.times, rtol=0, atol=1e-12):
            raise RuntimeError("snapshot times of the sweep run and the reference differ")
        dist = [float(np.sum(np.abs(a - b)) * grid.cell_volume) for a, b in zip(traj.snapshots, ref.snapshots)]
        times = np.asarray(traj.times)
        entries.append(SweepEntry(
            eps=eps, sup_l1=max(dist), lp_l1={1: lp_time_norm(dist, 1, times), 2: lp_time_norm(dist, 2, times)},
            dashboard=estimate_dashboard(traj.records),
            ui_probe=uniform_integrability_probe(grid, traj.times, traj.snapshots, eps),
            steps=traj.steps[-1], runtime=dt_run))
        log.info("eps=%g sup L1=%.4g (%d steps, %.1fs)", eps, entries[-1].sup_l1, entries[-1].steps, dt_run)
    slope = fit_slope(eps_list, [e.sup_l1 for e in entries])
    return SweepReport(eps_list, entries, slope, ref.steps[-1], time.perf_counter() - t_start)
