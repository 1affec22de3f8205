"""Mollifier families, their grid samples, and certification of the kernel bound.

Every kernel here is radial: it is described by a profile ``w(r)`` and its
derivative ``w'(r)``, so ``grad w(x) = w'(|x|) x / |x|``. Radial profiles are
automatically even.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property
from math import gamma, pi
from typing import Callable

import numpy as np
from scipy import integrate, optimize

from .grid import Grid, forward

FAMILIES = ("bump", "gaussian", "carrillo_exponential")

# minimum eps/h per family; the compactly supported bump has steep edges
MIN_RESOLUTION = {"bump": 4.0, "gaussian": 1.5, "carrillo_exponential": 1.5, "custom": 4.0}


class KernelError(ValueError):
    pass


def sphere_area(d: int) -> float:
    return 2 * pi ** (d / 2) / gamma(d / 2)


@dataclass(frozen=True)
class KernelSpec:
    """Radial kernel ``w(x) = c * profile(|x|)`` normalized to unit mass in R^d.

    ``comparison`` is the optional kernel ``f`` paired with ``w`` in the
    inequality ``(|x| + |x|^2) |grad w(x)| <= C (w * f)(x)``.
    """

    family: str
    d: int
    profile: Callable[[np.ndarray], np.ndarray] = field(repr=False)
    dprofile: Callable[[np.ndarray], np.ndarray] = field(repr=False)
    support: float = np.inf
    normalize: bool = True
    comparison: "KernelSpec | None" = field(default=None, repr=False)

    @cached_property
    def mass_constant(self) -> float:
        if not self.normalize:
            return 1.0
        upper = self.support if np.isfinite(self.support) else np.inf
        m, _ = integrate.quad(lambda r: r ** (self.d - 1) * float(self.profile(np.asarray(r))),
                              0.0, upper, limit=200, epsabs=0, epsrel=1e-13)
        return 1.0 / (sphere_area(self.d) * m)

    def radial(self, r):
        r = np.asarray(r, dtype=float)
        return self.mass_constant * self.profile(r)

    def radial_derivative(self, r):
        r = np.asarray(r, dtype=float)
        return self.mass_constant * self.dprofile(r)

    def __call__(self, x) -> np.ndarray:
        """Evaluate at points ``x`` with trailing axis of length d."""
        x = np.asarray(x, dtype=float)
        return self.radial(np.linalg.norm(x, axis=-1))

    def gradient(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        r = np.linalg.norm(x, axis=-1, keepdims=True)
        with np.errstate(invalid="ignore", divide="ignore"):
            unit = np.where(r > 0, x / r, 0.0)
        return self.radial_derivative(r) * unit

    @property
    def min_resolution(self) -> float:
        return MIN_RESOLUTION.get(self.family, MIN_RESOLUTION["custom"])


# --- built-in families ----------------------------------------------------

def _bump_profile(r):
    r = np.asarray(r, dtype=float)
    out = np.zeros_like(r)
    inside = r < 1
    out[inside] = np.exp(-1.0 / (1.0 - r[inside] ** 2))
    return out


def _bump_dprofile(r):
    r = np.asarray(r, dtype=float)
    out = np.zeros_like(r)
    inside = r < 1
    ri = r[inside]
    s = 1.0 - ri**2
    out[inside] = np.exp(-1.0 / s) * (-2.0 * ri / s**2)
    return out


def _gauss_profile(r):
    return np.exp(-0.5 * np.asarray(r, dtype=float) ** 2)


def _gauss_dprofile(r):
    r = np.asarray(r, dtype=float)
    return -r * np.exp(-0.5 * r**2)


def _carrillo_profile(r, a=1.0):
    return np.exp(-np.sqrt(1.0 + np.asarray(r, dtype=float) ** 2 / a))


def _carrillo_dprofile(r, a=1.0):
    r = np.asarray(r, dtype=float)
    s = np.sqrt(1.0 + r**2 / a)
    return -np.exp(-s) * r / (a * s)


def bump(d: int) -> KernelSpec:
    """exp(-1/(1-|x|^2)) on the unit ball, normalized; paired with f = w."""
    spec = KernelSpec("bump", d, _bump_profile, _bump_dprofile, support=1.0)
    return _with_comparison(spec, spec)


def gaussian(d: int) -> KernelSpec:
    spec = KernelSpec("gaussian", d, _gauss_profile, _gauss_dprofile)
    return _with_comparison(spec, spec)


def carrillo_exponential(d: int) -> KernelSpec:
    """w ~ exp(-sqrt(1+|x|^2)) paired with the wider f = exp(-sqrt(1+|x|^2/3)).

    ``f`` is kept unnormalized, exactly as written; only integrability matters.
    """
    spec = KernelSpec("carrillo_exponential", d, _carrillo_profile, _carrillo_dprofile)
    f = KernelSpec("carrillo_f", d, lambda r: _carrillo_profile(r, 3.0),
                   lambda r: _carrillo_dprofile(r, 3.0), normalize=False)
    return _with_comparison(spec, f)


def _with_comparison(spec: KernelSpec, f: KernelSpec) -> KernelSpec:
    if f is spec:
        f = KernelSpec(spec.family, spec.d, spec.profile, spec.dprofile, spec.support, spec.normalize)
    return KernelSpec(spec.family, spec.d, spec.profile, spec.dprofile, spec.support,
                      spec.normalize, comparison=f)


def custom(d: int, profile, dprofile, support=np.inf, comparison: KernelSpec | None = None) -> KernelSpec:
    return KernelSpec("custom", d, profile, dprofile, support, comparison=comparison)


def make_kernel(family: str, d: int, f_family: str | None = None) -> KernelSpec:
    builders = {"bump": bump, "gaussian": gaussian, "carrillo_exponential": carrillo_exponential}
    if family not in builders:
        raise KernelError(f"unknown kernel family {family!r}; choose from {FAMILIES}")
    spec = builders[family](d)
    if f_family is not None and f_family != family:
        f = builders[f_family](d)
        spec = KernelSpec(spec.family, d, spec.profile, spec.dprofile, spec.support, comparison=f)
    return spec


# --- samples --------------------------------------------------------------

@dataclass
class KernelSamples:
    """``w_eps = eps^-d w(x/eps)`` on a grid, renormalized to unit discrete mass."""

    grid: Grid
    eps: float
    spec: KernelSpec
    samples: np.ndarray
    grad: list
    f_samples: np.ndarray | None
    renormalization: float

    @cached_property
    def hat(self) -> np.ndarray:
        # even samples have a real spectrum; dropping the roundoff imaginary
        # part keeps the convolution exactly self-adjoint
        return forward(self.grid, self.samples).real

    @cached_property
    def grad_hat(self) -> list:
        return [forward(self.grid, g) for g in self.grad]

    @cached_property
    def f_hat(self) -> np.ndarray:
        if self.f_samples is None:
            raise KernelError("kernel carries no comparison kernel f")
        return forward(self.grid, self.f_samples).real

    @property
    def mass(self) -> float:
        return float(self.samples.sum() * self.grid.cell_volume)


def check_resolution(spec: KernelSpec, eps: float, grid: Grid) -> None:
    if not eps > 0:
        raise KernelError(f"kernel scale must be positive, got {eps}")
    need = spec.min_resolution * grid.h
    if eps < need * (1 - 1e-12):
        raise KernelError(
            f"resolution guard: eps={eps:g} < {spec.min_resolution:g} h = {need:g} "
            f"for the {spec.family} kernel")
    if np.isfinite(spec.support) and spec.support * eps > grid.L / 4:
        raise KernelError(f"support guard: kernel radius {spec.support * eps:g} exceeds L/4 = {grid.L / 4:g}")


def sample_kernel(spec: KernelSpec, eps: float, grid: Grid, check: bool = True) -> KernelSamples:
    if check:
        check_resolution(spec, eps, grid)
    if spec.d != grid.d:
        raise KernelError(f"kernel dimension {spec.d} differs from grid dimension {grid.d}")
    z = grid.origin_coords
    r = np.sqrt(sum(c**2 for c in z))
    raw = spec.radial(r / eps) / eps**grid.d
    raw = np.broadcast_to(raw, grid.shape).astype(float)
    mass = raw.sum() * grid.cell_volume
    c = 1.0 / mass
    dr = spec.radial_derivative(r / eps) / eps ** (grid.d + 1)
    with np.errstate(invalid="ignore", divide="ignore"):
        grad = [np.broadcast_to(c * np.where(r > 0, dr * zi / r, 0.0), grid.shape).copy() for zi in z]
    fs = None
    if spec.comparison is not None:
        fs = np.broadcast_to(spec.comparison.radial(r / eps) / eps**grid.d, grid.shape).astype(float)
    return KernelSamples(grid, float(eps), spec, raw * c, grad, fs, c)


def self_convolution(spec: KernelSpec, eps: float, grid: Grid) -> KernelSamples:
    """Samples of ``w_eps * w_eps`` (discrete periodic convolution of the samples)."""
    k = sample_kernel(spec, eps, grid)
    from .grid import inverse

    samples = inverse(grid, k.hat * k.hat)
    out = KernelSamples(grid, k.eps, spec, samples, [], None, k.renormalization)
    out.__dict__["hat"] = k.hat * k.hat
    return out


def moment_identity_check(samples: KernelSamples, i: int, j: int) -> float:
    """Discrete ``int z_i d_j w(z) dz``; scale invariant, so eps drops out."""
    g = samples.grid
    z = g.origin_coords[i]
    return float(np.sum(z * samples.grad[j]) * g.cell_volume)


def lattice_moments(spec: KernelSpec, resolution: float, rel_tail: float = 1e-12) -> np.ndarray:
    """Matrix of ``sum z_i d_j w(z) h^d`` over the lattice ``h Z^d`` with ``h = 1/resolution``.

    Samples are renormalized to unit discrete mass as in :func:`sample_kernel`.
    The lattice is cut at the radius where the kernel tail drops below
    ``rel_tail`` and summed in slabs, so no periodic grid is involved.
    """
    d = spec.d
    h = 1.0 / resolution
    R = _tail_radius(spec, rel_tail) if not np.isfinite(spec.support) else float(spec.support)
    m = int(np.ceil(R / h))
    axis = np.arange(-m, m + 1) * h
    rest = list(np.meshgrid(*([axis] * (d - 1)), indexing="ij")) if d > 1 else []
    mass = 0.0
    mom = np.zeros((d, d))
    for x0 in axis:
        z = [np.full(rest[0].shape if d > 1 else (), x0)] + rest
        r = np.sqrt(sum(c**2 for c in z))
        mass += float(np.sum(spec.radial(r)))
        dr = spec.radial_derivative(r)
        with np.errstate(invalid="ignore", divide="ignore"):
            g = [np.where(r > 0, dr * c / r, 0.0) for c in z]
        for i in range(d):
            for j in range(d):
                mom[i, j] += float(np.sum(z[i] * g[j]))
    return mom / mass


# --- certification of the kernel bound -------------------------------------

@dataclass
class CertificationReport:
    C_best: float
    worst_x: list
    pass_: bool
    C_coarse: float
    C_fine: float
    agreement: float
    decay_table: list
    decay_pass: bool
    message: str = ""

    def to_dict(self) -> dict:
        return {
            "C_best": self.C_best,
            "worst_x": self.worst_x,
            "pass": self.pass_,
            "C_coarse": self.C_coarse,
            "C_fine": self.C_fine,
            "agreement": self.agreement,
            "decay_table": self.decay_table,
            "decay_pass": self.decay_pass,
            "message": self.message,
        }


def _tail_radius(spec: KernelSpec, rel=1e-17) -> float:
    """Radius beyond which ``r^(d-1) w(r)`` is negligible."""
    if np.isfinite(spec.support):
        return float(spec.support)
    peak = max(float(np.max(np.abs(spec.radial(np.linspace(0, 5, 501))))), 1e-300)
    r = 1.0
    while r < 1e4 and r ** (spec.d - 1) * abs(float(spec.radial(r))) > rel * peak:
        r *= 1.25
    return r


def radial_convolution(w: KernelSpec, f: KernelSpec, r, n_quad: int = 1200, n_angle: int = 256) -> np.ndarray:
    """``(w * f)(r e_1)`` in R^d for radial ``w`` and ``f`` by product quadrature.

    The radial variable of ``w`` uses Gauss-Legendre nodes on [0, S]; the
    angular average of ``f`` uses the periodic trapezoid rule (d = 2) or the
    closed-form shell integral (d = 3).
    """
    d = w.d
    r = np.atleast_1d(np.asarray(r, dtype=float))
    S = _tail_radius(w)
    nodes, weights = np.polynomial.legendre.leggauss(n_quad)
    s = 0.5 * S * (nodes + 1)
    ws = 0.5 * S * weights * s ** (d - 1) * w.radial(s)
    out = np.empty_like(r)
    if d == 1:
        for m, rm in enumerate(r):
            out[m] = np.sum(ws * (f.radial(np.abs(rm - s)) + f.radial(rm + s)))
        return out
    if d == 2:
        phi = (np.arange(n_angle) + 0.5) * (2 * pi / n_angle)
        cphi = np.cos(phi)
        for m, rm in enumerate(r):
            t = np.sqrt(np.maximum(rm**2 + s[:, None] ** 2 - 2 * rm * s[:, None] * cphi[None, :], 0.0))
            avg = f.radial(t).mean(axis=1) * (2 * pi)
            out[m] = np.sum(ws * avg)
        return out
    # d == 3: int_{S^2} f(|r e1 - s theta|) = (2 pi / (r s)) int_{|r-s|}^{r+s} t f(t) dt
    tn, tw = np.polynomial.legendre.leggauss(64)
    for m, rm in enumerate(r):
        if rm == 0:
            avg = 4 * pi * f.radial(s)
        else:
            a = np.abs(rm - s)[:, None]
            b = (rm + s)[:, None]
            t = a + (b - a) * 0.5 * (tn[None, :] + 1)
            shell = np.sum(0.5 * (b - a) * tw[None, :] * t * f.radial(t), axis=1)
            with np.errstate(invalid="ignore", divide="ignore"):
                avg = np.where(s > 0, 2 * pi * shell / (rm * s), 4 * pi * f.radial(rm))
        out[m] = np.sum(ws * avg)
    return out


def _ratio_profile(w, f, r, n_quad):
    num = (r + r**2) * np.abs(w.radial_derivative(r))
    den = radial_convolution(w, f, r, n_quad=n_quad)
    return num, den


def certify_assumption(spec: KernelSpec, f: KernelSpec | None = None, R_max: float = 8.0,
                       resolution: int = 400, decay_radii=None) -> CertificationReport:
    """Smallest C with ``(|x|+|x|^2)|grad w| <= C (w*f)`` sampled on ``|x| <= R_max``.

    Two nested radial samplings (``resolution`` and ``2*resolution`` points,
    with matching quadrature refinement) must agree within 5%; the best sample
    is then polished with a bounded scalar maximization.
    """
    f = f if f is not None else spec.comparison
    if f is None:
        raise KernelError("certification needs a comparison kernel f")
    estimates = []
    for level, (m, nq) in enumerate([(resolution, 800), (2 * resolution, 1600)]):
        r = np.linspace(0.0, R_max, m + 1)
        num, den = _ratio_profile(spec, f, r, nq)
        bad = (num > 0) & ~(den > 0)
        if np.any(bad):
            x0 = float(r[np.argmax(bad)])
            return CertificationReport(np.inf, _point(x0, spec.d), False, np.inf, np.inf, np.inf, [], False,
                                       f"denominator vanishes where numerator is positive at |x|={x0:g}")
        with np.errstate(invalid="ignore", divide="ignore"):
            ratio = np.where(num > 0, num / den, 0.0)
        k = int(np.argmax(ratio))
        estimates.append((float(ratio[k]), float(r[k]), r))
    (c0, _, _), (c1, r1, rgrid) = estimates
    agreement = abs(c1 - c0) / max(c1, 1e-300)
    # polish around the fine-grid maximizer
    dr = rgrid[1] - rgrid[0]
    lo, hi = max(r1 - dr, 0.0), min(r1 + dr, R_max)

    def neg(x):
        n, dd = _ratio_profile(spec, f, np.array([x]), 1600)
        return -(n[0] / dd[0]) if n[0] > 0 else 0.0

    res = optimize.minimize_scalar(neg, bounds=(lo, hi), method="bounded", options={"xatol": 1e-10})
    C = c1
    worst = r1
    if -res.fun > C:
        C, worst = float(-res.fun), float(res.x)
    radii = decay_radii if decay_radii is not None else default_decay_radii(R_max)
    table = check_decay(spec, radii)
    decay_ok = decay_passes([v for _, v in table])
    ok = bool(np.isfinite(C)) and agreement <= 0.05
    msg = "" if agreement <= 0.05 else f"resolutions disagree by {agreement:.3%}"
    return CertificationReport(C, _point(worst, spec.d), ok, c0, c1, agreement,
                               [[float(a), float(b)] for a, b in table], decay_ok, msg)


def _point(r: float, d: int) -> list:
    return [float(r)] + [0.0] * (d - 1)


def default_decay_radii(R_max: float = 8.0) -> list:
    return [1.0, 2.0, 5.0, 10.0, 20.0, 40.0]


def check_decay(spec: KernelSpec, radii) -> list:
    """Rows ``(R, sup_{|x|=R} R^d w(x))``; radial kernels make the sup trivial."""
    radii = [float(R) for R in radii]
    if any(b <= a for a, b in zip(radii, radii[1:])):
        raise KernelError("decay radii must be strictly increasing")
    return [(R, float(R**spec.d * spec.radial(R))) for R in radii]


def decay_passes(values, rel_tol: float = 1e-3) -> bool:
    """Eventually nonincreasing from its peak and ending near zero."""
    v = np.asarray(values, dtype=float)
    if v.size == 0:
        return False
    peak = v.max()
    if peak <= 0:
        return True
    k = int(np.argmax(v))
    tail = v[k:]
    return bool(np.all(np.diff(tail) <= 0) and tail[-1] <= rel_tol * peak)
