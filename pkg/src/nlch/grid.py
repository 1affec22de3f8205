"""Periodic grids, spectral transforms and spectral differential operators.

Transform convention: the forward transform multiplies the plain DFT by the
cell volume ``h**d`` so that the zero mode equals the discrete integral; the
inverse divides by ``h**d`` accordingly (equivalently ``n**d / L**d``).

Odd-order spectral derivatives drop the Nyquist wavenumber, and the Laplacian
is defined as ``divergence(gradient(.))`` so that discrete energy identities
close exactly.
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np


class GridMismatchError(ValueError):
    pass


@dataclass(frozen=True)
class Grid:
    """Uniform periodic lattice ``[0, L)^d`` with ``n`` nodes per axis."""

    d: int
    n: int
    L: float

    def __post_init__(self):
        if self.d not in (1, 2, 3):
            raise ValueError(f"dimension must be 1, 2 or 3, got {self.d}")
        if self.n < 8 or self.n & (self.n - 1):
            raise ValueError(f"n must be a power of two >= 8, got {self.n}")
        if not self.L > 0:
            raise ValueError(f"side length must be positive, got {self.L}")
        object.__setattr__(self, "L", float(self.L))

    @property
    def h(self) -> float:
        return self.L / self.n

    @property
    def shape(self) -> tuple[int, ...]:
        return (self.n,) * self.d

    @property
    def cell_volume(self) -> float:
        return self.h**self.d

    @property
    def volume(self) -> float:
        return self.L**self.d

    @property
    def center(self) -> float:
        return self.L / 2

    def wavenumbers_1d(self) -> np.ndarray:
        """(2 pi / L) k for integer k in [-n/2, n/2), in FFT order."""
        return 2 * np.pi * np.fft.fftfreq(self.n, d=self.h)

    @cached_property
    def _spectral(self):
        # rfft layout: last axis keeps nonnegative frequencies only
        full = 2 * np.pi * np.fft.fftfreq(self.n, d=self.h)
        half = 2 * np.pi * np.fft.rfftfreq(self.n, d=self.h)
        axes_k = [full] * (self.d - 1) + [half]
        ks = np.meshgrid(*axes_k, indexing="ij", sparse=True)
        # Nyquist removed for odd derivatives
        nyq = np.pi / self.h
        kodd = [np.where(np.isclose(np.abs(k), nyq), 0.0, k) for k in ks]
        ksq = sum(k**2 for k in kodd)
        # symbol of the standard (2d+1)-point finite-difference Laplacian
        lap_fd = sum((2 - 2 * np.cos(k * self.h)) / self.h**2 for k in ks)
        return kodd, np.broadcast_to(ksq, self.spectral_shape).copy(), np.broadcast_to(lap_fd, self.spectral_shape).copy()

    @property
    def spectral_shape(self) -> tuple[int, ...]:
        return (self.n,) * (self.d - 1) + (self.n // 2 + 1,)

    @property
    def k_vectors(self) -> list[np.ndarray]:
        return self._spectral[0]

    @property
    def k_squared(self) -> np.ndarray:
        return self._spectral[1]

    @property
    def fd_laplacian_symbol(self) -> np.ndarray:
        """Nonnegative symbol lambda_h(k) with -Delta_h e^{ikx} = lambda_h e^{ikx}."""
        return self._spectral[2]

    @cached_property
    def coords(self) -> list[np.ndarray]:
        """Node coordinates x_j = j h along each axis (open mesh)."""
        x = np.arange(self.n) * self.h
        return np.meshgrid(*([x] * self.d), indexing="ij", sparse=True)

    @cached_property
    def centered_coords(self) -> list[np.ndarray]:
        """Minimal-image displacement of every node from the domain center."""
        return [_wrap(x - self.center, self.L) for x in self.coords]

    @cached_property
    def origin_coords(self) -> list[np.ndarray]:
        """Minimal-image displacement from the origin node (kernel layout)."""
        return [_wrap(x, self.L) for x in self.coords]

    def radius_from_center(self) -> np.ndarray:
        return np.sqrt(sum(x**2 for x in self.centered_coords))

    def check(self, u: np.ndarray) -> np.ndarray:
        if u.shape != self.shape:
            raise GridMismatchError(f"field shape {u.shape} does not match grid {self.shape}")
        if not np.all(np.isfinite(u)):
            raise ValueError("field has non-finite entries")
        return u


def _wrap(x, L):
    return (x + L / 2) % L - L / 2


def make_grid(d: int, n: int, L: float) -> Grid:
    return Grid(d, n, L)


# --- transforms -----------------------------------------------------------

def forward(grid: Grid, u: np.ndarray) -> np.ndarray:
    return np.fft.rfftn(grid.check(u)) * grid.cell_volume


def inverse(grid: Grid, uhat: np.ndarray) -> np.ndarray:
    return np.fft.irfftn(uhat, s=grid.shape, axes=tuple(range(grid.d))) / grid.cell_volume


def integral(grid: Grid, u: np.ndarray) -> float:
    return float(np.sum(u) * grid.cell_volume)


def inner(grid: Grid, u: np.ndarray, v: np.ndarray) -> float:
    return float(np.sum(u * v) * grid.cell_volume)


def spectral_inner(grid: Grid, uhat: np.ndarray, vhat: np.ndarray) -> float:
    """Plancherel pairing of two rfft-layout spectra."""
    w = np.full(grid.spectral_shape[-1], 2.0)
    w[0] = 1.0
    if grid.n % 2 == 0:
        w[-1] = 1.0
    s = np.sum((uhat * np.conj(vhat)).real * w)
    return float(s / grid.volume)


# --- convolution ----------------------------------------------------------

def convolve(u: np.ndarray, kernel) -> np.ndarray:
    """Periodic convolution ``u * k`` with quadrature weight ``h**d``."""
    grid = kernel.grid
    return inverse(grid, forward(grid, u) * kernel.hat)


def convolve_samples(grid: Grid, u: np.ndarray, k: np.ndarray) -> np.ndarray:
    """Convolution with raw kernel samples laid out around the origin node."""
    return inverse(grid, forward(grid, u) * forward(grid, k))


# --- spectral derivatives -------------------------------------------------

def gradient(grid: Grid, u: np.ndarray) -> list[np.ndarray]:
    uhat = forward(grid, u)
    return [inverse(grid, 1j * k * uhat) for k in grid.k_vectors]


def divergence(grid: Grid, v) -> np.ndarray:
    if len(v) != grid.d:
        raise GridMismatchError(f"vector field has {len(v)} components, grid has d={grid.d}")
    acc = 0
    for k, comp in zip(grid.k_vectors, v):
        acc = acc + 1j * k * forward(grid, comp)
    return inverse(grid, acc)


def laplacian(grid: Grid, u: np.ndarray) -> np.ndarray:
    return inverse(grid, -grid.k_squared * forward(grid, u))


def grad_laplacian(grid: Grid, u: np.ndarray) -> list[np.ndarray]:
    uhat = -grid.k_squared * forward(grid, u)
    return [inverse(grid, 1j * k * uhat) for k in grid.k_vectors]


# --- norms ----------------------------------------------------------------

def lp_norm(grid: Grid, u: np.ndarray, p: float = 2) -> float:
    if p < 1:
        raise ValueError(f"Lebesgue exponent must be >= 1, got {p}")
    a = np.abs(grid.check(u))
    if np.isinf(p):
        return float(a.max())
    return float((np.sum(a**p) * grid.cell_volume) ** (1.0 / p))


def lp_time_norm(values, p: float, dt) -> float:
    """Discrete L^p in time of a series of spatial norms.

    ``dt`` is either a uniform step or the array of sample times; in the latter
    case the trapezoid rule is used.
    """
    if p < 1:
        raise ValueError(f"Lebesgue exponent must be >= 1, got {p}")
    v = np.abs(np.asarray(values, dtype=float))
    if np.isinf(p):
        return float(v.max())
    if np.ndim(dt) == 0:
        return float((np.sum(v**p) * dt) ** (1.0 / p))
    t = np.asarray(dt, dtype=float)
    if len(t) == 1:
        return 0.0
    return float(np.trapezoid(v**p, t) ** (1.0 / p))


# --- snapshot files -------------------------------------------------------

SNAPSHOT_MAGIC = "NLCH-SNAPSHOT-1"


def write_snapshot(path, grid: Grid, u: np.ndarray, time: float, epsilon: float) -> None:
    """One ASCII header line, then n**d little-endian float64 values, row-major."""
    header = f"{SNAPSHOT_MAGIC} d={grid.d} n={grid.n} L={grid.L!r} time={float(time)!r} epsilon={float(epsilon)!r}\n"
    with open(path, "wb") as fh:
        fh.write(header.encode("ascii"))
        fh.write(np.ascontiguousarray(grid.check(u), dtype="<f8").tobytes())


def read_snapshot(path):
    with open(path, "rb") as fh:
        header = fh.readline().decode("ascii").split()
        if not header or header[0] != SNAPSHOT_MAGIC:
            raise ValueError(f"{path}: not a snapshot file")
        meta = dict(item.split("=", 1) for item in header[1:])
        grid = Grid(int(meta["d"]), int(meta["n"]), float(meta["L"]))
        data = np.frombuffer(fh.read(), dtype="<f8")
    if data.size != grid.n**grid.d:
        raise ValueError(f"{path}: expected {grid.n ** grid.d} values, found {data.size}")
    return grid, data.reshape(grid.shape).copy(), float(meta["time"]), float(meta["epsilon"])
