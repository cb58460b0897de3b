"""Pseudo-spectral operators on the periodic box.

The chemical equation 0 = Δv - λv + μu is inverted mode by mode with the exact
symbol μ/(λ + |k|²).  Diffusion of u uses the exact exponential of the
three-point Laplacian (still diagonal in Fourier space), whose kernel is
nonnegative; the spectral heat kernel is not.
"""

from __future__ import annotations

from functools import lru_cache

import numpy as np
import scipy.fft as sfft

from .fields import Grid, ScalarField, VectorField


class _Spectral:
    """Wavenumber tables for one grid (rfftn layout: last axis halved)."""

    def __init__(self, grid: Grid):
        self.grid = grid
        h, n, d = grid.h, grid.n, grid.dim
        full = 2 * np.pi * sfft.fftfreq(n, d=h)
        half = 2 * np.pi * sfft.rfftfreq(n, d=h)
        ks = []
        for axis in range(d):
            k = half if axis == d - 1 else full
            shape = [1] * d
            shape[axis] = k.size
            ks.append(k.reshape(shape))
        self.k = ks
        self.k2 = sum(k ** 2 for k in ks)
        # three-point Laplacian symbol (nonpositive)
        self.fd_symbol = -sum((4.0 / h ** 2) * np.sin(k * h / 2) ** 2 for k in ks)
        nyq = np.pi / h
        # odd derivatives drop the Nyquist mode
        self.ik = [np.where(np.isclose(np.abs(k), nyq), 0.0, 1j * k) for k in ks]
        self.ik_face = [ik * np.exp(0.5j * k * h) for ik, k in zip(self.ik, ks)]

    def fwd(self, a):
        return sfft.rfftn(a, axes=tuple(range(self.grid.dim)))

    def inv(self, a):
        return sfft.irfftn(a, s=self.grid.shape, axes=tuple(range(self.grid.dim)))


@lru_cache(maxsize=32)
def spectral(grid: Grid) -> _Spectral:
    return _Spectral(grid)


def helmholtz_values(u: np.ndarray, grid: Grid, lam: float, mu: float) -> np.ndarray:
    sp = spectral(grid)
    return sp.inv(mu * sp.fwd(u) / (lam + sp.k2))


def solve_helmholtz(u: ScalarField, params) -> ScalarField:
    """Return v solving Δv - λv + μu = 0 on the periodic box."""
    if not u.is_finite():
        raise ValueError("non-finite values in the density field")
    if not params.lam > 0:
        raise ValueError("lambda must be positive")
    return ScalarField(helmholtz_values(u.values, u.grid, params.lam, params.mu), u.grid)


def gradient(v: ScalarField) -> VectorField:
    """Spectral gradient at the grid nodes."""
    sp = spectral(v.grid)
    vh = sp.fwd(v.values)
    return VectorField(tuple(ScalarField(sp.inv(ik * vh), v.grid) for ik in sp.ik))


def gradient_values(v: np.ndarray, grid: Grid) -> list[np.ndarray]:
    sp = spectral(grid)
    vh = sp.fwd(v)
    return [sp.inv(ik * vh) for ik in sp.ik]


def face_gradient_values(vh: np.ndarray, grid: Grid) -> list[np.ndarray]:
    """∂v/∂x_d at the faces x_j + h/2 along each axis, from the transform vh."""
    sp = spectral(grid)
    return [sp.inv(ik * vh) for ik in sp.ik_face]


def spectral_laplacian(v: np.ndarray, grid: Grid) -> np.ndarray:
    sp = spectral(grid)
    return sp.inv(-sp.k2 * sp.fwd(v))


def fd_laplacian(u: np.ndarray, grid: Grid) -> np.ndarray:
    """Three-point Laplacian (the generator of the diffusion sub-step)."""
    h2 = grid.h ** 2
    out = np.zeros_like(u)
    for axis in range(grid.dim):
        out += (np.roll(u, -1, axis) - 2 * u + np.roll(u, 1, axis)) / h2
    return out


def heat_step(u: np.ndarray, grid: Grid, tau: float, shift: float = 0.0) -> np.ndarray:
    """exp(tau (Δ_h - shift)) u with Δ_h the three-point Laplacian."""
    sp = spectral(grid)
    return sp.inv(np.exp(tau * (sp.fd_symbol - shift)) * sp.fwd(u))


def helmholtz_residual(u: ScalarField, v: ScalarField, params) -> float:
    """Sup norm of Δ_h v - λv + μu with the spectral Laplacian."""
    r = spectral_laplacian(v.values, v.grid) - params.lam * v.values + params.mu * u.values
    return float(np.abs(r).max())


def kernel_negative_mass(grid: Grid, lam: float) -> float:
    """Total negative mass of the discrete Green's function of (λ - Δ)^{-1}.

    Bounds how far the spectral solve can undershoot zero (and overshoot μ‖u‖/λ)
    for nonnegative u: v >= -μ‖u‖·mass.
    """
    delta = np.zeros(grid.shape)
    delta[(0,) * grid.dim] = 1.0 / grid.h ** grid.dim
    g = helmholtz_values(delta, grid, lam, 1.0)
    return float(-np.minimum(g, 0).sum() * grid.h ** grid.dim)
