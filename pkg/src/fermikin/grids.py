"""Velocity and spatial grids.

Velocity space is a uniform, cell-centered tensor grid on [-vmax, vmax]^d
with the plain product weight dv^d.  Cell-centered nodes are symmetric under
v -> -v and under coordinate permutations, which the collision and flux
modules rely on (odd moments cancel exactly, traceless tensors stay
traceless under the discrete sum).  An odd node count places a node at the
origin.

Physical space is a periodic torus [0, L)^dim sampled on a uniform grid;
derivatives are spectral.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

__all__ = ["VelocityGrid", "SpatialGrid"]


@dataclass(frozen=True)
class VelocityGrid:
    """Uniform cell-centered velocity grid on [-vmax, vmax]^d.

    Attributes
    ----------
    d : velocity dimension (2 or 3)
    n : nodes per axis
    vmax : half-width of the grid box
    """

    d: int
    n: int
    vmax: float

    def __post_init__(self):
        if self.d not in (2, 3):
            raise ValueError(f"velocity dimension must be 2 or 3, got {self.d}")
        if self.n < 4:
            raise ValueError("need at least 4 nodes per axis")
        if self.vmax <= 0:
            raise ValueError("vmax must be positive")

    @property
    def dv(self) -> float:
        return 2.0 * self.vmax / self.n

    @property
    def size(self) -> int:
        return self.n**self.d

    @property
    def weight(self) -> float:
        """Quadrature weight of a single node (cell volume)."""
        return self.dv**self.d

    @property
    def axis(self) -> np.ndarray:
        """1D node coordinates, shared by every axis."""
        return -self.vmax + (np.arange(self.n) + 0.5) * self.dv

    @property
    def nodes(self) -> np.ndarray:
        """All nodes, shape (size, d), C-order (last axis fastest)."""
        ax = self.axis
        grids = np.meshgrid(*([ax] * self.d), indexing="ij")
        return np.stack([g.ravel() for g in grids], axis=-1)

    @property
    def speed_sq(self) -> np.ndarray:
        """|v|^2 at every node, shape (size,)."""
        return np.sum(self.nodes**2, axis=1)

    def integrate(self, values: np.ndarray) -> float:
        """Quadrature of a node field over velocity space."""
        return float(np.sum(values)) * self.weight

    def moments(self, f: np.ndarray) -> tuple[float, np.ndarray, float]:
        """(mass, momentum, second moment) of a node field.

        Returns (rho, rho*u, integral of |v|^2 f); the caller centers the
        second moment if it wants pressure.
        """
        w = self.weight
        rho = float(np.sum(f)) * w
        mom = np.sum(f[:, None] * self.nodes, axis=0) * w
        en = float(np.sum(f * self.speed_sq)) * w
        return rho, mom, en


@dataclass(frozen=True)
class SpatialGrid:
    """Periodic torus [0, L)^dim on a uniform grid.

    Attributes
    ----------
    dim : spatial dimension
    shape : nodes per axis, e.g. (48, 48)
    length : period L (same in every direction)
    """

    dim: int
    shape: tuple[int, ...]
    length: float = 2.0 * np.pi

    def __post_init__(self):
        if len(self.shape) != self.dim:
            raise ValueError("shape length must equal dim")
        if any(n < 4 for n in self.shape):
            raise ValueError("need at least 4 nodes per axis")

    @property
    def size(self) -> int:
        return int(np.prod(self.shape))

    @property
    def dx(self) -> float:
        return self.length / self.shape[0]

    @property
    def cell_volume(self) -> float:
        return float(np.prod([self.length / n for n in self.shape]))

    @property
    def volume(self) -> float:
        return self.length**self.dim

    def axes(self) -> list[np.ndarray]:
        return [np.arange(n) * (self.length / n) for n in self.shape]

    def meshgrid(self) -> list[np.ndarray]:
        return np.meshgrid(*self.axes(), indexing="ij")

    def wavenumbers(self) -> list[np.ndarray]:
        """Integer-scaled angular wavenumbers per axis (2*pi/L units)."""
        scale = 2.0 * np.pi / self.length
        return [np.fft.fftfreq(n, d=1.0 / n) * scale for n in self.shape]

    def gradient(self, field: np.ndarray) -> np.ndarray:
        """Spectral gradient; returns shape (dim,) + field.shape."""
        fh = np.fft.fftn(field)
        ks = self.wavenumbers()
        out = np.empty((self.dim,) + field.shape)
        for ax in range(self.dim):
            shape = [1] * self.dim
            shape[ax] = self.shape[ax]
            k = ks[ax].reshape(shape)
            out[ax] = np.real(np.fft.ifftn(1j * k * fh))
        return out

    def divergence(self, vec: np.ndarray) -> np.ndarray:
        """Spectral divergence of a field with leading component axis."""
        out = np.zeros(self.shape)
        ks = self.wavenumbers()
        for ax in range(self.dim):
            fh = np.fft.fftn(vec[ax])
            shape = [1] * self.dim
            shape[ax] = self.shape[ax]
            k = ks[ax].reshape(shape)
            out += np.real(np.fft.ifftn(1j * k * fh))
        return out

    def mean(self, field: np.ndarray) -> float:
        return float(np.mean(field))

    def integrate(self, field: np.ndarray) -> float:
        return float(np.mean(field) * self.volume)
