"""Incompressible Euler reference solver on the 2D torus.

Evolves the limit system: divergence-free velocity by a vorticity
streamfunction pseudo-spectral method (RK4, 2/3-rule dealiasing), plus two
passively transported scalars tied together by the Boussinesq relation
b0*abar + tau0*bbar = const.  Pressure is diagnosed from the projection,
never evolved.  2D only: the reference target has to be something we can
trust at desk resolution, and 2D Euler is globally well-posed.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .grids import SpatialGrid

__all__ = [
    "EulerState",
    "CFLError",
    "ResolutionWarning",
    "boussinesq_project",
    "make_state",
    "euler_step",
    "run_euler",
    "diagnose_pressure",
]


class CFLError(RuntimeError):
    """Advective CFL number too large for the RK4 stability region."""


class ResolutionWarning(UserWarning):
    """Enstrophy is piling up near the dealiasing cutoff."""


def _spectral_ops(grid: SpatialGrid):
    """Wavenumber arrays, inverse Laplacian, and the 2/3 dealias mask.

    First-derivative symbols zero the unpaired Nyquist frequency on even
    axes so real fields stay conjugate-symmetric; the dealias mask removes
    those modes anyway, but the rotation u = (-dy psi, dx psi) is applied
    before masking.
    """
    ks = []
    for ax in range(2):
        k = np.array(grid.wavenumbers()[ax], dtype=float, copy=True)
        n = grid.shape[ax]
        if n % 2 == 0:
            k[n // 2] = 0.0
        shape = [1, 1]
        shape[ax] = n
        ks.append(k.reshape(shape))
    kx, ky = ks
    k2 = kx**2 + ky**2
    inv_k2 = np.zeros_like(k2)
    nz = k2 > 0
    inv_k2[nz] = 1.0 / k2[nz]
    # 2/3 rule: keep integer modes strictly below n/3 per axis
    scale = 2.0 * np.pi / grid.length
    mask = np.ones(grid.shape, dtype=bool)
    for ax in range(2):
        n = grid.shape[ax]
        m = np.abs(np.fft.fftfreq(n, d=1.0 / n)) <= n // 3
        shape = [1, 1]
        shape[ax] = n
        mask &= m.reshape(shape)
    return kx, ky, inv_k2, mask, scale


@dataclass
class EulerState:
    """Limit-system state: transported scalars, velocity, diagnosed pressure.

    ubar has a trailing component axis, shape grid.shape + (2,).  The
    invariants (spectrally divergence-free ubar, spatially constant
    b0*abar + tau0*bbar) are the caller's responsibility on construction;
    make_state imposes them on arbitrary input fields.
    """

    grid: SpatialGrid
    abar: np.ndarray
    ubar: np.ndarray
    bbar: np.ndarray
    a0: float
    b0: float
    tau0: float
    pressure: Optional[np.ndarray] = None
    time: float = 0.0

    def __post_init__(self):
        if self.grid.dim != 2:
            raise ValueError("the reference solver is 2D only")
        if self.ubar.shape != self.grid.shape + (2,):
            raise ValueError("ubar must have a trailing component axis")
        if self.abar.shape != self.grid.shape or self.bbar.shape != self.grid.shape:
            raise ValueError("scalar fields must match the grid shape")

    def divergence_norm(self) -> float:
        div = self.grid.divergence(np.moveaxis(self.ubar, -1, 0))
        return float(np.max(np.abs(div)))

    def boussinesq_deviation(self) -> float:
        s = self.b0 * self.abar + self.tau0 * self.bbar
        return float(np.max(np.abs(s - s.mean())))

    def vorticity(self) -> np.ndarray:
        g = _spectral_ops(self.grid)
        kx, ky = g[0], g[1]
        ux_h = np.fft.fft2(self.ubar[..., 0])
        uy_h = np.fft.fft2(self.ubar[..., 1])
        return np.real(np.fft.ifft2(1j * kx * uy_h - 1j * ky * ux_h))

    def kinetic_energy(self) -> float:
        return self.grid.integrate(np.sum(self.ubar**2, axis=-1))

    def copy(self) -> "EulerState":
        return EulerState(
            self.grid,
            self.abar.copy(),
            self.ubar.copy(),
            self.bbar.copy(),
            self.a0,
            self.b0,
            self.tau0,
            None if self.pressure is None else self.pressure.copy(),
            self.time,
        )

    def frame_arrays(self) -> dict:
        """Named field arrays for the snapshot export path."""
        out = {
            "abar": self.abar,
            "ubar_x": self.ubar[..., 0],
            "ubar_y": self.ubar[..., 1],
            "bbar": self.bbar,
        }
        if self.pressure is not None:
            out["pressure"] = self.pressure
        return out


def boussinesq_project(abar, bbar, b0: float, tau0: float):
    """Minimal L2 correction making b0*abar + tau0*bbar spatially constant.

    The fluctuating part of the combination is split back onto the two
    scalars proportionally to their coefficients; that is the unique
    smallest correction in the unweighted L2 sense, and it is idempotent.
    """
    s = b0 * abar + tau0 * bbar
    sprime = s - s.mean()
    denom = b0 * b0 + tau0 * tau0
    return abar - (b0 / denom) * sprime, bbar - (tau0 / denom) * sprime


def _leray(grid: SpatialGrid, u: np.ndarray) -> np.ndarray:
    kx, ky, inv_k2, _, _ = _spectral_ops(grid)
    ux_h = np.fft.fft2(u[..., 0])
    uy_h = np.fft.fft2(u[..., 1])
    div_h = 1j * kx * ux_h + 1j * ky * uy_h
    phi = div_h * inv_k2
    out = np.empty_like(u)
    out[..., 0] = np.real(np.fft.ifft2(ux_h - 1j * kx * phi))
    out[..., 1] = np.real(np.fft.ifft2(uy_h - 1j * ky * phi))
    return out


def diagnose_pressure(grid: SpatialGrid, u: np.ndarray) -> np.ndarray:
    """Pressure consistent with the divergence-free constraint.

    Solves Delta p = -div(u . grad u) with the advection term dealiased the
    same way the step dealiases it, zero-mean normalization.
    """
    kx, ky, inv_k2, mask, _ = _spectral_ops(grid)
    adv = _advection(grid, u, kx, ky, mask)
    rhs_h = -(1j * kx * np.fft.fft2(adv[..., 0]) + 1j * ky * np.fft.fft2(adv[..., 1]))
    p_h = -rhs_h * inv_k2
    return np.real(np.fft.ifft2(p_h))


def _advection(grid, u, kx, ky, mask):
    """Dealiased u . grad u, trailing component axis."""
    out = np.empty_like(u)
    for c in range(2):
        fh = np.fft.fft2(u[..., c])
        gx = np.real(np.fft.ifft2(1j * kx * fh))
        gy = np.real(np.fft.ifft2(1j * ky * fh))
        prod_h = np.fft.fft2(u[..., 0] * gx + u[..., 1] * gy)
        out[..., c] = np.real(np.fft.ifft2(np.where(mask, prod_h, 0.0)))
    return out


def make_state(
    grid: SpatialGrid,
    abar: np.ndarray,
    ubar: np.ndarray,
    bbar: np.ndarray,
    a0: float,
    b0: float,
    tau0: float,
) -> EulerState:
    """Build a valid state from arbitrary smooth fields.

    Applies the Leray projection to the velocity, the Boussinesq projection
    to the scalar pair, and diagnoses the pressure.
    """
    u = _leray(grid, np.asarray(ubar, dtype=float))
    a, b = boussinesq_project(np.asarray(abar, dtype=float), np.asarray(bbar, dtype=float), b0, tau0)
    p = diagnose_pressure(grid, u)
    return EulerState(grid, a, u, b, a0, b0, tau0, p, 0.0)


# RK4 imaginary-axis stability reaches |lambda dt| = 2*sqrt(2); the advective
# spectral radius is umax * kmax, so we refuse steps beyond 90% of that.
_RK4_IMAG_LIMIT = 2.0 * np.sqrt(2.0)


def _check_cfl(grid: SpatialGrid, u: np.ndarray, dt: float):
    umax = float(np.max(np.abs(u)))
    kmax = np.pi * max(grid.shape) / grid.length
    if abs(dt) * umax * kmax > 0.9 * _RK4_IMAG_LIMIT:
        raise CFLError(
            f"dt={dt:g} exceeds the advective stability limit "
            f"{0.9 * _RK4_IMAG_LIMIT / (umax * kmax):g} at umax={umax:g}"
        )


def _resolution_check(omega_h: np.ndarray, grid: SpatialGrid, mask: np.ndarray):
    # enstrophy piling into the top 20% of the retained band flags a
    # resolution problem before aliasing corrupts the run
    kx_i = np.fft.fftfreq(grid.shape[0], d=1.0 / grid.shape[0])
    ky_i = np.fft.fftfreq(grid.shape[1], d=1.0 / grid.shape[1])
    kk = np.sqrt(kx_i[:, None] ** 2 + ky_i[None, :] ** 2)
    kcut = min(n // 3 for n in grid.shape)
    spec = np.abs(omega_h) ** 2
    total = float(np.sum(spec[mask & (kk > 0)]))
    outer = float(np.sum(spec[mask & (kk >= 0.8 * kcut)]))
    if total > 0 and outer > 1e-3 * total:
        warnings.warn(
            f"enstrophy fraction {outer / total:.2e} in the outer fifth of the "
            "retained band; increase resolution",
            ResolutionWarning,
            stacklevel=3,
        )


def euler_step(state: EulerState, dt: float, project: bool = True) -> EulerState:
    """One RK4 step of the limit system.

    Set project=False to skip the per-step Boussinesq re-projection (the
    constraint is transported, so it drifts only at scheme order; the flag
    exists to measure that drift).
    """
    grid = state.grid
    kx, ky, inv_k2, mask, _ = _spectral_ops(grid)
    _check_cfl(grid, state.ubar, dt)

    umean = state.ubar.reshape(-1, 2).mean(axis=0)

    def velocity(omega_h):
        psi_h = -omega_h * inv_k2
        u = np.empty(grid.shape + (2,))
        u[..., 0] = np.real(np.fft.ifft2(-1j * ky * psi_h)) + umean[0]
        u[..., 1] = np.real(np.fft.ifft2(1j * kx * psi_h)) + umean[1]
        return u

    def rhs(y):
        omega_h, a_h, b_h = y
        u = velocity(omega_h)

        def transport(f_h):
            gx = np.real(np.fft.ifft2(1j * kx * f_h))
            gy = np.real(np.fft.ifft2(1j * ky * f_h))
            prod = np.fft.fft2(u[..., 0] * gx + u[..., 1] * gy)
            return -np.where(mask, prod, 0.0)

        return transport(omega_h), transport(a_h), transport(b_h)

    ux_h = np.fft.fft2(state.ubar[..., 0])
    uy_h = np.fft.fft2(state.ubar[..., 1])
    omega0 = np.where(mask, 1j * kx * uy_h - 1j * ky * ux_h, 0.0)
    a0_h = np.where(mask, np.fft.fft2(state.abar), 0.0)
    b0_h = np.where(mask, np.fft.fft2(state.bbar), 0.0)

    y0 = (omega0, a0_h, b0_h)
    k1 = rhs(y0)
    k2 = rhs(tuple(y + 0.5 * dt * k for y, k in zip(y0, k1)))
    k3 = rhs(tuple(y + 0.5 * dt * k for y, k in zip(y0, k2)))
    k4 = rhs(tuple(y + dt * k for y, k in zip(y0, k3)))
    y1 = tuple(
        y + (dt / 6.0) * (a + 2 * b + 2 * c + d)
        for y, a, b, c, d in zip(y0, k1, k2, k3, k4)
    )

    _resolution_check(y1[0], grid, mask)

    u1 = velocity(y1[0])
    a1 = np.real(np.fft.ifft2(y1[1]))
    b1 = np.real(np.fft.ifft2(y1[2]))
    if project:
        a1, b1 = boussinesq_project(a1, b1, state.b0, state.tau0)
    return EulerState(
        grid,
        a1,
        u1,
        b1,
        state.a0,
        state.b0,
        state.tau0,
        diagnose_pressure(grid, u1),
        state.time + dt,
    )


def run_euler(
    state: EulerState,
    t_final: float,
    dt: Optional[float] = None,
    frame_times=None,
    project: bool = True,
):
    """Integrate to t_final; returns (final state, frames).

    frames is a list of (time, state) pairs at the requested frame_times
    (snapped to step boundaries), always including the final state.  The
    default dt keeps the advective CFL number near 0.3.
    """
    span = t_final - state.time
    if span <= 0:
        raise ValueError("t_final must exceed the state time")
    if dt is None:
        umax = max(float(np.max(np.abs(state.ubar))), 1e-3)
        kmax = np.pi * max(state.grid.shape) / state.grid.length
        dt = 0.3 * _RK4_IMAG_LIMIT / (umax * kmax)
    nsteps = max(1, int(np.ceil(span / dt - 1e-12)))
    dt = span / nsteps

    want = []
    if frame_times is not None:
        want = sorted(float(t) for t in frame_times)
    frames = []
    cur = state
    next_frame = 0
    for _ in range(nsteps):
        cur = euler_step(cur, dt, project=project)
        while next_frame < len(want) and cur.time >= want[next_frame] - 0.5 * dt:
            frames.append((cur.time, cur.copy()))
            next_frame += 1
    if not frames or frames[-1][1] is not cur:
        frames.append((cur.time, cur))
    return cur, frames
