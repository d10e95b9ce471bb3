"""Pair-collision operator with Pauli blocking, entropy production, and the
renormalized collision flux.

The operator is

    Q(f)(v) = int int B(v-v*, w) [ f'f*'(1-f)(1-f*) - ff*(1-f')(1-f*') ] dv* dw

with post-collision velocities v' = v - ((v-v*).w)w, v*' = v* + ((v-v*).w)w.
Velocity space is the tensor grid of `VelocityGrid`; v', v*' fall between
nodes and f there is reconstructed by tensor-product Lagrange interpolation
(order 1, 2 or 3 per axis), clipped back to [0, 1].  The angular integral
uses a symmetric node set on the unit sphere/circle.

Quadrature error breaks the discrete conservation of (1, v, |v|^2) at the
interpolation order; `conservative_fix` restores it exactly by projecting Q
onto the orthogonal complement of the discrete collision invariants.  An
optional localization weight concentrates the correction where f(1-f) lives
so saturated and empty tail nodes are never pushed outside [0, 1].

Entropy bookkeeping: collisions where the gain or loss product underflows
(below 1e-300) are dropped from the dissipation sum *and* from the
renormalized flux, so the discrete inequality |q_hat|^2 <= D survives the
guard exactly.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np
from numba import njit, prange

from .equilibria import FermiDiracParams
from .grids import VelocityGrid

__all__ = [
    "CollisionKernelSpec",
    "CollisionQuadrature",
    "CollisionResult",
    "angular_rule",
    "collision_operator",
    "conservative_fix",
    "entropy_density",
    "entropy_total",
    "entropy_production",
    "weak_moment",
    "renormalized_flux",
    "renormalized_weight_totals",
    "renormalized_q_hat",
    "QHatReport",
    "PauliViolationError",
]


class PauliViolationError(FloatingPointError):
    """Occupancy left [0, 1] by more than the admissible slack."""


# ---------------------------------------------------------------------------
# angular rules
# ---------------------------------------------------------------------------

# octahedron-symmetric sphere rules (directions, common weight per orbit);
# weights are the classical values normalized to sum to 1 over the sphere
_OCTA_AXES = np.array(
    [[1, 0, 0], [-1, 0, 0], [0, 1, 0], [0, -1, 0], [0, 0, 1], [0, 0, -1]], dtype=float
)
_OCTA_CORNERS = (
    np.array(
        [[sx, sy, sz] for sx in (1, -1) for sy in (1, -1) for sz in (1, -1)], dtype=float
    )
    / math.sqrt(3.0)
)
_OCTA_EDGES = (
    np.array(
        [
            [sx, sy, 0] for sx in (1, -1) for sy in (1, -1)
        ]
        + [
            [sx, 0, sz] for sx in (1, -1) for sz in (1, -1)
        ]
        + [
            [0, sy, sz] for sy in (1, -1) for sz in (1, -1)
        ],
        dtype=float,
    )
    / math.sqrt(2.0)
)


def angular_rule(d: int, n: int) -> tuple[np.ndarray, np.ndarray]:
    """Symmetric angular quadrature; weights sum to the sphere measure.

    d=2: n uniform nodes on the circle (n divisible by 4 keeps the set
    closed under grid-exact rotations).  d=3: the 6/14/26-point octahedral
    rules for those exact counts, otherwise a Gauss-Legendre x uniform
    product rule with at least n nodes.
    """
    if d == 2:
        theta = 2.0 * math.pi * (np.arange(n) + 0.5) / n
        dirs = np.stack([np.cos(theta), np.sin(theta)], axis=1)
        w = np.full(n, 2.0 * math.pi / n)
        return dirs, w
    if n == 6:
        dirs, w = _OCTA_AXES, np.full(6, 1.0 / 6.0)
    elif n == 14:
        dirs = np.vstack([_OCTA_AXES, _OCTA_CORNERS])
        w = np.concatenate([np.full(6, 1.0 / 15.0), np.full(8, 3.0 / 40.0)])
    elif n == 26:
        dirs = np.vstack([_OCTA_AXES, _OCTA_EDGES, _OCTA_CORNERS])
        w = np.concatenate(
            [np.full(6, 1.0 / 21.0), np.full(12, 4.0 / 105.0), np.full(8, 27.0 / 840.0)]
        )
    else:
        n_mu = max(4, int(math.ceil(math.sqrt(n / 2.0))))
        n_phi = 2 * n_mu
        mu, wmu = np.polynomial.legendre.leggauss(n_mu)
        phi = 2.0 * math.pi * (np.arange(n_phi) + 0.5) / n_phi
        s = np.sqrt(1.0 - mu**2)
        dirs = np.stack(
            [
                (s[:, None] * np.cos(phi)[None, :]).ravel(),
                (s[:, None] * np.sin(phi)[None, :]).ravel(),
                np.broadcast_to(mu[:, None], (n_mu, n_phi)).ravel(),
            ],
            axis=1,
        )
        w = np.broadcast_to((wmu / 2.0)[:, None] / n_phi, (n_mu, n_phi)).ravel().copy()
    return np.ascontiguousarray(dirs), np.ascontiguousarray(w * 4.0 * math.pi)


@dataclass(frozen=True)
class CollisionKernelSpec:
    """Collision kernel B(v - v*, w).

    cutoff = None is the unit kernel B = 1; a finite cutoff gives the
    truncated kernel 1_{|v-v*| <= cutoff} used by the scaled runs.
    """

    cutoff: float | None = None

    @property
    def cutoff_sq(self) -> float:
        """Squared cutoff, or -1.0 for the unit kernel (sentinel)."""
        return -1.0 if self.cutoff is None else float(self.cutoff) ** 2

    def active_on(self, grid: VelocityGrid) -> bool:
        """True iff the cutoff can exclude any pair on this grid."""
        if self.cutoff is None:
            return False
        return self.cutoff < 2.0 * grid.vmax * math.sqrt(grid.d)


@dataclass(frozen=True)
class CollisionQuadrature:
    """Discretization of the collision integral on a velocity grid.

    interp_order: 1 (multilinear), 2 (tensor quadratic, default), or
    3 (tensor cubic) Lagrange stencils at v', v*'.  reconstruction picks
    the interpolated variable: 'logit' (default) reconstructs
    log(f/(1-f)) and maps back through the sigmoid, so Fermi-Dirac fields
    (log-odds exactly quadratic in v) are reproduced exactly at order >= 2
    and discrete detailed balance holds at equilibrium; values also stay
    in (0,1) structurally, with no overshoot to clip.  'direct'
    interpolates f itself, which leaves an equilibrium dissipation floor
    set by the stencil error.
    """

    grid: VelocityGrid
    kernel: CollisionKernelSpec = field(default_factory=CollisionKernelSpec)
    n_angular: int = 0
    interp_order: int = 2
    reconstruction: str = "logit"

    def __post_init__(self):
        if self.n_angular == 0:
            object.__setattr__(self, "n_angular", 14 if self.grid.d == 3 else 16)
        if self.interp_order not in (1, 2, 3):
            raise ValueError("interpolation order must be 1, 2, or 3")
        if self.interp_order >= self.grid.n - 1:
            raise ValueError("grid too small for the interpolation stencil")
        if self.reconstruction not in ("direct", "logit"):
            raise ValueError("reconstruction must be 'direct' or 'logit'")

    @property
    def angular(self) -> tuple[np.ndarray, np.ndarray]:
        return _cached_rule(self.grid.d, self.n_angular)


@lru_cache(maxsize=16)
def _cached_rule(d: int, n: int):
    return angular_rule(d, n)


@dataclass(frozen=True)
class CollisionResult:
    """One collision-operator evaluation.

    q = gain - loss (raw, pre-projection); gain and loss are the full
    product integrals including the (1-f) factors of the target node.
    rate_bound is max over nodes of the gain/loss rates, the explicit-step
    stability bound (dt * rate_bound <= 1 keeps Euler steps inside [0,1]).
    """

    q: np.ndarray
    gain: np.ndarray
    loss: np.ndarray
    dissipation: float | None
    rate_bound: float


# ---------------------------------------------------------------------------
# numba kernels
# ---------------------------------------------------------------------------


@njit(cache=True, inline="always")
def _axis_taps(t: float, n: int, order: int, w4) -> int:
    """Lagrange weights along one axis; returns the base node index.

    t is the target in node units (node k sits at t = k).  The stencil is
    clamped inside the grid and t onto the stencil's hull, so edge values
    extend outward instead of extrapolating.
    """
    if order == 1:
        i0 = int(math.floor(t))
        if i0 < 0:
            i0 = 0
        elif i0 > n - 2:
            i0 = n - 2
        s = t - i0
        if s < 0.0:
            s = 0.0
        elif s > 1.0:
            s = 1.0
        w4[0] = 1.0 - s
        w4[1] = s
        w4[2] = 0.0
        w4[3] = 0.0
        return i0
    elif order == 2:
        ic = int(math.floor(t + 0.5))
        if ic < 1:
            ic = 1
        elif ic > n - 2:
            ic = n - 2
        s = t - ic
        if s < -1.0:
            s = -1.0
        elif s > 1.0:
            s = 1.0
        w4[0] = 0.5 * s * (s - 1.0)
        w4[1] = 1.0 - s * s
        w4[2] = 0.5 * s * (s + 1.0)
        w4[3] = 0.0
        return ic - 1
    else:
        i0 = int(math.floor(t))
        if i0 < 1:
            i0 = 1
        elif i0 > n - 3:
            i0 = n - 3
        s = t - i0
        if s < -1.0:
            s = -1.0
        elif s > 2.0:
            s = 2.0
        # weights are for nodes i0-1 .. i0+2 (w4[1] = 1 at s = 0)
        w4[0] = -s * (s - 1.0) * (s - 2.0) / 6.0
        w4[1] = 0.5 * (s * s - 1.0) * (s - 2.0)
        w4[2] = -0.5 * s * (s + 1.0) * (s - 2.0)
        w4[3] = s * (s * s - 1.0) / 6.0
        return i0 - 1


@njit(cache=True, inline="always")
def _axis_taps_free(t: float, n: int, order: int, w4) -> int:
    """Same stencils as _axis_taps with the hull clamp removed.

    Weights are evaluated at the true offset, so the stencil polynomial is
    extrapolated outside the grid instead of edge-extended.  Base indices
    stay clamped in bounds.
    """
    if order == 1:
        i0 = int(math.floor(t))
        if i0 < 0:
            i0 = 0
        elif i0 > n - 2:
            i0 = n - 2
        s = t - i0
        w4[0] = 1.0 - s
        w4[1] = s
        w4[2] = 0.0
        w4[3] = 0.0
        return i0
    elif order == 2:
        ic = int(math.floor(t + 0.5))
        if ic < 1:
            ic = 1
        elif ic > n - 2:
            ic = n - 2
        s = t - ic
        w4[0] = 0.5 * s * (s - 1.0)
        w4[1] = 1.0 - s * s
        w4[2] = 0.5 * s * (s + 1.0)
        w4[3] = 0.0
        return ic - 1
    else:
        i0 = int(math.floor(t))
        if i0 < 1:
            i0 = 1
        elif i0 > n - 3:
            i0 = n - 3
        s = t - i0
        w4[0] = -s * (s - 1.0) * (s - 2.0) / 6.0
        w4[1] = 0.5 * (s * s - 1.0) * (s - 2.0)
        w4[2] = -0.5 * s * (s + 1.0) * (s - 2.0)
        w4[3] = s * (s * s - 1.0) / 6.0
        return i0 - 1


@njit(cache=True, inline="always")
def _interp3(f, n, order, vx, vy, vz, x0, inv_dv, wx, wy, wz) -> float:
    bx = _axis_taps((vx - x0) * inv_dv, n, order, wx)
    by = _axis_taps((vy - x0) * inv_dv, n, order, wy)
    bz = _axis_taps((vz - x0) * inv_dv, n, order, wz)
    m = order + 1
    acc = 0.0
    for ix in range(m):
        px = wx[ix]
        rx = (bx + ix) * n
        for iy in range(m):
            pxy = px * wy[iy]
            rxy = (rx + by + iy) * n + bz
            for iz in range(m):
                acc += pxy * wz[iz] * f[rxy + iz]
    return acc


@njit(cache=True, inline="always")
def _interp2(f, n, order, vx, vy, x0, inv_dv, wx, wy) -> float:
    bx = _axis_taps((vx - x0) * inv_dv, n, order, wx)
    by = _axis_taps((vy - x0) * inv_dv, n, order, wy)
    m = order + 1
    acc = 0.0
    for ix in range(m):
        px = wx[ix]
        rx = (bx + ix) * n
        for iy in range(m):
            acc += px * wy[iy] * f[rx + by + iy]
    return acc


@njit(cache=True, inline="always")
def _recon3(rf, lg, n, order, vx, vy, vz, x0, inv_dv, wx, wy, wz) -> float:
    if lg:
        tx = (vx - x0) * inv_dv
        ty = (vy - x0) * inv_dv
        tz = (vz - x0) * inv_dv
        hi = n - 1.0
        out = _interp3(rf, n, order, vx, vy, vz, x0, inv_dv, wx, wy, wz)
        if tx < 0.0 or tx > hi or ty < 0.0 or ty > hi or tz < 0.0 or tz > hi:
            # off-grid target: extrapolate the stencil polynomial (exact
            # for quadratic log-odds at order >= 2), capped by the
            # edge-extended value so tails can only decay
            bx = _axis_taps_free(tx, n, order, wx)
            by = _axis_taps_free(ty, n, order, wy)
            bz = _axis_taps_free(tz, n, order, wz)
            m = order + 1
            free = 0.0
            for ix in range(m):
                px = wx[ix]
                rx = (bx + ix) * n
                for iy in range(m):
                    pxy = px * wy[iy]
                    rxy = (rx + by + iy) * n + bz
                    for iz in range(m):
                        free += pxy * wz[iz] * rf[rxy + iz]
            if free < out:
                out = free
        return 1.0 / (1.0 + math.exp(-out))
    out = _interp3(rf, n, order, vx, vy, vz, x0, inv_dv, wx, wy, wz)
    if out < 0.0:
        return 0.0
    if out > 1.0:
        return 1.0
    return out


@njit(cache=True, inline="always")
def _recon2(rf, lg, n, order, vx, vy, x0, inv_dv, wx, wy) -> float:
    if lg:
        tx = (vx - x0) * inv_dv
        ty = (vy - x0) * inv_dv
        hi = n - 1.0
        out = _interp2(rf, n, order, vx, vy, x0, inv_dv, wx, wy)
        if tx < 0.0 or tx > hi or ty < 0.0 or ty > hi:
            bx = _axis_taps_free(tx, n, order, wx)
            by = _axis_taps_free(ty, n, order, wy)
            m = order + 1
            free = 0.0
            for ix in range(m):
                px = wx[ix]
                rx = (bx + ix) * n
                for iy in range(m):
                    free += px * wy[iy] * rf[rx + by + iy]
            if free < out:
                out = free
        return 1.0 / (1.0 + math.exp(-out))
    out = _interp2(rf, n, order, vx, vy, x0, inv_dv, wx, wy)
    if out < 0.0:
        return 0.0
    if out > 1.0:
        return 1.0
    return out


@njit(cache=True, parallel=True)
def _collision_core_3d(f, rf, lg, n, x0, dv, dirs, dw, order, cutoff2, want_d, gout, lout, drow):
    inv_dv = 1.0 / dv
    nw = dirs.shape[0]
    nn = n * n
    npts = nn * n
    for i in prange(npts):
        wx = np.empty(4)
        wy = np.empty(4)
        wz = np.empty(4)
        ix = i // nn
        iy = (i % nn) // n
        iz = i % n
        vix = x0 + ix * dv
        viy = x0 + iy * dv
        viz = x0 + iz * dv
        fi = f[i]
        gi = 0.0
        li = 0.0
        di = 0.0
        for io in range(nw):
            ox = dirs[io, 0]
            oy = dirs[io, 1]
            oz = dirs[io, 2]
            wang = dw[io]
            j = 0
            for jx in range(n):
                zx = vix - (x0 + jx * dv)
                for jy in range(n):
                    zy = viy - (x0 + jy * dv)
                    for jz in range(n):
                        zz = viz - (x0 + jz * dv)
                        fj = f[j]
                        j += 1
                        if cutoff2 > 0.0 and zx * zx + zy * zy + zz * zz > cutoff2:
                            continue
                        zw = zx * ox + zy * oy + zz * oz
                        vpx = vix - zw * ox
                        vpy = viy - zw * oy
                        vpz = viz - zw * oz
                        vqx = (vix - zx) + zw * ox
                        vqy = (viy - zy) + zw * oy
                        vqz = (viz - zz) + zw * oz
                        fp = _recon3(rf, lg, n, order, vpx, vpy, vpz, x0, inv_dv, wx, wy, wz)
                        fq = _recon3(rf, lg, n, order, vqx, vqy, vqz, x0, inv_dv, wx, wy, wz)
                        gterm = fp * fq * (1.0 - fj)
                        lterm = fj * (1.0 - fp) * (1.0 - fq)
                        gi += wang * gterm
                        li += wang * lterm
                        if want_d:
                            gain = gterm * (1.0 - fi)
                            loss = lterm * fi
                            if gain > 1e-300 and loss > 1e-300:
                                di += wang * (gain - loss) * math.log(gain / loss)
        vol = dv * dv * dv
        gout[i] = gi * vol
        lout[i] = li * vol
        drow[i] = 0.25 * di * vol * vol


@njit(cache=True, parallel=True)
def _collision_core_2d(f, rf, lg, n, x0, dv, dirs, dw, order, cutoff2, want_d, gout, lout, drow):
    inv_dv = 1.0 / dv
    nw = dirs.shape[0]
    npts = n * n
    for i in prange(npts):
        wx = np.empty(4)
        wy = np.empty(4)
        ix = i // n
        iy = i % n
        vix = x0 + ix * dv
        viy = x0 + iy * dv
        fi = f[i]
        gi = 0.0
        li = 0.0
        di = 0.0
        for io in range(nw):
            ox = dirs[io, 0]
            oy = dirs[io, 1]
            wang = dw[io]
            j = 0
            for jx in range(n):
                zx = vix - (x0 + jx * dv)
                for jy in range(n):
                    zy = viy - (x0 + jy * dv)
                    fj = f[j]
                    j += 1
                    if cutoff2 > 0.0 and zx * zx + zy * zy > cutoff2:
                        continue
                    zw = zx * ox + zy * oy
                    vpx = vix - zw * ox
                    vpy = viy - zw * oy
                    vqx = (vix - zx) + zw * ox
                    vqy = (viy - zy) + zw * oy
                    fp = _recon2(rf, lg, n, order, vpx, vpy, x0, inv_dv, wx, wy)
                    fq = _recon2(rf, lg, n, order, vqx, vqy, x0, inv_dv, wx, wy)
                    gterm = fp * fq * (1.0 - fj)
                    lterm = fj * (1.0 - fp) * (1.0 - fq)
                    gi += wang * gterm
                    li += wang * lterm
                    if want_d:
                        gain = gterm * (1.0 - fi)
                        loss = lterm * fi
                        if gain > 1e-300 and loss > 1e-300:
                            di += wang * (gain - loss) * math.log(gain / loss)
        vol = dv * dv
        gout[i] = gi * vol
        lout[i] = li * vol
        drow[i] = 0.25 * di * vol * vol


@njit(cache=True, parallel=True)
def _weak_core_3d(f, rf, lg, phi, n, x0, dv, dirs, dw, order, cutoff2, partial):
    # unordered-pair regrouping of the quadruple sum: the integrand is
    # symmetric under (v, v*) swap, so sum (phi_i + phi_j) over i < j plus
    # the diagonal; algebraically equal to sum_i phi_i Q_i
    inv_dv = 1.0 / dv
    nw = dirs.shape[0]
    nn = n * n
    npts = nn * n
    for i in prange(npts):
        wx = np.empty(4)
        wy = np.empty(4)
        wz = np.empty(4)
        ix = i // nn
        iy = (i % nn) // n
        iz = i % n
        vix = x0 + ix * dv
        viy = x0 + iy * dv
        viz = x0 + iz * dv
        fi = f[i]
        pi = phi[i]
        acc = 0.0
        for j in range(i, npts):
            jx = j // nn
            jy = (j % nn) // n
            jz = j % n
            zx = vix - (x0 + jx * dv)
            zy = viy - (x0 + jy * dv)
            zz = viz - (x0 + jz * dv)
            if cutoff2 > 0.0 and zx * zx + zy * zy + zz * zz > cutoff2:
                continue
            fj = f[j]
            psum = pi + phi[j] if j > i else pi
            xij = 0.0
            for io in range(nw):
                ox = dirs[io, 0]
                oy = dirs[io, 1]
                oz = dirs[io, 2]
                zw = zx * ox + zy * oy + zz * oz
                vpx = vix - zw * ox
                vpy = viy - zw * oy
                vpz = viz - zw * oz
                vqx = (vix - zx) + zw * ox
                vqy = (viy - zy) + zw * oy
                vqz = (viz - zz) + zw * oz
                fp = _recon3(rf, lg, n, order, vpx, vpy, vpz, x0, inv_dv, wx, wy, wz)
                fq = _recon3(rf, lg, n, order, vqx, vqy, vqz, x0, inv_dv, wx, wy, wz)
                xij += dw[io] * (fp * fq * (1.0 - fi) * (1.0 - fj) - fi * fj * (1.0 - fp) * (1.0 - fq))
            acc += psum * xij
        partial[i] = acc


@njit(cache=True, parallel=True)
def _weak_core_2d(f, rf, lg, phi, n, x0, dv, dirs, dw, order, cutoff2, partial):
    inv_dv = 1.0 / dv
    nw = dirs.shape[0]
    npts = n * n
    for i in prange(npts):
        wx = np.empty(4)
        wy = np.empty(4)
        ix = i // n
        iy = i % n
        vix = x0 + ix * dv
        viy = x0 + iy * dv
        fi = f[i]
        pi = phi[i]
        acc = 0.0
        for j in range(i, npts):
            jx = j // n
            jy = j % n
            zx = vix - (x0 + jx * dv)
            zy = viy - (x0 + jy * dv)
            if cutoff2 > 0.0 and zx * zx + zy * zy > cutoff2:
                continue
            fj = f[j]
            psum = pi + phi[j] if j > i else pi
            xij = 0.0
            for io in range(nw):
                ox = dirs[io, 0]
                oy = dirs[io, 1]
                zw = zx * ox + zy * oy
                vpx = vix - zw * ox
                vpy = viy - zw * oy
                vqx = (vix - zx) + zw * ox
                vqy = (viy - zy) + zw * oy
                fp = _recon2(rf, lg, n, order, vpx, vpy, x0, inv_dv, wx, wy)
                fq = _recon2(rf, lg, n, order, vqx, vqy, x0, inv_dv, wx, wy)
                xij += dw[io] * (fp * fq * (1.0 - fi) * (1.0 - fj) - fi * fj * (1.0 - fp) * (1.0 - fq))
            acc += psum * xij
        partial[i] = acc


@njit(cache=True, parallel=True)
def _qhat_core_3d(f, rf, lg, n, x0, dv, dirs, dw, order, cutoff2, a, b, ux, uy, uz, out):
    inv_dv = 1.0 / dv
    nw = dirs.shape[0]
    nn = n * n
    npts = nn * n
    tb = 2.0 * b
    for i in prange(npts):
        wx = np.empty(4)
        wy = np.empty(4)
        wz = np.empty(4)
        ix = i // nn
        iy = (i % nn) // n
        iz = i % n
        vix = x0 + ix * dv
        viy = x0 + iy * dv
        viz = x0 + iz * dv
        dxu = vix - ux
        dyu = viy - uy
        dzu = viz - uz
        mi = a * math.exp(-(dxu * dxu + dyu * dyu + dzu * dzu) / tb)
        fi = f[i]
        acc = 0.0
        for io in range(nw):
            ox = dirs[io, 0]
            oy = dirs[io, 1]
            oz = dirs[io, 2]
            wang = dw[io]
            j = 0
            for jx in range(n):
                vjx = x0 + jx * dv
                zx = vix - vjx
                for jy in range(n):
                    vjy = x0 + jy * dv
                    zy = viy - vjy
                    for jz in range(n):
                        vjz = x0 + jz * dv
                        zz = viz - vjz
                        fj = f[j]
                        j += 1
                        if cutoff2 > 0.0 and zx * zx + zy * zy + zz * zz > cutoff2:
                            continue
                        zw = zx * ox + zy * oy + zz * oz
                        vpx = vix - zw * ox
                        vpy = viy - zw * oy
                        vpz = viz - zw * oz
                        vqx = vjx + zw * ox
                        vqy = vjy + zw * oy
                        vqz = vjz + zw * oz
                        fp = _recon3(rf, lg, n, order, vpx, vpy, vpz, x0, inv_dv, wx, wy, wz)
                        fq = _recon3(rf, lg, n, order, vqx, vqy, vqz, x0, inv_dv, wx, wy, wz)
                        gain = fp * fq * (1.0 - fi) * (1.0 - fj)
                        loss = fi * fj * (1.0 - fp) * (1.0 - fq)
                        if gain <= 1e-300 or loss <= 1e-300:
                            continue
                        dx = vjx - ux
                        dy = vjy - uy
                        dz = vjz - uz
                        mj = a * math.exp(-(dx * dx + dy * dy + dz * dz) / tb)
                        dx = vpx - ux
                        dy = vpy - uy
                        dz = vpz - uz
                        mp = a * math.exp(-(dx * dx + dy * dy + dz * dz) / tb)
                        dx = vqx - ux
                        dy = vqy - uy
                        dz = vqz - uz
                        mq = a * math.exp(-(dx * dx + dy * dy + dz * dz) / tb)
                        lam = mi * mj / ((1.0 + mi) * (1.0 + mj) * (1.0 + mp) * (1.0 + mq))
                        acc += wang * math.sqrt(lam) * (math.sqrt(gain) - math.sqrt(loss))
        pocc = mi / (1.0 + mi)
        out[i] = acc * dv * dv * dv / pocc


@njit(cache=True, parallel=True)
def _qhat_core_2d(f, rf, lg, n, x0, dv, dirs, dw, order, cutoff2, a, b, ux, uy, out):
    inv_dv = 1.0 / dv
    nw = dirs.shape[0]
    npts = n * n
    tb = 2.0 * b
    for i in prange(npts):
        wx = np.empty(4)
        wy = np.empty(4)
        ix = i // n
        iy = i % n
        vix = x0 + ix * dv
        viy = x0 + iy * dv
        dxu = vix - ux
        dyu = viy - uy
        mi = a * math.exp(-(dxu * dxu + dyu * dyu) / tb)
        fi = f[i]
        acc = 0.0
        for io in range(nw):
            ox = dirs[io, 0]
            oy = dirs[io, 1]
            wang = dw[io]
            j = 0
            for jx in range(n):
                vjx = x0 + jx * dv
                zx = vix - vjx
                for jy in range(n):
                    vjy = x0 + jy * dv
                    zy = viy - vjy
                    fj = f[j]
                    j += 1
                    if cutoff2 > 0.0 and zx * zx + zy * zy > cutoff2:
                        continue
                    zw = zx * ox + zy * oy
                    vpx = vix - zw * ox
                    vpy = viy - zw * oy
                    vqx = vjx + zw * ox
                    vqy = vjy + zw * oy
                    fp = _recon2(rf, lg, n, order, vpx, vpy, x0, inv_dv, wx, wy)
                    fq = _recon2(rf, lg, n, order, vqx, vqy, x0, inv_dv, wx, wy)
                    gain = fp * fq * (1.0 - fi) * (1.0 - fj)
                    loss = fi * fj * (1.0 - fp) * (1.0 - fq)
                    if gain <= 1e-300 or loss <= 1e-300:
                        continue
                    dx = vjx - ux
                    dy = vjy - uy
                    mj = a * math.exp(-(dx * dx + dy * dy) / tb)
                    dx = vpx - ux
                    dy = vpy - uy
                    mp = a * math.exp(-(dx * dx + dy * dy) / tb)
                    dx = vqx - ux
                    dy = vqy - uy
                    mq = a * math.exp(-(dx * dx + dy * dy) / tb)
                    lam = mi * mj / ((1.0 + mi) * (1.0 + mj) * (1.0 + mp) * (1.0 + mq))
                    acc += wang * math.sqrt(lam) * (math.sqrt(gain) - math.sqrt(loss))
        pocc = mi / (1.0 + mi)
        out[i] = acc * dv * dv / pocc


@njit(cache=True, parallel=True)
def _nu_lambda_3d(n, x0, dv, dirs, dw, cutoff2, a, b, ux, uy, uz, nu, lam_tot):
    nw = dirs.shape[0]
    nn = n * n
    npts = nn * n
    tb = 2.0 * b
    for i in prange(npts):
        ix = i // nn
        iy = (i % nn) // n
        iz = i % n
        vix = x0 + ix * dv
        viy = x0 + iy * dv
        viz = x0 + iz * dv
        dx = vix - ux
        dy = viy - uy
        dz = viz - uz
        mi = a * math.exp(-(dx * dx + dy * dy + dz * dz) / tb)
        nacc = 0.0
        lacc = 0.0
        for io in range(nw):
            ox = dirs[io, 0]
            oy = dirs[io, 1]
            oz = dirs[io, 2]
            wang = dw[io]
            for jx in range(n):
                vjx = x0 + jx * dv
                zx = vix - vjx
                for jy in range(n):
                    vjy = x0 + jy * dv
                    zy = viy - vjy
                    for jz in range(n):
                        vjz = x0 + jz * dv
                        zz = viz - vjz
                        if cutoff2 > 0.0 and zx * zx + zy * zy + zz * zz > cutoff2:
                            continue
                        zw = zx * ox + zy * oy + zz * oz
                        dxp = (vix - zw * ox) - ux
                        dyp = (viy - zw * oy) - uy
                        dzp = (viz - zw * oz) - uz
                        mp = a * math.exp(-(dxp * dxp + dyp * dyp + dzp * dzp) / tb)
                        dxq = (vjx + zw * ox) - ux
                        dyq = (vjy + zw * oy) - uy
                        dzq = (vjz + zw * oz) - uz
                        mq = a * math.exp(-(dxq * dxq + dyq * dyq + dzq * dzq) / tb)
                        dxj = vjx - ux
                        dyj = vjy - uy
                        dzj = vjz - uz
                        mj = a * math.exp(-(dxj * dxj + dyj * dyj + dzj * dzj) / tb)
                        den = (1.0 + mj) * (1.0 + mp) * (1.0 + mq)
                        nacc += wang * mj * (1.0 + mi) / den
                        lacc += wang * mi * mj / ((1.0 + mi) * den)
        vol = dv * dv * dv
        nu[i] = nacc * vol
        lam_tot[i] = lacc * vol


@njit(cache=True, parallel=True)
def _nu_lambda_2d(n, x0, dv, dirs, dw, cutoff2, a, b, ux, uy, nu, lam_tot):
    nw = dirs.shape[0]
    npts = n * n
    tb = 2.0 * b
    for i in prange(npts):
        ix = i // n
        iy = i % n
        vix = x0 + ix * dv
        viy = x0 + iy * dv
        dx = vix - ux
        dy = viy - uy
        mi = a * math.exp(-(dx * dx + dy * dy) / tb)
        nacc = 0.0
        lacc = 0.0
        for io in range(nw):
            ox = dirs[io, 0]
            oy = dirs[io, 1]
            wang = dw[io]
            for jx in range(n):
                vjx = x0 + jx * dv
                zx = vix - vjx
                for jy in range(n):
                    vjy = x0 + jy * dv
                    zy = viy - vjy
                    if cutoff2 > 0.0 and zx * zx + zy * zy > cutoff2:
                        continue
                    zw = zx * ox + zy * oy
                    dxp = (vix - zw * ox) - ux
                    dyp = (viy - zw * oy) - uy
                    mp = a * math.exp(-(dxp * dxp + dyp * dyp) / tb)
                    dxq = (vjx + zw * ox) - ux
                    dyq = (vjy + zw * oy) - uy
                    mq = a * math.exp(-(dxq * dxq + dyq * dyq) / tb)
                    dxj = vjx - ux
                    dyj = vjy - uy
                    mj = a * math.exp(-(dxj * dxj + dyj * dyj) / tb)
                    den = (1.0 + mj) * (1.0 + mp) * (1.0 + mq)
                    nacc += wang * mj * (1.0 + mi) / den
                    lacc += wang * mi * mj / ((1.0 + mi) * den)
        vol = dv * dv
        nu[i] = nacc * vol
        lam_tot[i] = lacc * vol


# ---------------------------------------------------------------------------
# public API
# ---------------------------------------------------------------------------


def _check_pauli(f: np.ndarray, slack: float = 1e-12) -> np.ndarray:
    lo = float(f.min())
    hi = float(f.max())
    if lo < -slack or hi > 1.0 + slack:
        raise PauliViolationError(
            f"occupancy outside [0, 1]: min={lo:.3e}, max={hi:.3e}"
        )
    return np.clip(f, 0.0, 1.0)


# saturated nodes clamp to +-46 (e^-46 ~ 1e-20, far below any tail weight
# the quadrature resolves); keeps exp() well inside float range
_LOGIT_CLAMP = 46.0


def _reconstruction_field(ff: np.ndarray, quad: CollisionQuadrature) -> tuple[np.ndarray, bool]:
    """The array the cores interpolate, plus the logit flag."""
    if quad.reconstruction == "direct":
        return ff, False
    with np.errstate(divide="ignore"):
        ell = np.log(ff) - np.log1p(-ff)
    return np.clip(ell, -_LOGIT_CLAMP, _LOGIT_CLAMP), True


def collision_operator(
    f: np.ndarray, quad: CollisionQuadrature, want_dissipation: bool = False
) -> CollisionResult:
    """Evaluate Q(f) on the quadrature grid.

    Returns the raw (unprojected) collision term together with the gain and
    loss integrals and, if requested, the entropy dissipation D(f) fused
    into the same sweep.
    """
    grid = quad.grid
    ff = _check_pauli(np.ascontiguousarray(f, dtype=np.float64).reshape(-1))
    if ff.shape[0] != grid.size:
        raise ValueError("distribution size does not match the velocity grid")
    dirs, dw = quad.angular
    rf, lg = _reconstruction_field(ff, quad)
    gout = np.empty(grid.size)
    lout = np.empty(grid.size)
    drow = np.empty(grid.size)
    args = (
        ff,
        rf,
        lg,
        grid.n,
        float(grid.axis[0]),
        grid.dv,
        dirs,
        dw,
        quad.interp_order,
        quad.kernel.cutoff_sq,
        want_dissipation,
        gout,
        lout,
        drow,
    )
    if grid.d == 3:
        _collision_core_3d(*args)
    else:
        _collision_core_2d(*args)
    gain = (1.0 - ff) * gout
    loss = ff * lout
    # f + dt*Q = f (1 - dt (G+L)) + dt G stays in [0,1] iff dt (G+L) <= 1
    rate = float((gout + lout).max())
    diss = float(drow.sum()) if want_dissipation else None
    return CollisionResult(q=gain - loss, gain=gain, loss=loss, dissipation=diss, rate_bound=rate)


@lru_cache(maxsize=8)
def _invariant_basis(grid: VelocityGrid) -> np.ndarray:
    c = np.empty((grid.size, grid.d + 2))
    c[:, 0] = 1.0
    c[:, 1 : 1 + grid.d] = grid.nodes
    c[:, -1] = grid.speed_sq
    return c


def conservative_fix(
    q: np.ndarray, grid: VelocityGrid, localization: np.ndarray | None = None
) -> np.ndarray:
    """Remove the quadrature defect in the collision invariants.

    Projects q onto the orthogonal complement of span{1, v, |v|^2} in the
    grid inner product, so mass, momentum, and energy moments of the result
    vanish to machine precision.  With a localization weight (for example
    f(1-f)) the subtracted correction is proportional to it, which keeps
    the fix away from saturated and empty nodes; the moment zeroing is
    exact either way.
    """
    c = _invariant_basis(grid)
    q = np.asarray(q, dtype=float).reshape(-1)
    if localization is None:
        coef = np.linalg.lstsq(c, q, rcond=None)[0]
        return q - c @ coef
    theta = np.asarray(localization, dtype=float).reshape(-1)
    if np.any(theta < 0):
        raise ValueError("localization weight must be nonnegative")
    tc = theta[:, None] * c
    gram = c.T @ tc
    coef = np.linalg.solve(gram, c.T @ q)
    return q - tc @ coef


def entropy_density(f: np.ndarray) -> np.ndarray:
    """Pointwise fermion entropy s(f) = f log f + (1-f) log(1-f), <= 0."""
    f = np.asarray(f, dtype=float)
    out = np.zeros_like(f)
    pos = f > 0.0
    out[pos] += f[pos] * np.log(f[pos])
    neg = f < 1.0
    out[neg] += (1.0 - f[neg]) * np.log1p(-f[neg])
    return out


def entropy_total(f: np.ndarray, grid: VelocityGrid) -> float:
    return grid.integrate(entropy_density(f))


def entropy_production(f: np.ndarray, quad: CollisionQuadrature) -> float:
    """D(f) >= 0; each quadrature term is nonnegative by construction."""
    return float(collision_operator(f, quad, want_dissipation=True).dissipation)


def weak_moment(f: np.ndarray, phi: np.ndarray, quad: CollisionQuadrature) -> float:
    """<Q(f), phi> via the symmetrized weak form.

    The quadruple sum is regrouped over unordered velocity pairs using the
    (v, v*) exchange symmetry of the integrand, which reproduces the direct
    sum_i phi_i Q(f)_i dv^d up to roundoff.  The remaining two-term
    antisymmetrization (phi' and phi*') is exact only in the continuum,
    where the collision map is measure-preserving; on the grid it would
    reintroduce the interpolation error that conservative_fix removes.
    """
    grid = quad.grid
    ff = _check_pauli(np.ascontiguousarray(f, dtype=np.float64).reshape(-1))
    pp = np.ascontiguousarray(phi, dtype=np.float64).reshape(-1)
    if pp.shape != ff.shape:
        raise ValueError("phi must match the distribution layout")
    dirs, dw = quad.angular
    rf, lg = _reconstruction_field(ff, quad)
    partial = np.empty(grid.size)
    args = (
        ff,
        rf,
        lg,
        pp,
        grid.n,
        float(grid.axis[0]),
        grid.dv,
        dirs,
        dw,
        quad.interp_order,
        quad.kernel.cutoff_sq,
        partial,
    )
    if grid.d == 3:
        _weak_core_3d(*args)
    else:
        _weak_core_2d(*args)
    return float(partial.sum()) * grid.weight * grid.weight


def renormalized_flux(
    f: np.ndarray, params: FermiDiracParams, quad: CollisionQuadrature
) -> np.ndarray:
    """q_hat(f) relative to the equilibrium with the given parameters.

    q_hat = (1/P) int int B sqrt(Lambda) (sqrt(gain) - sqrt(loss)) dv* dw,
    Lambda = M M* / ((1+M)(1+M*)(1+M')(1+M*')) evaluated analytically.
    Collisions whose gain or loss product underflows are excluded, matching
    the entropy-production guard term for term.
    """
    grid = quad.grid
    if params.d != grid.d:
        raise ValueError("parameter dimension does not match the grid")
    ff = _check_pauli(np.ascontiguousarray(f, dtype=np.float64).reshape(-1))
    dirs, dw = quad.angular
    rf, lg = _reconstruction_field(ff, quad)
    out = np.empty(grid.size)
    u = params.u
    common = (
        ff,
        rf,
        lg,
        grid.n,
        float(grid.axis[0]),
        grid.dv,
        dirs,
        dw,
        quad.interp_order,
        quad.kernel.cutoff_sq,
        params.a,
        params.b,
    )
    if grid.d == 3:
        _qhat_core_3d(*common, u[0], u[1], u[2], out)
    else:
        _qhat_core_2d(*common, u[0], u[1], out)
    return out


def renormalized_weight_totals(
    params: FermiDiracParams, quad: CollisionQuadrature
) -> tuple[np.ndarray, np.ndarray]:
    """(nu, int int B Lambda dv* dw) per node, on the same quadrature.

    nu(v) = int int B M* (1+M) / ((1+M*)(1+M')(1+M*')) dv* dw.  Term by
    term, Lambda = [nu integrand] * P/(1+M), so the second output equals
    nu P/(1+M) to machine precision; both sides feed the weighted
    Cauchy-Schwarz bound |q_hat|^2 <= D.
    """
    grid = quad.grid
    if params.d != grid.d:
        raise ValueError("parameter dimension does not match the grid")
    dirs, dw = quad.angular
    nu = np.empty(grid.size)
    lam_tot = np.empty(grid.size)
    u = params.u
    common = (
        grid.n,
        float(grid.axis[0]),
        grid.dv,
        dirs,
        dw,
        quad.kernel.cutoff_sq,
        params.a,
        params.b,
    )
    if grid.d == 3:
        _nu_lambda_3d(*common, u[0], u[1], u[2], nu, lam_tot)
    else:
        _nu_lambda_2d(*common, u[0], u[1], nu, lam_tot)
    return nu, lam_tot


@dataclass(frozen=True)
class QHatReport:
    """Renormalized flux together with its dissipation bound.

    norm_sharp integrates q_hat^2 against nu^{-1} M dv, the weight that
    Cauchy-Schwarz against int int B Lambda = nu P/(1+M) produces exactly;
    norm_plain uses nu^{-1} P dv and is smaller pointwise since M >= P.
    margin = dissipation - norm_sharp.
    """

    q_hat: np.ndarray
    norm_sharp: float
    norm_plain: float
    dissipation: float
    margin: float
    nu_identity_error: float


def renormalized_q_hat(
    f: np.ndarray, params: FermiDiracParams, quad: CollisionQuadrature
) -> QHatReport:
    """Certify that q_hat is controlled by the entropy production.

    The chain holds term by term on the quadrature: Cauchy-Schwarz over
    (v*, w) bounds (P q_hat)^2 by (int int B Lambda)(int int B (sqrt(gain)
    - sqrt(loss))^2), and (x - y) log(x/y) >= 4 (sqrt x - sqrt y)^2 closes
    the second factor against the quarter in the dissipation sum.  Both
    reported norms are therefore <= dissipation up to roundoff, the sharp
    one with no slack to spare in the first step.

    nu_identity_error is the relative defect of int int B Lambda =
    nu P/(1+M), a pure quadrature self-check that should sit at machine
    precision.
    """
    grid = quad.grid
    qh = renormalized_flux(f, params, quad)
    nu, lam_tot = renormalized_weight_totals(params, quad)
    m = params.exponent_weight(grid.nodes)
    p = m / (1.0 + m)
    scale = float(np.max(np.abs(lam_tot)))
    nu_err = float(np.max(np.abs(lam_tot - nu * p / (1.0 + m)))) / (scale or 1.0)
    norm_sharp = float(np.sum(qh * qh * m / nu)) * grid.weight
    norm_plain = float(np.sum(qh * qh * p / nu)) * grid.weight
    d_val = entropy_production(f, quad)
    return QHatReport(
        q_hat=qh,
        norm_sharp=norm_sharp,
        norm_plain=norm_plain,
        dissipation=d_val,
        margin=d_val - norm_sharp,
        nu_identity_error=nu_err,
    )
