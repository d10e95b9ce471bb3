"""Linearized collision operator around a Fermi-Dirac equilibrium.

Fluctuations are relative: f = P(1 + g) with P = M/(1+M), and the
linearized dynamics is dg/dt = -L g.  Writing phi = g (1+M), one collision
contributes the bracket phi + phi* - phi' - phi*' weighted by

    Lambda = M M* / ((1+M)(1+M*)(1+M')(1+M*')),

and L is induced by the Dirichlet form

    a(g, h) = (1/4) int int int B Lambda [phi + phi* - phi' - phi*']
                                         [psi + psi* - psi' - psi*']

through <L g, h>_W = a(g, h) with the weighted inner product
<g, h>_W = sum_i P_i g_i h_i dv^d.  L is then self-adjoint and positive
semidefinite by construction, with kernel spanned by the collision
invariants {1, v, |v|^2} divided by (1+M) (equivalently, perturbations
f = P + P(1-P) chi along the equilibrium manifold).

On the grid the bracket evaluates phi at v', v*' with tensor Lagrange
stencils.  Linear stencils (default) are cheap but make the |v|^2 kernel
vector only approximate; `clean=True` projects the assembled form onto the
orthogonal complement of the exact kernel, restoring a machine-precision
(d+2)-dimensional null space while keeping symmetry and positivity.
Quadratic stencils reproduce |v|^2 exactly and need no cleaning, at about
ten times the assembly cost.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from numba import njit, prange

from .collision import CollisionQuadrature, _axis_taps, _nu_lambda_2d, _nu_lambda_3d
from .equilibria import FermiDiracParams
from .grids import VelocityGrid

__all__ = [
    "LinearizedOperator",
    "SpectralReport",
    "FluxCorrectors",
    "assemble_linearized",
    "apply_form_direct",
    "collision_frequency",
    "frequency_bounds_report",
    "flux_functions",
    "solve_flux_correctors",
    "spectral_analysis",
]

_DEFAULT_SLABS = 8  # fixed slab count keeps sums independent of thread count


# ---------------------------------------------------------------------------
# assembly kernels
# ---------------------------------------------------------------------------


@njit(cache=True, parallel=True)
def _assemble_3d(n, x0, dv, dirs, dw, order, cutoff2, a, b, ux, uy, uz, mn, opm, lam_floor, bounds, aout):
    inv_dv = 1.0 / dv
    nw = dirs.shape[0]
    nn = n * n
    tb = 2.0 * b
    m = order + 1
    vol2 = (dv * dv * dv) ** 2
    nslab = bounds.shape[0] - 1
    for t in prange(nslab):
        amat = aout[t]
        wx = np.empty(4)
        wy = np.empty(4)
        wz = np.empty(4)
        cap = 2 + 2 * m * m * m
        idx = np.empty(cap, np.int64)
        cof = np.empty(cap)
        for i in range(bounds[t], bounds[t + 1]):
            ix = i // nn
            iy = (i % nn) // n
            iz = i % n
            vix = x0 + ix * dv
            viy = x0 + iy * dv
            viz = x0 + iz * dv
            mi = mn[i]
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
                            jcur = j
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
                            dxp = vpx - ux
                            dyp = vpy - uy
                            dzp = vpz - uz
                            mp = a * math.exp(-(dxp * dxp + dyp * dyp + dzp * dzp) / tb)
                            dxq = vqx - ux
                            dyq = vqy - uy
                            dzq = vqz - uz
                            mq = a * math.exp(-(dxq * dxq + dyq * dyq + dzq * dzq) / tb)
                            mj = mn[jcur]
                            lam = mi * mj / ((1.0 + mi) * (1.0 + mj) * (1.0 + mp) * (1.0 + mq))
                            if lam <= lam_floor:
                                continue
                            idx[0] = i
                            cof[0] = 1.0 + mi
                            idx[1] = jcur
                            cof[1] = 1.0 + mj
                            s = 2
                            bx = _axis_taps((vpx - x0) * inv_dv, n, order, wx)
                            by = _axis_taps((vpy - x0) * inv_dv, n, order, wy)
                            bz = _axis_taps((vpz - x0) * inv_dv, n, order, wz)
                            for tx in range(m):
                                px = wx[tx]
                                rx = (bx + tx) * n
                                for ty in range(m):
                                    pxy = px * wy[ty]
                                    rxy = (rx + by + ty) * n + bz
                                    for tz in range(m):
                                        node = rxy + tz
                                        idx[s] = node
                                        cof[s] = -pxy * wz[tz] * opm[node]
                                        s += 1
                            bx = _axis_taps((vqx - x0) * inv_dv, n, order, wx)
                            by = _axis_taps((vqy - x0) * inv_dv, n, order, wy)
                            bz = _axis_taps((vqz - x0) * inv_dv, n, order, wz)
                            for tx in range(m):
                                px = wx[tx]
                                rx = (bx + tx) * n
                                for ty in range(m):
                                    pxy = px * wy[ty]
                                    rxy = (rx + by + ty) * n + bz
                                    for tz in range(m):
                                        node = rxy + tz
                                        idx[s] = node
                                        cof[s] = -pxy * wz[tz] * opm[node]
                                        s += 1
                            kap = 0.25 * vol2 * wang * lam
                            for p in range(s):
                                cp = kap * cof[p]
                                ip = idx[p]
                                for q in range(s):
                                    amat[ip, idx[q]] += cp * cof[q]


@njit(cache=True, parallel=True)
def _assemble_2d(n, x0, dv, dirs, dw, order, cutoff2, a, b, ux, uy, mn, opm, lam_floor, bounds, aout):
    inv_dv = 1.0 / dv
    nw = dirs.shape[0]
    tb = 2.0 * b
    m = order + 1
    vol2 = (dv * dv) ** 2
    nslab = bounds.shape[0] - 1
    for t in prange(nslab):
        amat = aout[t]
        wx = np.empty(4)
        wy = np.empty(4)
        cap = 2 + 2 * m * m
        idx = np.empty(cap, np.int64)
        cof = np.empty(cap)
        for i in range(bounds[t], bounds[t + 1]):
            ix = i // n
            iy = i % n
            vix = x0 + ix * dv
            viy = x0 + iy * dv
            mi = mn[i]
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
                        jcur = j
                        j += 1
                        if cutoff2 > 0.0 and zx * zx + zy * zy > cutoff2:
                            continue
                        zw = zx * ox + zy * oy
                        vpx = vix - zw * ox
                        vpy = viy - zw * oy
                        vqx = vjx + zw * ox
                        vqy = vjy + zw * oy
                        dxp = vpx - ux
                        dyp = vpy - uy
                        mp = a * math.exp(-(dxp * dxp + dyp * dyp) / tb)
                        dxq = vqx - ux
                        dyq = vqy - uy
                        mq = a * math.exp(-(dxq * dxq + dyq * dyq) / tb)
                        mj = mn[jcur]
                        lam = mi * mj / ((1.0 + mi) * (1.0 + mj) * (1.0 + mp) * (1.0 + mq))
                        if lam <= lam_floor:
                            continue
                        idx[0] = i
                        cof[0] = 1.0 + mi
                        idx[1] = jcur
                        cof[1] = 1.0 + mj
                        s = 2
                        bx = _axis_taps((vpx - x0) * inv_dv, n, order, wx)
                        by = _axis_taps((vpy - x0) * inv_dv, n, order, wy)
                        for tx in range(m):
                            px = wx[tx]
                            rx = (bx + tx) * n
                            for ty in range(m):
                                node = rx + by + ty
                                idx[s] = node
                                cof[s] = -px * wy[ty] * opm[node]
                                s += 1
                        bx = _axis_taps((vqx - x0) * inv_dv, n, order, wx)
                        by = _axis_taps((vqy - x0) * inv_dv, n, order, wy)
                        for tx in range(m):
                            px = wx[tx]
                            rx = (bx + tx) * n
                            for ty in range(m):
                                node = rx + by + ty
                                idx[s] = node
                                cof[s] = -px * wy[ty] * opm[node]
                                s += 1
                        kap = 0.25 * vol2 * wang * lam
                        for p in range(s):
                            cp = kap * cof[p]
                            ip = idx[p]
                            for q in range(s):
                                amat[ip, idx[q]] += cp * cof[q]


@njit(cache=True, parallel=True)
def _apply_3d(x, n, x0, dv, dirs, dw, order, cutoff2, a, b, ux, uy, uz, mn, opm, lam_floor, bounds, yout):
    inv_dv = 1.0 / dv
    nw = dirs.shape[0]
    nn = n * n
    tb = 2.0 * b
    m = order + 1
    vol2 = (dv * dv * dv) ** 2
    nslab = bounds.shape[0] - 1
    for t in prange(nslab):
        yvec = yout[t]
        wx = np.empty(4)
        wy = np.empty(4)
        wz = np.empty(4)
        cap = 2 + 2 * m * m * m
        idx = np.empty(cap, np.int64)
        cof = np.empty(cap)
        for i in range(bounds[t], bounds[t + 1]):
            ix = i // nn
            iy = (i % nn) // n
            iz = i % n
            vix = x0 + ix * dv
            viy = x0 + iy * dv
            viz = x0 + iz * dv
            mi = mn[i]
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
                            jcur = j
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
                            dxp = vpx - ux
                            dyp = vpy - uy
                            dzp = vpz - uz
                            mp = a * math.exp(-(dxp * dxp + dyp * dyp + dzp * dzp) / tb)
                            dxq = vqx - ux
                            dyq = vqy - uy
                            dzq = vqz - uz
                            mq = a * math.exp(-(dxq * dxq + dyq * dyq + dzq * dzq) / tb)
                            mj = mn[jcur]
                            lam = mi * mj / ((1.0 + mi) * (1.0 + mj) * (1.0 + mp) * (1.0 + mq))
                            if lam <= lam_floor:
                                continue
                            idx[0] = i
                            cof[0] = 1.0 + mi
                            idx[1] = jcur
                            cof[1] = 1.0 + mj
                            s = 2
                            bx = _axis_taps((vpx - x0) * inv_dv, n, order, wx)
                            by = _axis_taps((vpy - x0) * inv_dv, n, order, wy)
                            bz = _axis_taps((vpz - x0) * inv_dv, n, order, wz)
                            for tx in range(m):
                                px = wx[tx]
                                rx = (bx + tx) * n
                                for ty in range(m):
                                    pxy = px * wy[ty]
                                    rxy = (rx + by + ty) * n + bz
                                    for tz in range(m):
                                        node = rxy + tz
                                        idx[s] = node
                                        cof[s] = -pxy * wz[tz] * opm[node]
                                        s += 1
                            bx = _axis_taps((vqx - x0) * inv_dv, n, order, wx)
                            by = _axis_taps((vqy - x0) * inv_dv, n, order, wy)
                            bz = _axis_taps((vqz - x0) * inv_dv, n, order, wz)
                            for tx in range(m):
                                px = wx[tx]
                                rx = (bx + tx) * n
                                for ty in range(m):
                                    pxy = px * wy[ty]
                                    rxy = (rx + by + ty) * n + bz
                                    for tz in range(m):
                                        node = rxy + tz
                                        idx[s] = node
                                        cof[s] = -pxy * wz[tz] * opm[node]
                                        s += 1
                            br = 0.0
                            for p in range(s):
                                br += cof[p] * x[idx[p]]
                            br *= 0.25 * vol2 * wang * lam
                            for q in range(s):
                                yvec[idx[q]] += br * cof[q]


@njit(cache=True, parallel=True)
def _apply_2d(x, n, x0, dv, dirs, dw, order, cutoff2, a, b, ux, uy, mn, opm, lam_floor, bounds, yout):
    inv_dv = 1.0 / dv
    nw = dirs.shape[0]
    tb = 2.0 * b
    m = order + 1
    vol2 = (dv * dv) ** 2
    nslab = bounds.shape[0] - 1
    for t in prange(nslab):
        yvec = yout[t]
        wx = np.empty(4)
        wy = np.empty(4)
        cap = 2 + 2 * m * m
        idx = np.empty(cap, np.int64)
        cof = np.empty(cap)
        for i in range(bounds[t], bounds[t + 1]):
            ix = i // n
            iy = i % n
            vix = x0 + ix * dv
            viy = x0 + iy * dv
            mi = mn[i]
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
                        jcur = j
                        j += 1
                        if cutoff2 > 0.0 and zx * zx + zy * zy > cutoff2:
                            continue
                        zw = zx * ox + zy * oy
                        vpx = vix - zw * ox
                        vpy = viy - zw * oy
                        vqx = vjx + zw * ox
                        vqy = vjy + zw * oy
                        dxp = vpx - ux
                        dyp = vpy - uy
                        mp = a * math.exp(-(dxp * dxp + dyp * dyp) / tb)
                        dxq = vqx - ux
                        dyq = vqy - uy
                        mq = a * math.exp(-(dxq * dxq + dyq * dyq) / tb)
                        mj = mn[jcur]
                        lam = mi * mj / ((1.0 + mi) * (1.0 + mj) * (1.0 + mp) * (1.0 + mq))
                        if lam <= lam_floor:
                            continue
                        idx[0] = i
                        cof[0] = 1.0 + mi
                        idx[1] = jcur
                        cof[1] = 1.0 + mj
                        s = 2
                        bx = _axis_taps((vpx - x0) * inv_dv, n, order, wx)
                        by = _axis_taps((vpy - x0) * inv_dv, n, order, wy)
                        for tx in range(m):
                            px = wx[tx]
                            rx = (bx + tx) * n
                            for ty in range(m):
                                node = rx + by + ty
                                idx[s] = node
                                cof[s] = -px * wy[ty] * opm[node]
                                s += 1
                        bx = _axis_taps((vqx - x0) * inv_dv, n, order, wx)
                        by = _axis_taps((vqy - x0) * inv_dv, n, order, wy)
                        for tx in range(m):
                            px = wx[tx]
                            rx = (bx + tx) * n
                            for ty in range(m):
                                node = rx + by + ty
                                idx[s] = node
                                cof[s] = -px * wy[ty] * opm[node]
                                s += 1
                        br = 0.0
                        for p in range(s):
                            br += cof[p] * x[idx[p]]
                        br *= 0.25 * vol2 * wang * lam
                        for q in range(s):
                            yvec[idx[q]] += br * cof[q]


# ---------------------------------------------------------------------------
# operator container
# ---------------------------------------------------------------------------


@dataclass
class LinearizedOperator:
    """Dense symmetric representation of L in the W-conjugated frame.

    a_tilde is W^(1/2) L W^(-1/2), symmetric PSD; sqrt_w holds the node
    weights sqrt(P_i dv^d).  kernel_g columns span the exact null space in
    fluctuation variables.
    """

    grid: VelocityGrid
    params: FermiDiracParams
    quad: CollisionQuadrature
    a_tilde: np.ndarray
    sqrt_w: np.ndarray
    kernel_g: np.ndarray
    nu: np.ndarray
    stencil_order: int
    cleaned: bool
    _eig: tuple[np.ndarray, np.ndarray] | None = field(default=None, repr=False)

    @property
    def weight(self) -> np.ndarray:
        """Diagonal of W: P_i dv^d."""
        return self.sqrt_w**2

    def inner(self, g, h) -> float:
        return float(np.sum(self.weight * np.asarray(g) * np.asarray(h)))

    def apply(self, g: np.ndarray) -> np.ndarray:
        """L g in fluctuation variables."""
        g = np.asarray(g, dtype=float).reshape(-1)
        return (self.a_tilde @ (self.sqrt_w * g)) / self.sqrt_w

    def dirichlet(self, g, h=None) -> float:
        """a(g, h) = <L g, h>_W; h defaults to g."""
        gt = self.sqrt_w * np.asarray(g, dtype=float).reshape(-1)
        ht = gt if h is None else self.sqrt_w * np.asarray(h, dtype=float).reshape(-1)
        return float(gt @ (self.a_tilde @ ht))

    def eig(self) -> tuple[np.ndarray, np.ndarray]:
        if self._eig is None:
            vals, vecs = np.linalg.eigh(self.a_tilde)
            self._eig = (vals, vecs)
        return self._eig


def _kernel_columns(grid: VelocityGrid, params: FermiDiracParams) -> np.ndarray:
    m = params.exponent_weight(grid.nodes)
    cols = np.empty((grid.size, grid.d + 2))
    cols[:, 0] = 1.0
    cols[:, 1 : 1 + grid.d] = grid.nodes
    cols[:, -1] = grid.speed_sq
    return cols / (1.0 + m)[:, None]


def assemble_linearized(
    params: FermiDiracParams,
    quad: CollisionQuadrature,
    stencil_order: int = 1,
    clean: bool = True,
    n_slabs: int = _DEFAULT_SLABS,
    lam_floor: float = 0.0,
) -> LinearizedOperator:
    """Assemble the dense Dirichlet form and wrap it as LinearizedOperator.

    The quadruple loop scatters one rank-one update per collision into a
    fixed number of row slabs, so the result does not depend on the thread
    count.  lam_floor > 0 drops collisions with Lambda below it (a speed
    knob; symmetry and positivity are unaffected).
    """
    grid = quad.grid
    if params.d != grid.d:
        raise ValueError("parameter dimension does not match the grid")
    dirs, dw = quad.angular
    mn = params.exponent_weight(grid.nodes)
    opm = 1.0 + mn
    nsl = max(1, min(n_slabs, grid.size))
    bounds = np.linspace(0, grid.size, nsl + 1).astype(np.int64)
    aout = np.zeros((nsl, grid.size, grid.size))
    u = params.u
    if grid.d == 3:
        _assemble_3d(
            grid.n, float(grid.axis[0]), grid.dv, dirs, dw, stencil_order,
            quad.kernel.cutoff_sq, params.a, params.b, u[0], u[1], u[2],
            mn, opm, lam_floor, bounds, aout,
        )
    else:
        _assemble_2d(
            grid.n, float(grid.axis[0]), grid.dv, dirs, dw, stencil_order,
            quad.kernel.cutoff_sq, params.a, params.b, u[0], u[1],
            mn, opm, lam_floor, bounds, aout,
        )
    amat = aout.sum(axis=0)
    del aout
    amat = 0.5 * (amat + amat.T)
    pocc = mn / opm
    sqrt_w = np.sqrt(pocc * grid.weight)
    a_tilde = amat / sqrt_w[:, None] / sqrt_w[None, :]
    del amat
    kernel_g = _kernel_columns(grid, params)
    if clean:
        ktil, _ = np.linalg.qr(sqrt_w[:, None] * kernel_g)
        ak = a_tilde @ ktil
        kak = ktil.T @ ak
        a_tilde -= ak @ ktil.T
        a_tilde -= ktil @ ak.T
        a_tilde += ktil @ kak @ ktil.T
        a_tilde = 0.5 * (a_tilde + a_tilde.T)
    nu = collision_frequency(params, quad)
    return LinearizedOperator(
        grid=grid,
        params=params,
        quad=quad,
        a_tilde=a_tilde,
        sqrt_w=sqrt_w,
        kernel_g=kernel_g,
        nu=nu,
        stencil_order=stencil_order,
        cleaned=clean,
    )


def apply_form_direct(
    params: FermiDiracParams,
    quad: CollisionQuadrature,
    g: np.ndarray,
    stencil_order: int = 1,
    n_slabs: int = _DEFAULT_SLABS,
    lam_floor: float = 0.0,
) -> np.ndarray:
    """Matrix-free W L g: the same collision sweep as assembly, applied to
    one vector without materializing the matrix.  Agrees with the assembled
    (uncleaned) path to roundoff."""
    grid = quad.grid
    dirs, dw = quad.angular
    mn = params.exponent_weight(grid.nodes)
    opm = 1.0 + mn
    nsl = max(1, min(n_slabs, grid.size))
    bounds = np.linspace(0, grid.size, nsl + 1).astype(np.int64)
    yout = np.zeros((nsl, grid.size))
    x = np.ascontiguousarray(g, dtype=np.float64).reshape(-1)
    u = params.u
    if grid.d == 3:
        _apply_3d(
            x, grid.n, float(grid.axis[0]), grid.dv, dirs, dw, stencil_order,
            quad.kernel.cutoff_sq, params.a, params.b, u[0], u[1], u[2],
            mn, opm, lam_floor, bounds, yout,
        )
    else:
        _apply_2d(
            x, grid.n, float(grid.axis[0]), grid.dv, dirs, dw, stencil_order,
            quad.kernel.cutoff_sq, params.a, params.b, u[0], u[1],
            mn, opm, lam_floor, bounds, yout,
        )
    return yout.sum(axis=0)


def collision_frequency(params: FermiDiracParams, quad: CollisionQuadrature) -> np.ndarray:
    """nu(v) = int int B M* (1+M) / ((1+M*)(1+M')(1+M*')) dv* dw, analytic
    integrand on the quadrature's node and angle set."""
    grid = quad.grid
    dirs, dw = quad.angular
    nu = np.empty(grid.size)
    lam_tot = np.empty(grid.size)
    u = params.u
    common = (
        grid.n, float(grid.axis[0]), grid.dv, dirs, dw,
        quad.kernel.cutoff_sq, params.a, params.b,
    )
    if grid.d == 3:
        _nu_lambda_3d(*common, u[0], u[1], u[2], nu, lam_tot)
    else:
        _nu_lambda_2d(*common, u[0], u[1], nu, lam_tot)
    return nu


def frequency_bounds_report(params: FermiDiracParams, quad: CollisionQuadrature) -> dict:
    """Uniform bounds on nu over the grid, with (1 + |v|) envelope constants.

    The envelope constants are reported, not asserted: on a truncated grid
    they depend on vmax and the kernel cutoff.
    """
    nu = collision_frequency(params, quad)
    speed = np.sqrt(quad.grid.speed_sq)
    env = nu / (1.0 + speed)
    return {
        "nu_min": float(nu.min()),
        "nu_max": float(nu.max()),
        "envelope_lower": float(env.min()),
        "envelope_upper": float(env.max()),
        "ratio_max_min": float(nu.max() / nu.min()),
    }


# ---------------------------------------------------------------------------
# spectrum and flux correctors
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SpectralReport:
    eigenvalues: np.ndarray
    kernel_dim: int
    kernel_threshold: float
    spectral_gap: float
    kernel_residual: float


def spectral_analysis(op: LinearizedOperator, n_report: int = 16) -> SpectralReport:
    """Low end of the spectrum of L, the kernel count, and the gap.

    Eigenvalues below 1e-10 times the spectral radius count as kernel.
    kernel_residual is max_k |L k|_W / |k|_W over the analytic kernel
    basis (invariants over 1+M).
    """
    vals, _ = op.eig()
    thresh = 1e-10 * max(float(vals[-1]), 1e-300)
    kdim = int(np.sum(np.abs(vals) < thresh))
    positive = vals[np.abs(vals) >= thresh]
    gap = float(positive[0]) if positive.size else 0.0
    res = 0.0
    for k in range(op.kernel_g.shape[1]):
        g = op.kernel_g[:, k]
        lg = op.apply(g)
        res = max(res, math.sqrt(op.inner(lg, lg) / op.inner(g, g)))
    return SpectralReport(
        eigenvalues=vals[: n_report].copy(),
        kernel_dim=kdim,
        kernel_threshold=float(thresh),
        spectral_gap=gap,
        kernel_residual=float(res),
    )


def flux_functions(
    params: FermiDiracParams, grid: VelocityGrid
) -> tuple[np.ndarray, np.ndarray, float]:
    """Kinetic flux moments entering the Chapman-Enskog correctors.

    Phi[i] = (w (x) w - |w|^2 I/d)/b (trace free), Psi[i] = w (|w|^2 - tau)/b^2
    with w = v - u and tau the discrete P(1-P)-weighted ratio of fourth to
    second moments, which makes both exactly W-orthogonal to the kernel on
    the symmetric grid.
    """
    d = grid.d
    w = grid.nodes - params.u[None, :]
    wsq = np.sum(w * w, axis=1)
    q = params.occupancy(grid.nodes)
    q = q * (1.0 - q)
    tau = float(np.sum(wsq * wsq * q) / np.sum(wsq * q))
    phi = (w[:, :, None] * w[:, None, :] - (wsq / d)[:, None, None] * np.eye(d)[None, :, :]) / params.b
    psi = w * ((wsq - tau) / params.b**2)[:, None]
    return phi, psi, tau


@dataclass(frozen=True)
class FluxCorrectors:
    phi_hat: np.ndarray
    psi_hat: np.ndarray
    tau: float
    phi_residual: float
    psi_residual: float
    rhs_kernel_overlap: float
    viscosity: float
    conductivity: float
    growth_phi: float
    growth_psi: float


def solve_flux_correctors(op: LinearizedOperator, rtol: float = 1e-12) -> FluxCorrectors:
    """Solve L phi_hat = Phi and L psi_hat = Psi on the kernel complement.

    Uses the eigendecomposition as a pseudo-inverse (modes below the kernel
    threshold are dropped).  Residuals are relative W-norms of L x - rhs;
    rhs_kernel_overlap is the largest relative kernel component of any
    right-hand side, checked small before inverting.  The transport
    coefficients are the W-pairings <phi_hat, Phi> (one off-diagonal
    component; shear viscosity scale) and <psi_hat, Psi>/(2 tau_ref) style
    contraction (thermal conductivity scale); both must be positive.
    """
    grid = op.grid
    d = grid.d
    phi, psi, tau = flux_functions(op.params, grid)
    vals, vecs = op.eig()
    thresh = max(1e-10 * float(vals[-1]), rtol * float(vals[-1]))
    keep = vals > thresh
    inv = np.zeros_like(vals)
    inv[keep] = 1.0 / vals[keep]

    ktil, _ = np.linalg.qr(op.sqrt_w[:, None] * op.kernel_g)

    def solve_block(rhs_flat: np.ndarray) -> tuple[np.ndarray, float, float]:
        # rhs in g-variables; solve a(x, .) = <rhs, .>_W
        rt = op.sqrt_w[:, None] * rhs_flat
        overlap = float(
            np.max(np.linalg.norm(ktil.T @ rt, axis=0) / np.linalg.norm(rt, axis=0))
        )
        rt = rt - ktil @ (ktil.T @ rt)
        xt = vecs @ (inv[:, None] * (vecs.T @ rt))
        res = float(
            np.max(
                np.linalg.norm(op.a_tilde @ xt - rt, axis=0)
                / np.linalg.norm(rt, axis=0)
            )
        )
        return xt / op.sqrt_w[:, None], res, overlap

    phi_flat = phi.reshape(grid.size, d * d)
    psi_flat = psi.reshape(grid.size, d)
    phi_hat_flat, phi_res, phi_ov = solve_block(phi_flat)
    psi_hat_flat, psi_res, psi_ov = solve_block(psi_flat)
    phi_hat = phi_hat_flat.reshape(grid.size, d, d)
    psi_hat = psi_hat_flat.reshape(grid.size, d)

    wdiag = op.weight
    visc = float(np.sum(wdiag * phi_hat[:, 0, 1] * phi[:, 0, 1]))
    cond = float(sum(np.sum(wdiag * psi_hat[:, k] * psi[:, k]) for k in range(d)) / d)

    speed = np.sqrt(grid.speed_sq)
    outer = speed > 0.8 * grid.vmax
    inner_m = ~outer

    def growth(x: np.ndarray) -> float:
        xo = float(np.sqrt(np.mean(x[outer] ** 2)))
        xi = float(np.sqrt(np.mean(x[inner_m] ** 2)))
        return xo / max(xi, 1e-300)

    return FluxCorrectors(
        phi_hat=phi_hat,
        psi_hat=psi_hat,
        tau=tau,
        phi_residual=phi_res,
        psi_residual=psi_res,
        rhs_kernel_overlap=max(phi_ov, psi_ov),
        viscosity=visc,
        conductivity=cond,
        growth_phi=growth(np.abs(phi_hat[:, 0, 1])),
        growth_psi=growth(np.linalg.norm(psi_hat, axis=1)),
    )
