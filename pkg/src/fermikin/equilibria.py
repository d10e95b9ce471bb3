"""Fermi-Dirac equilibria, their moments, and moment inversion.

The equilibrium occupancy is P(v) = M/(1+M) with M = a exp(-|v-u|^2/(2b)),
0 < P < 1 for any fugacity a > 0.  All closed-form moments reduce to the
radial integrals

    occupancy_moment(p, a)       = int |z|^p  M/(1+M)   dz,   M = a e^{-|z|^2/2}
    occupancy_moment_deriv(p, a) = d/da of the above,

taken over R^d.  Density and centered pressure follow by scaling:
rho = b^{d/2} F0(a), p = b^{d/2+1} F2(a) (F_p shorthand for the moment of
order p), and the inversion (rho, e) -> (a, b) is well posed exactly when
e > floor * rho^{2/d}, where the floor is the infimum of the
compressibility ratio G(a) = F2(a) / (2 F0(a)^{(d+2)/d}).

Integration by parts gives the exact identities

    a * F2'(a) = d * F0(a),        a * F4'(a) = (d+2) * F2(a),

used by the moment inversion and by the constraint functional downstream.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from scipy.interpolate import CubicSpline

from .grids import VelocityGrid

__all__ = [
    "DegenerateStateError",
    "FermiDiracParams",
    "PerturbedParams",
    "HydroMoments",
    "occupancy_moment",
    "occupancy_moment_deriv",
    "occupancy_tables",
    "compressibility_ratio",
    "compressibility_floor",
    "equilibrium_occupancy",
    "equilibrium_moments",
    "field_moments",
    "invert_moments",
    "match_moments_on_grid",
    "energy_flux_offset",
    "energy_flux_offset_linearization",
]


class DegenerateStateError(ValueError):
    """Moment pair outside the admissible domain of Fermi-Dirac states."""


def _sphere_area(d: int) -> float:
    return 2.0 * math.pi ** (d / 2.0) / math.gamma(d / 2.0)


def _radial_cutoff(p: int, a: float, d: int) -> float:
    # solve a e^{-R^2/2} R^{p+d-1} < 1e-20 by two fixed-point sweeps
    la = math.log(a)
    r = math.sqrt(2.0 * max(la, 0.0) + 92.0)
    for _ in range(2):
        r = math.sqrt(2.0 * (la + (p + d - 1) * math.log(r) + 46.0))
    return max(r, 8.0)


@lru_cache(maxsize=64)
def _panel_rule(r_max: float, width: float = 0.4, n_gl: int = 24):
    """Composite Gauss-Legendre nodes/weights on [0, r_max]."""
    n_panels = max(8, int(math.ceil(r_max / width)))
    x, w = np.polynomial.legendre.leggauss(n_gl)
    edges = np.linspace(0.0, r_max, n_panels + 1)
    half = 0.5 * (edges[1:] - edges[:-1])
    mid = 0.5 * (edges[1:] + edges[:-1])
    nodes = (mid[:, None] + half[:, None] * x[None, :]).ravel()
    weights = (half[:, None] * w[None, :]).ravel()
    return nodes, weights


def occupancy_moment(p: int, a: float, d: int = 3) -> float:
    """int_{R^d} |z|^p M/(1+M) dz with M = a e^{-|z|^2/2}."""
    if a <= 0:
        raise ValueError("fugacity must be positive")
    r, w = _panel_rule(_radial_cutoff(p, a, d))
    m = a * np.exp(-0.5 * r * r)
    return _sphere_area(d) * float(np.sum(w * r ** (p + d - 1) * m / (1.0 + m)))


def occupancy_moment_deriv(p: int, a: float, d: int = 3) -> float:
    """dF_p/da, i.e. int |z|^p M/(a (1+M)^2) dz."""
    if a <= 0:
        raise ValueError("fugacity must be positive")
    r, w = _panel_rule(_radial_cutoff(p, a, d))
    m = a * np.exp(-0.5 * r * r)
    return _sphere_area(d) * float(np.sum(w * r ** (p + d - 1) * m / (1.0 + m) ** 2)) / a


class OccupancyTables:
    """Spline tables of log F_p against log a, for fast field evaluation.

    Valid for a in [1e-7, 1e9]; outside that range fall back to the exact
    quadrature (scalar path).  Spline error is ~1e-12 relative, small enough
    for the 1/epsilon-amplified differences downstream.
    """

    def __init__(self, d: int, n_points: int = 4096):
        self.d = d
        la = np.linspace(math.log(1e-7), math.log(1e9), n_points)
        r, w = _panel_rule(_radial_cutoff(4, 1e9, d))
        e = np.exp(-0.5 * r * r)
        area = _sphere_area(d)
        self._splines = {}
        for p in (0, 2, 4):
            m = np.exp(la)[:, None] * e[None, :]
            vals = area * np.sum(w * r ** (p + d - 1) * (m / (1.0 + m)), axis=1)
            self._splines[p] = CubicSpline(la, np.log(vals))
        self.log_a_min, self.log_a_max = la[0], la[-1]

    def moment(self, p: int, a) -> np.ndarray:
        la = np.log(np.asarray(a, dtype=float))
        if np.any(la < self.log_a_min) or np.any(la > self.log_a_max):
            flat = np.atleast_1d(np.asarray(a, dtype=float))
            out = np.array([occupancy_moment(p, x, self.d) for x in flat])
            return out.reshape(np.shape(a))
        return np.exp(self._splines[p](la))

    def moment_dloga(self, p: int, a) -> np.ndarray:
        """a * dF_p/da, via the spline's logarithmic derivative."""
        la = np.log(np.asarray(a, dtype=float))
        return np.exp(self._splines[p](la)) * self._splines[p](la, 1)

    def log_moment(self, p: int, a) -> np.ndarray:
        """log F_p(a), the raw spline value.

        Differences of log_moment at nearby fugacities lose no precision,
        unlike ratios of the exponentiated values; functionals that track
        small deviations from a background should be built on these.
        """
        la = np.log(np.asarray(a, dtype=float))
        if np.any(la < self.log_a_min) or np.any(la > self.log_a_max):
            flat = np.atleast_1d(np.asarray(a, dtype=float))
            out = np.array([math.log(occupancy_moment(p, x, self.d)) for x in flat])
            return out.reshape(np.shape(a))
        return self._splines[p](la)


@lru_cache(maxsize=4)
def occupancy_tables(d: int) -> OccupancyTables:
    return OccupancyTables(d)


def compressibility_ratio(a: float, d: int = 3) -> float:
    """G(a) = F2(a) / (2 F0(a)^{(d+2)/d}); e/rho^{2/d} of the equilibrium."""
    f0 = occupancy_moment(0, a, d)
    f2 = occupancy_moment(2, a, d)
    return f2 / (2.0 * f0 ** ((d + 2.0) / d))


@lru_cache(maxsize=4)
def compressibility_floor(d: int = 3) -> float:
    """Infimum of the compressibility ratio over a geometric fugacity grid.

    Computed once at startup (up to a = 1e8); the admissible moment domain
    is e > floor * rho^{2/d}.  Reported, never asserted against a closed
    form.
    """
    grid = np.geomspace(1e-6, 1e8, 400)
    return float(min(compressibility_ratio(a, d) for a in grid))


# ---------------------------------------------------------------------------
# parameter containers
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class FermiDiracParams:
    """Local equilibrium parameters (fugacity, temperature scale, drift).

    Attributes
    ----------
    a : fugacity, > 0
    b : temperature-like scale, > 0
    u : drift velocity, shape (d,)
    """

    a: float
    b: float
    u: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "u", np.atleast_1d(np.asarray(self.u, dtype=float)))
        if self.a <= 0 or self.b <= 0:
            raise ValueError("fugacity and temperature scale must be positive")

    @property
    def d(self) -> int:
        return self.u.shape[0]

    def exponent_weight(self, nodes: np.ndarray) -> np.ndarray:
        """M(v) = a exp(-|v-u|^2 / (2b)) at the given velocity nodes."""
        w = nodes - self.u[None, :]
        return self.a * np.exp(-np.sum(w * w, axis=-1) / (2.0 * self.b))

    def occupancy(self, nodes: np.ndarray) -> np.ndarray:
        """P(v) = M/(1+M), strictly inside (0, 1)."""
        m = self.exponent_weight(nodes)
        return m / (1.0 + m)


@dataclass
class PerturbedParams:
    """Slowly modulated equilibrium family around (a0, b0) at scale epsilon.

    The local fields are a_eps(x) = exp(a0 + epsilon*a1(x)), u_eps(x) =
    epsilon*u(x), b_eps(x) = b0*exp(epsilon*b1(x)).  a1, b1 have the spatial
    grid's shape; u has shape spatial + (d,).
    """

    a0: float
    b0: float
    epsilon: float
    a1: np.ndarray
    u: np.ndarray
    b1: np.ndarray

    def __post_init__(self):
        self.a1 = np.asarray(self.a1, dtype=float)
        self.b1 = np.asarray(self.b1, dtype=float)
        self.u = np.asarray(self.u, dtype=float)
        if self.b0 <= 0:
            raise ValueError("background temperature scale must be positive")
        if self.epsilon <= 0:
            raise ValueError("epsilon must be positive")

    @property
    def d(self) -> int:
        return self.u.shape[-1]

    def fugacity_field(self) -> np.ndarray:
        return np.exp(self.a0 + self.epsilon * self.a1)

    def temperature_field(self) -> np.ndarray:
        return self.b0 * np.exp(self.epsilon * self.b1)

    def drift_field(self) -> np.ndarray:
        return self.epsilon * self.u

    def occupancy_field(self, vgrid: VelocityGrid) -> np.ndarray:
        """P(x, v) with shape spatial + (vgrid.size,)."""
        a = self.fugacity_field()[..., None]
        b = self.temperature_field()[..., None]
        du = vgrid.nodes[None, :, :] - self.drift_field().reshape(-1, 1, self.d)
        r2 = np.sum(du * du, axis=-1).reshape(self.a1.shape + (vgrid.size,))
        m = a * np.exp(-r2 / (2.0 * b))
        return m / (1.0 + m)


@dataclass(frozen=True)
class HydroMoments:
    """Density, bulk velocity, centered pressure moment, internal energy.

    p is the full second centered moment int |v-u|^2 f dv; e = p/(2 rho) is
    the zero-bulk-frame internal energy and T = p/rho the temperature-like
    ratio used by the reports.
    """

    rho: float
    u: np.ndarray
    p: float
    e: float

    @property
    def T(self) -> float:
        return self.p / self.rho


# ---------------------------------------------------------------------------
# moments and inversion
# ---------------------------------------------------------------------------


def equilibrium_occupancy(params: FermiDiracParams, grid: VelocityGrid) -> np.ndarray:
    """Equilibrium occupancy sampled on the grid nodes."""
    if params.d != grid.d:
        raise ValueError("parameter and grid dimensions differ")
    vals = params.occupancy(grid.nodes)
    # strict Pauli interior: M/(1+M) cannot reach 0 or 1 in exact arithmetic
    if vals.min() < 0.0 or vals.max() >= 1.0:
        raise FloatingPointError("equilibrium occupancy left (0, 1)")
    return vals


def equilibrium_moments(params: FermiDiracParams, grid: VelocityGrid | None = None) -> HydroMoments:
    """Moments of the equilibrium; closed form, or discrete sums if grid given."""
    if grid is not None:
        return field_moments(equilibrium_occupancy(params, grid), grid)
    d = params.d
    rho = params.b ** (d / 2.0) * occupancy_moment(0, params.a, d)
    p = params.b ** (d / 2.0 + 1.0) * occupancy_moment(2, params.a, d)
    return HydroMoments(rho=rho, u=params.u.copy(), p=p, e=p / (2.0 * rho))


def field_moments(f: np.ndarray, grid: VelocityGrid) -> HydroMoments:
    """Discrete (rho, u, p, e) of an occupancy field on the grid."""
    rho, mom, en = grid.moments(f)
    if rho <= 0:
        raise ValueError("nonpositive discrete density")
    u = mom / rho
    p = en - rho * float(np.dot(u, u))
    return HydroMoments(rho=rho, u=u, p=p, e=p / (2.0 * rho))


def invert_moments(rho: float, e: float, d: int = 3, rtol: float = 1e-12) -> tuple[float, float]:
    """Recover (a, b) from (rho, e); raises outside the admissible domain.

    The reduction e/rho^{2/d} = G(a) is monotone decreasing in a, so a is
    bracketed on a geometric grid and polished by Newton with the exact
    identity a G'(a) expressed through quadrature moments; b follows from
    the density.
    """
    if rho <= 0 or e <= 0:
        raise DegenerateStateError("moments must be positive")
    target = e / rho ** (2.0 / d)
    floor = compressibility_floor(d)
    if target <= floor * (1.0 + 1e-10):
        raise DegenerateStateError(
            f"moment pair below the degeneracy floor: e/rho^(2/d) = {target:.6e} "
            f"<= floor = {floor:.6e}"
        )

    lo, hi = 1e-7, 1e8
    if compressibility_ratio(lo, d) < target:
        raise DegenerateStateError("state too dilute for the tabulated fugacity range")
    # bisection on log a; G is monotone decreasing
    for _ in range(80):
        mid = math.sqrt(lo * hi)
        if compressibility_ratio(mid, d) > target:
            lo = mid
        else:
            hi = mid
    a = math.sqrt(lo * hi)
    # Newton polish on H(la) = log G(e^la) - log target, using
    # a F2' = d F0 and a F0' = quadrature derivative
    for _ in range(8):
        f0 = occupancy_moment(0, a, d)
        f2 = occupancy_moment(2, a, d)
        g = f2 / (2.0 * f0 ** ((d + 2.0) / d))
        df0 = a * occupancy_moment_deriv(0, a, d)
        dlog = d * f0 / f2 - ((d + 2.0) / d) * df0 / f0
        step = -(math.log(g) - math.log(target)) / dlog
        a *= math.exp(np.clip(step, -2.0, 2.0))
        if abs(step) < 0.25 * rtol:
            break
    b = (rho / occupancy_moment(0, a, d)) ** (2.0 / d)
    # post-condition: reproduce the inputs
    check = equilibrium_moments(FermiDiracParams(a=a, b=b, u=np.zeros(d)))
    if abs(check.rho - rho) > 1e-10 * rho or abs(check.e - e) > 1e-10 * e:
        raise ArithmeticError("moment inversion failed to converge")
    return a, b


def match_moments_on_grid(
    grid: VelocityGrid,
    rho: np.ndarray,
    u: np.ndarray,
    e: np.ndarray,
    rtol: float = 1e-13,
    max_iter: int = 60,
    seed: tuple[np.ndarray, np.ndarray, np.ndarray] | None = None,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Batched Newton for (a, b, u) matching *discrete-sum* moments.

    Continuum inversion leaves an O(grid tail) mismatch between the target
    moments and the discrete sums of the resulting occupancy; relaxation
    schemes that must conserve to 1e-10 per run need the discrete match.
    Inputs are broadcast 1-D batches: rho (C,), u (C, d), e (C,).  Returns
    (a, b, u_matched) where u_matched absorbs the grid correction to the
    drift.  An optional seed (a, b, u) warm-starts the iteration, for
    repeated calls along a time integration.  Raises DegenerateStateError
    naming the first offending cell if Newton fails.
    """
    rho = np.atleast_1d(np.asarray(rho, dtype=float))
    e = np.atleast_1d(np.asarray(e, dtype=float))
    u = np.atleast_2d(np.asarray(u, dtype=float))
    d = grid.d
    cells = rho.shape[0]

    # the iterate u_it is distinct from the input u: the latter stays part of
    # the target moments, the former is the drift unknown being solved for
    if seed is not None:
        la = np.log(np.asarray(seed[0], dtype=float)).copy()
        lb = np.log(np.asarray(seed[1], dtype=float)).copy()
        u_it = np.array(seed[2], dtype=float)
    else:
        # seed from the continuum inversion of the batch means (cheap, robust)
        a0, b0 = invert_moments(float(rho.mean()), float(e.mean()), d)
        la = np.full(cells, math.log(a0))
        lb = np.full(cells, math.log(b0))
        u_it = u.copy()

    nodes = grid.nodes
    w = grid.weight
    v2 = grid.speed_sq
    target = np.concatenate(
        [rho[:, None], rho[:, None] * u, (rho * (2.0 * e + np.sum(u * u, axis=1)))[:, None]],
        axis=1,
    )
    # one scale per cell: zero targets (resting drift) are judged against
    # the cell's dominant moment, not against themselves
    scale = np.maximum(np.max(np.abs(target), axis=1, keepdims=True), 1e-30)

    for it in range(max_iter):
        a = np.exp(la)[:, None]
        b = np.exp(lb)[:, None]
        du = nodes[None, :, :] - u_it[:, None, :]
        r2 = np.sum(du * du, axis=2)
        m = a * np.exp(-r2 / (2.0 * b))
        p = m / (1.0 + m)
        q = p / (1.0 + m)  # P(1-P)

        mom = np.concatenate(
            [
                np.sum(p, axis=1)[:, None],
                p @ nodes,
                np.sum(p * v2[None, :], axis=1)[:, None],
            ],
            axis=1,
        ) * w
        res = mom - target
        if np.all(np.abs(res) <= rtol * scale):
            return np.exp(la), np.exp(lb), u_it

        # Jacobian wrt (log a, u_1..u_d, log b); unknown order matches rows
        n_unk = d + 2
        jac = np.empty((cells, n_unk, n_unk))
        dp = [q, *(q * du[:, :, k] / b for k in range(d)), q * r2 / (2.0 * b)]
        for col, dpc in enumerate(dp):
            jac[:, 0, col] = np.sum(dpc, axis=1) * w
            for k in range(d):
                jac[:, 1 + k, col] = np.sum(dpc * nodes[None, :, k], axis=1) * w
            jac[:, d + 1, col] = np.sum(dpc * v2[None, :], axis=1) * w

        try:
            step = np.linalg.solve(jac, -res[..., None])[..., 0]
        except np.linalg.LinAlgError as exc:
            bad = int(np.argmax(np.max(np.abs(res / scale), axis=1)))
            raise DegenerateStateError(f"singular moment Jacobian in cell {bad}") from exc
        step = np.clip(step, -1.5, 1.5)
        la += step[:, 0]
        u_it = u_it + step[:, 1 : 1 + d]
        lb += step[:, 1 + d]

    bad = int(np.argmax(np.max(np.abs(res / scale), axis=1)))
    raise DegenerateStateError(
        f"discrete moment match did not converge in cell {bad}: "
        f"max residual {float(np.max(np.abs(res / scale))):.3e}"
    )


def energy_flux_offset(params: FermiDiracParams, grid: VelocityGrid | None = None) -> float:
    """The ratio int |w|^4 P(1-P) / int |w|^2 P(1-P), w = v - u.

    This is the unique offset tau that makes the heat-flux vector
    (w/b^2)(|w|^2 - tau) orthogonal to every collision invariant in the
    P(1-P)-weighted pairing.  With a grid the discrete-sum ratio is
    returned, so the orthogonality is exact for the discrete pairing too.
    """
    if grid is not None:
        pfield = equilibrium_occupancy(params, grid)
        q = pfield * (1.0 - pfield)
        du = grid.nodes - params.u[None, :]
        r2 = np.sum(du * du, axis=1)
        return float(np.sum(r2 * r2 * q) / np.sum(r2 * q))
    d = params.d
    # b-scaling: the p-th centered moment of P(1-P) carries b^{(p+d)/2};
    # a F_p'(a) is the unit-scale value
    g2 = occupancy_moment_deriv(2, params.a, d) * params.a
    g4 = occupancy_moment_deriv(4, params.a, d) * params.a
    return params.b * g4 / g2


def energy_flux_offset_linearization(a0: float, b0: float, d: int = 3) -> tuple[float, float]:
    """Coefficients (c1, c2) of tau's first variation at epsilon = 0.

    For the modulated family a_eps = exp(a0 + eps*a1), b_eps = b0 e^{eps*b1},
    tau_eps = tau0 + eps*(c1*a1 + c2*b1) + O(eps^2).  c2 = tau0 (pure
    scaling); c1 comes from the fugacity derivative of the moment ratio.
    """
    alpha = math.exp(a0)
    g2 = alpha * occupancy_moment_deriv(2, alpha, d)
    g4 = alpha * occupancy_moment_deriv(4, alpha, d)
    tau0 = b0 * g4 / g2
    # a d/da of g_p = a F_p' is the closed quadrature moment of
    # M(1-M)/(1+M)^3 (one more fugacity derivative, no finite differences)
    k2 = _occupancy_curvature(2, alpha, d)
    k4 = _occupancy_curvature(4, alpha, d)
    c1 = b0 * (k4 * g2 - g4 * k2) / g2**2
    return c1, tau0


def _occupancy_curvature(p: int, a: float, d: int) -> float:
    """a * d/da of (a F_p'), i.e. int |z|^p M(1-M)/(1+M)^3 dz."""
    r, w = _panel_rule(_radial_cutoff(p, a, d))
    m = a * np.exp(-0.5 * r * r)
    return _sphere_area(d) * float(
        np.sum(w * r ** (p + d - 1) * m * (1.0 - m) / (1.0 + m) ** 3)
    )
