"""Entropy functionals, fluctuation bounds, and the evolution identity.

Everything here is a pure reduction over snapshots: the modulated entropy
H(f|P_eps) and its quadratic lower bound, the renormalized fluctuation
fields with their L2 and sup bounds, the Young pair, the kernel-distance
of (g_hat - h_hat)/(1+M), and the frame-by-frame bookkeeping that lets a
scaled run be checked against the modulated-entropy evolution identity

    H/eps^2 (t) = H/eps^2 (0) - dissipation - acceleration coupling
                  - heat flux - momentum flux + pressure difference,

with every term evaluated by the same grid quadratures the solver uses.
LedgerObserver plugs into run_scaled's observer hook and collects one row
per recorded frame; identity_residual consumes the finished ledger.

Inequality checks always report margins, never a bare pass/fail.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

from .equilibria import FermiDiracParams, PerturbedParams, energy_flux_offset
from .grids import SpatialGrid, VelocityGrid
from .linearized import LinearizedOperator
from .transport import DistributionField, HomogeneousHistory, ScaledRunResult

__all__ = [
    "IncompleteLedgerError",
    "GridMismatchError",
    "relative_entropy_density",
    "modulated_entropy",
    "FluctuationFields",
    "compute_fluctuations",
    "FluctuationReport",
    "fluctuation_bounds",
    "density_control_sup",
    "young_h",
    "young_h_star",
    "YoungReport",
    "young_pair",
    "relaxation_distance",
    "key_identity_sides",
    "ModulationRates",
    "acceleration_fields",
    "pressure_functional",
    "frame_diagnostics",
    "EntropyLedger",
    "LedgerObserver",
    "IdentityReport",
    "identity_residual",
    "homogeneous_identity_residual",
    "mollifier_bump",
    "LimitProfileReport",
    "limit_profile_error",
]


class IncompleteLedgerError(RuntimeError):
    """A ledger field needed by the identity is missing or not finite."""


class GridMismatchError(ValueError):
    """Field shapes disagree with the grids they are paired with."""


# ---------------------------------------------------------------------------
# modulated entropy
# ---------------------------------------------------------------------------


def relative_entropy_density(f: np.ndarray, p: np.ndarray) -> np.ndarray:
    """Pointwise h(f|p) = f log(f/p) + (1-f) log((1-f)/(1-p)).

    Guarded at f in {0, 1} by continuity (0 log 0 = 0); requires
    0 < p < 1.  The value is clamped at zero per node: it is nonnegative
    analytically and only roundoff near f = p can dip below.
    """
    f = np.asarray(f, dtype=float)
    p = np.broadcast_to(np.asarray(p, dtype=float), f.shape)
    out = np.zeros(f.shape)
    m = f > 0.0
    out[m] += f[m] * (np.log(f[m]) - np.log(p[m]))
    m = f < 1.0
    out[m] += (1.0 - f[m]) * (np.log1p(-f[m]) - np.log1p(-p[m]))
    return np.maximum(out, 0.0)


def modulated_entropy(
    f: np.ndarray,
    params: PerturbedParams,
    vgrid: VelocityGrid,
    sgrid: Optional[SpatialGrid] = None,
) -> tuple[float, float]:
    """H(f|P_eps) and its quadratic lower bound int (sqrt f - sqrt P)^2.

    f has shape params.a1.shape + (vgrid.size,); the x-integral uses the
    grid's cell volume when sgrid is given and unit volume otherwise
    (single-cell and homogeneous states).
    """
    p = params.occupancy_field(vgrid)
    if np.asarray(f).shape != p.shape:
        raise GridMismatchError(f"f shape {np.shape(f)} != {p.shape}")
    cellw = vgrid.weight * (sgrid.cell_volume if sgrid is not None else 1.0)
    h = float(relative_entropy_density(f, p).sum()) * cellw
    low = float(((np.sqrt(f) - np.sqrt(p)) ** 2).sum()) * cellw
    return h, low


# ---------------------------------------------------------------------------
# renormalized fluctuations
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class FluctuationFields:
    """g_eps, g_hat, h_hat and the residuals of their defining identities.

    recon_f and recon_comp are the sup errors of f = P(1+eps g_hat)^2 and
    1-f = (1-P)(1+eps h_hat)^2; both are algebraic rearrangements, so the
    residuals sit at roundoff.
    """

    g_eps: np.ndarray
    g_hat: np.ndarray
    h_hat: np.ndarray
    recon_f: float
    recon_comp: float


def compute_fluctuations(
    f: np.ndarray, params: PerturbedParams, vgrid: VelocityGrid
) -> FluctuationFields:
    f = np.asarray(f, dtype=float)
    p = params.occupancy_field(vgrid)
    if f.shape != p.shape:
        raise GridMismatchError(f"f shape {f.shape} != {p.shape}")
    eps = params.epsilon
    base = FermiDiracParams(math.exp(params.a0), params.b0, np.zeros(vgrid.d))
    p0 = base.occupancy(vgrid.nodes)
    g_eps = (f - p0) / (eps * p0)
    g_hat = (np.sqrt(f / p) - 1.0) / eps
    h_hat = (np.sqrt((1.0 - f) / (1.0 - p)) - 1.0) / eps
    recon_f = float(np.max(np.abs(p * (1.0 + eps * g_hat) ** 2 - f)))
    recon_comp = float(np.max(np.abs((1.0 - p) * (1.0 + eps * h_hat) ** 2 - (1.0 - f))))
    return FluctuationFields(g_eps, g_hat, h_hat, recon_f, recon_comp)


@dataclass(frozen=True)
class FluctuationReport:
    """Margins of the two fluctuation bounds.

    lhs_l2 is int int P g_hat^2 + (1-P) h_hat^2; its bound is H/eps^2 and
    margin_l2 the difference.  sup_norm is |eps sqrt(P) g_hat|_inf +
    |eps h_hat|_inf; its bound is 4 + sqrt(c0) with c0 the (supplied or
    observed) entropy constant, margin_sup the difference.
    """

    lhs_l2: float
    bound_l2: float
    margin_l2: float
    sup_norm: float
    bound_sup: float
    margin_sup: float
    c0: float


def fluctuation_bounds(
    f: np.ndarray,
    params: PerturbedParams,
    vgrid: VelocityGrid,
    sgrid: Optional[SpatialGrid] = None,
    c0: Optional[float] = None,
) -> FluctuationReport:
    """Check the L2 and uniform fluctuation bounds, returning margins.

    With c0 = None the observed H/eps^2 stands in for the initial-entropy
    constant (the uniform bound's 4 + sqrt(c0) is far from tight, so the
    observed value is the honest default to report against).
    """
    eps = params.epsilon
    p = params.occupancy_field(vgrid)
    fl = compute_fluctuations(f, params, vgrid)
    cellw = vgrid.weight * (sgrid.cell_volume if sgrid is not None else 1.0)
    lhs_l2 = float((p * fl.g_hat**2 + (1.0 - p) * fl.h_hat**2).sum()) * cellw
    h, _ = modulated_entropy(f, params, vgrid, sgrid)
    bound_l2 = h / eps**2
    if c0 is None:
        c0 = bound_l2
    sup_norm = float(
        np.max(np.abs(eps * np.sqrt(p) * fl.g_hat)) + np.max(np.abs(eps * fl.h_hat))
    )
    bound_sup = 4.0 + math.sqrt(max(c0, 0.0))
    return FluctuationReport(
        lhs_l2=lhs_l2,
        bound_l2=bound_l2,
        margin_l2=bound_l2 - lhs_l2,
        sup_norm=sup_norm,
        bound_sup=bound_sup,
        margin_sup=bound_sup - sup_norm,
        c0=c0,
    )


def density_control_sup(f: np.ndarray, base: FermiDiracParams, vgrid: VelocityGrid) -> float:
    """sup over cells of int P0 ((f - P0)/P0)^2 dv.

    The boundedness hypothesis monitored across sweeps: the value itself
    is recorded, stability in eps is what acceptance checks.
    """
    p0 = base.occupancy(vgrid.nodes)
    f = np.asarray(f, dtype=float)
    val = ((f - p0) ** 2 / p0).sum(axis=-1) * vgrid.weight
    return float(np.max(val))


# ---------------------------------------------------------------------------
# Young pair
# ---------------------------------------------------------------------------


def young_h(z):
    """h(z) = (1+z) log(1+z) - z, defined for z > -1, nonnegative."""
    z = np.asarray(z, dtype=float)
    if np.any(z <= -1.0):
        raise ValueError("young_h requires z > -1")
    out = (1.0 + z) * np.log1p(z) - z
    return float(out) if out.ndim == 0 else out


def young_h_star(p):
    """Legendre transform of young_h: h*(p) = e^p - p - 1."""
    p = np.asarray(p, dtype=float)
    out = np.expm1(p) - p
    return float(out) if out.ndim == 0 else out


@dataclass(frozen=True)
class YoungReport:
    h: float
    h_star: float
    product: float
    bound: float
    slack: float


def young_pair(z: float, p: float, lam: float = 1.0) -> YoungReport:
    """Evaluate p|z| <= lam h*(p) + (1/lam) h(z) and report the slack."""
    if not 0.0 < lam <= 1.0:
        raise ValueError("lam must lie in (0, 1]")
    h = float(young_h(z))
    hs = float(young_h_star(p))
    product = p * abs(z)
    bound = lam * hs + h / lam
    return YoungReport(h=h, h_star=hs, product=product, bound=bound, slack=bound - product)


# ---------------------------------------------------------------------------
# relaxation distance and the key collision-bracket identity
# ---------------------------------------------------------------------------


def relaxation_distance(f: np.ndarray, op: LinearizedOperator, eps: float = 1.0) -> float:
    """Norm of the kernel-orthogonal part of (g_hat - h_hat)/(1+M).

    The projection is taken in op's weighted inner product (the same
    geometry the spectral-gap analysis uses), the norm in L2(P dv).  eps
    only rescales the fluctuations, so the trajectory shape of the
    distance is eps-free.
    """
    grid = op.grid
    f = np.asarray(f, dtype=float).reshape(-1)
    if f.shape != (grid.size,):
        raise GridMismatchError("f must be a single velocity slice on op's grid")
    m = op.params.exponent_weight(grid.nodes)
    p = m / (1.0 + m)
    g_hat = (np.sqrt(f / p) - 1.0) / eps
    h_hat = (np.sqrt((1.0 - f) / (1.0 - p)) - 1.0) / eps
    phi = (g_hat - h_hat) / (1.0 + m)
    basis = op.kernel_g
    gram = basis.T @ (op.weight[:, None] * basis)
    rhs = basis.T @ (op.weight * phi)
    resid = phi - basis @ np.linalg.solve(gram, rhs)
    return math.sqrt(max(op.inner(resid, resid), 0.0))


def key_identity_sides(f4, p4, eps: float) -> tuple[np.ndarray, np.ndarray]:
    """Both sides of the collision-bracket expansion on (v, v*, v', v*').

    f4 and p4 hold occupancies at the four collision slots along the last
    axis.  The left side is the gain/loss square-root bracket evaluated
    directly; the right side is its exact polynomial expansion in the
    renormalized fluctuations, grouped by powers of eps.  When the p4
    quadruple comes from one local equilibrium on a true collision (so
    M M* = M' M*'), the two agree to machine precision.
    """
    f = np.asarray(f4, dtype=float)
    p = np.asarray(p4, dtype=float)
    if f.shape[-1] != 4 or p.shape[-1] != 4:
        raise ValueError("last axis must hold the four collision slots")
    g = (np.sqrt(f / p) - 1.0) / eps
    h = (np.sqrt((1.0 - f) / (1.0 - p)) - 1.0) / eps
    lhs = np.sqrt(f[..., 2] * f[..., 3] * (1.0 - f[..., 0]) * (1.0 - f[..., 1])) - np.sqrt(
        f[..., 0] * f[..., 1] * (1.0 - f[..., 2]) * (1.0 - f[..., 3])
    )
    m = p / (1.0 - p)
    lam = (
        m[..., 0]
        * m[..., 1]
        / ((1.0 + m[..., 0]) * (1.0 + m[..., 1]) * (1.0 + m[..., 2]) * (1.0 + m[..., 3]))
    )
    g0, g1, g2, g3 = (g[..., k] for k in range(4))
    h0, h1, h2, h3 = (h[..., k] for k in range(4))
    o1 = g2 - h2 + g3 - h3 - (g0 - h0) - (g1 - h1)
    o2 = (
        g2 * g3
        - g0 * g1
        + h0 * h1
        - h2 * h3
        + g2 * h0
        - g0 * h2
        + g2 * h1
        - g0 * h3
        + g3 * h0
        - g1 * h2
        + g3 * h1
        - g1 * h3
    )
    o3 = (
        g2 * g3 * (h0 + h1)
        - g0 * g1 * (h2 + h3)
        + h0 * h1 * (g2 + g3)
        - h2 * h3 * (g0 + g1)
    )
    o4 = g2 * g3 * h0 * h1 - g0 * g1 * h2 * h3
    rhs = np.sqrt(lam) * (eps * o1 + eps**2 * o2 + eps**3 * o3 + eps**4 * o4)
    return lhs, rhs


# ---------------------------------------------------------------------------
# evolution-identity bookkeeping
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ModulationRates:
    """Time derivatives of the modulation triple at one instant."""

    da1: np.ndarray
    du: np.ndarray
    db1: np.ndarray


def acceleration_fields(
    params: PerturbedParams,
    sgrid: SpatialGrid,
    rates: Optional[ModulationRates] = None,
    tau_field: Optional[np.ndarray] = None,
    tau_grid: Optional[VelocityGrid] = None,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """The three rows of the acceleration operator on the modulation.

    Row 2 is dt u + (u.grad) u + (1/eps)(b_eps grad a1
    + (tau_eps/2) grad b1).  The tau_eps/2 is forced twice over: the
    chain rule on |v - eps u|^2/(2 b_eps) produces no standalone
    tau grad b1 term, so after splitting off the heat flux
    (1/2) b_eps Psi . grad b1 exactly tau_eps/2 must return here; and the
    linearized momentum flux is K2 a1 + K4 b1/(2 b0), whose gradient is
    grad(b0 a1 + (tau0/2) b1) to leading order.  tau_eps comes from
    tau_field if supplied, else from the cellwise moment ratio on
    tau_grid, else from the analytic tables.
    """
    if params.a1.shape != tuple(sgrid.shape):
        raise GridMismatchError("modulation fields must live on sgrid")
    eps = params.epsilon
    u = params.u
    d = params.d
    ga1 = sgrid.gradient(params.a1)
    gb1 = sgrid.gradient(params.b1)
    div_u = sgrid.divergence(np.moveaxis(u, -1, 0))
    b_eps = params.temperature_field()
    if tau_field is None:
        tau_field = _tau_eps_field(params, tau_grid)
    adv = lambda s_grad: np.einsum("...i,i...->...", u, s_grad)
    a1_row = adv(ga1) + (rates.da1 if rates is not None else 0.0)
    u_row = np.empty(u.shape)
    for j in range(d):
        gu_j = sgrid.gradient(u[..., j])
        u_row[..., j] = adv(gu_j) + (b_eps * ga1[j] + 0.5 * tau_field * gb1[j]) / eps
    if rates is not None:
        u_row += rates.du
    b1_row = adv(gb1) + (2.0 / (d * eps)) * div_u
    if rates is not None:
        b1_row += rates.db1
    return a1_row, u_row, b1_row


def _tau_eps_field(params: PerturbedParams, vgrid: Optional[VelocityGrid]) -> np.ndarray:
    """Cellwise heat-flux offset of the modulated equilibria."""
    if vgrid is not None:
        p = params.occupancy_field(vgrid)
        q = p * (1.0 - p)
        r2 = _centered_speed_sq(params, vgrid)
        return np.sum(r2 * r2 * q, axis=-1) / np.sum(r2 * q, axis=-1)
    a_fld = params.fugacity_field()
    b_fld = params.temperature_field()
    out = np.empty(params.a1.shape)
    flat_a = a_fld.reshape(-1)
    flat_b = b_fld.reshape(-1)
    flat = out.reshape(-1)
    zero = np.zeros(params.d)
    for i in range(flat.size):
        flat[i] = energy_flux_offset(FermiDiracParams(flat_a[i], flat_b[i], zero))
    return out


def _centered_speed_sq(params: PerturbedParams, vgrid: VelocityGrid) -> np.ndarray:
    """|v - eps u(x)|^2 with shape spatial + (vgrid.size,)."""
    drift = params.drift_field()
    cross = drift @ vgrid.nodes.T
    return vgrid.speed_sq[None, :].reshape((1,) * params.a1.ndim + (-1,)) - 2.0 * cross.reshape(
        params.a1.shape + (-1,)
    ) + np.sum(drift * drift, axis=-1)[..., None]


def pressure_functional(
    params: PerturbedParams, vgrid: VelocityGrid, sgrid: SpatialGrid
) -> float:
    """int int (|v|^2 / b_eps) m/(1+m) dv dx with the drift removed.

    m is the undrifted modulated weight exp(a0 + eps a1 - |v|^2/(2 b_eps));
    dropping the drift is a continuum translation of v, so on the grid the
    difference is pure tail truncation.
    """
    b_eps = params.temperature_field()[..., None]
    logm = (params.a0 + params.epsilon * params.a1)[..., None] - vgrid.speed_sq / (2.0 * b_eps)
    m = np.exp(logm)
    val = (vgrid.speed_sq / b_eps) * (m / (1.0 + m))
    return float(val.sum()) * vgrid.weight * sgrid.cell_volume


def frame_diagnostics(
    state: DistributionField,
    params: PerturbedParams,
    rates: Optional[ModulationRates] = None,
) -> dict:
    """All per-frame ledger entries for one snapshot.

    Returns plain floats keyed by the EntropyLedger field names; the
    acceleration/flux entries are the identity's integrands at this
    instant (time integration happens in identity_residual).
    """
    sg, vg = state.sgrid, state.vgrid
    if params.a1.shape != tuple(sg.shape):
        raise GridMismatchError("modulation fields must match the run's spatial grid")
    f = state.f
    eps = params.epsilon
    d = vg.d
    cellw = vg.weight * sg.cell_volume

    p_eps = params.occupancy_field(vg)
    h_mod = float(relative_entropy_density(f, p_eps).sum()) * cellw
    sqf = np.sqrt(f)
    sqp = np.sqrt(p_eps)
    quad_lower = float(((sqf - sqp) ** 2).sum()) * cellw

    base = FermiDiracParams(math.exp(params.a0), params.b0, np.zeros(d))
    p0 = base.occupancy(vg.nodes)
    h_rel = float(relative_entropy_density(f, p0).sum()) * cellw
    control_sup = density_control_sup(f, base, vg)

    # fluctuation margins (pointwise-exact rearrangements of the sums above)
    g_hat = (sqf / sqp - 1.0) / eps
    h_hat = (np.sqrt((1.0 - f) / (1.0 - p_eps)) - 1.0) / eps
    lhs_l2 = float((p_eps * g_hat**2 + (1.0 - p_eps) * h_hat**2).sum()) * cellw
    sup_norm = float(
        np.max(np.abs(eps * sqp * g_hat)) + np.max(np.abs(eps * h_hat))
    )
    del sqf, g_hat, h_hat

    # moment contractions of f against 1, v, v (x) v, v|v|^2
    nodes = vg.nodes
    sp2 = vg.speed_sq
    wv = vg.weight
    m0 = f.sum(axis=-1) * wv
    m1 = f @ nodes * wv
    pair = np.stack([nodes[:, i] * nodes[:, j] for i in range(d) for j in range(d)], axis=-1)
    m2 = (f @ pair * wv).reshape(f.shape[:-1] + (d, d))
    m2tr = np.trace(m2, axis1=-2, axis2=-1)
    m3 = f @ (nodes * sp2[:, None]) * wv

    s_drift = params.drift_field()
    s2 = np.sum(s_drift * s_drift, axis=-1)
    sm1 = np.einsum("...i,...i->...", s_drift, m1)
    n1 = m1 - s_drift * m0[..., None]
    w_mat = (
        m2
        - s_drift[..., :, None] * m1[..., None, :]
        - s_drift[..., None, :] * m1[..., :, None]
        + s_drift[..., :, None] * s_drift[..., None, :] * m0[..., None, None]
    )
    n2 = m2tr - 2.0 * sm1 + s2 * m0
    t3 = (
        m3
        - 2.0 * np.einsum("...ij,...j->...i", m2, s_drift)
        + s2[..., None] * m1
        - s_drift * m2tr[..., None]
        + 2.0 * s_drift * sm1[..., None]
        - s_drift * (s2 * m0)[..., None]
    )

    b_eps = params.temperature_field()
    q_w = p_eps * (1.0 - p_eps)
    r2 = _centered_speed_sq(params, vg)
    tau = np.sum(r2 * r2 * q_w, axis=-1) / np.sum(r2 * q_w, axis=-1)
    del p_eps, sqp, q_w, r2

    a1_row, u_row, b1_row = acceleration_fields(params, sg, rates, tau_field=tau)
    acc = sg.integrate(
        a1_row * m0
        + np.einsum("...i,...i->...", u_row, n1) / b_eps
        + b1_row * n2 / (2.0 * b_eps)
    )

    gb1 = sg.gradient(params.b1)
    heat_vec = t3 - tau[..., None] * n1
    heat = sg.integrate(
        np.einsum("i...,...i->...", gb1, heat_vec) / b_eps
    )

    grad_u = np.stack([sg.gradient(params.u[..., j]) for j in range(d)], axis=-1)
    # grad_u[i, ..., j] = d_i u_j; Phi is traceless, (w w^T - |w|^2 I/d)/b,
    # so the n2 correction carries 1/d (anything else leaves a residual
    # |w|^2 div u / b term the identity has no home for)
    div_u = np.trace(np.moveaxis(grad_u, 0, -2), axis1=-2, axis2=-1)
    contract = np.einsum("...ij,i...j->...", w_mat, grad_u)
    mom = sg.integrate((contract - n2 * div_u / d) / b_eps)

    return {
        "h_rel": h_rel,
        "h_mod": h_mod,
        "quad_lower": quad_lower,
        "s_total": state.entropy(),
        "acc_integrand": acc,
        "heat_integrand": heat,
        "mom_integrand": mom,
        "pressure_value": pressure_functional(params, vg, sg),
        "control_sup": control_sup,
        "lhs_l2": lhs_l2,
        "sup_norm": sup_norm,
    }


_FRAME_KEYS = (
    "h_rel",
    "h_mod",
    "quad_lower",
    "s_total",
    "acc_integrand",
    "heat_integrand",
    "mom_integrand",
    "pressure_value",
    "control_sup",
    "lhs_l2",
    "sup_norm",
)


@dataclass
class EntropyLedger:
    """Frame-indexed entropy bookkeeping of one scaled run.

    diss_cum is the cumulative entropy removed by the collision substeps,
    taken straight from the solver (so for the BGK backend it is the
    backend's own dissipation; dissipation_source records which).  The
    *_integrand series are instantaneous; identity_residual integrates
    them.  margin_sup is measured against 4 + sqrt(c0) with c0 the
    initial H/eps^2 of this run.
    """

    eps: float
    d: int
    q_exp: Optional[float]
    dissipation_source: str
    times: np.ndarray
    h_rel: np.ndarray
    h_mod: np.ndarray
    quad_lower: np.ndarray
    s_total: np.ndarray
    diss_cum: np.ndarray
    acc_integrand: np.ndarray
    heat_integrand: np.ndarray
    mom_integrand: np.ndarray
    pressure_value: np.ndarray
    control_sup: np.ndarray
    lhs_l2: np.ndarray
    margin_l2: np.ndarray
    sup_norm: np.ndarray
    margin_sup: np.ndarray
    c0: float

    def __len__(self) -> int:
        return len(self.times)

    def records(self) -> list[dict]:
        """One JSON-ready dict per frame, in time order."""
        rows = []
        for k in range(len(self.times)):
            rows.append(
                {
                    "frame": k,
                    "time": float(self.times[k]),
                    "eps": self.eps,
                    "dissipation_source": self.dissipation_source,
                    "h_rel": float(self.h_rel[k]),
                    "h_mod": float(self.h_mod[k]),
                    "quad_lower": float(self.quad_lower[k]),
                    "s_total": float(self.s_total[k]),
                    "diss_cum": float(self.diss_cum[k]),
                    "acc_integrand": float(self.acc_integrand[k]),
                    "heat_integrand": float(self.heat_integrand[k]),
                    "mom_integrand": float(self.mom_integrand[k]),
                    "pressure_value": float(self.pressure_value[k]),
                    "control_sup": float(self.control_sup[k]),
                    "lhs_l2": float(self.lhs_l2[k]),
                    "margin_l2": float(self.margin_l2[k]),
                    "sup_norm": float(self.sup_norm[k]),
                    "margin_sup": float(self.margin_sup[k]),
                }
            )
        return rows


class LedgerObserver:
    """run_scaled observer producing an EntropyLedger.

    modulation is either a static PerturbedParams or a callable
    t -> PerturbedParams or t -> (PerturbedParams, ModulationRates);
    without rates the modulation is treated as frozen in time.  Use as

        obs = LedgerObserver(modulation, q_exp=scaling.q)
        result = run_scaled(..., observer=obs)
        ledger = obs.finalize(result)
    """

    def __init__(self, modulation, q_exp: Optional[float] = None):
        if callable(modulation):
            self._mod = modulation
        else:
            self._mod = lambda t, _p=modulation: (_p, None)
        self.q_exp = q_exp
        self._eps: Optional[float] = None
        self._d: Optional[int] = None

    def __call__(self, state: DistributionField, t: float, rec: int) -> dict:
        out = self._mod(t)
        params, rates = out if isinstance(out, tuple) else (out, None)
        self._eps = params.epsilon
        self._d = state.vgrid.d
        return frame_diagnostics(state, params, rates)

    def finalize(self, result: ScaledRunResult) -> EntropyLedger:
        rows = result.observer_rows
        if len(rows) != len(result.times) or self._eps is None:
            raise IncompleteLedgerError("observer rows do not cover the recorded times")
        series = {k: np.array([r[k] for r in rows]) for k in _FRAME_KEYS}
        eps = self._eps
        c0 = float(series["h_mod"][0]) / eps**2
        bound_sup = 4.0 + math.sqrt(max(c0, 0.0))
        return EntropyLedger(
            eps=eps,
            d=self._d,
            q_exp=self.q_exp,
            dissipation_source=getattr(result, "backend", "unknown"),
            times=np.asarray(result.times, dtype=float),
            h_rel=series["h_rel"],
            h_mod=series["h_mod"],
            quad_lower=series["quad_lower"],
            s_total=series["s_total"],
            diss_cum=np.cumsum(result.collision_entropy_drop),
            acc_integrand=series["acc_integrand"],
            heat_integrand=series["heat_integrand"],
            mom_integrand=series["mom_integrand"],
            pressure_value=series["pressure_value"],
            control_sup=series["control_sup"],
            lhs_l2=series["lhs_l2"],
            margin_l2=series["h_mod"] / eps**2 - series["lhs_l2"],
            sup_norm=series["sup_norm"],
            margin_sup=bound_sup - series["sup_norm"],
            c0=c0,
        )


def _cumtrapz(y: np.ndarray, t: np.ndarray) -> np.ndarray:
    out = np.zeros(len(y))
    out[1:] = np.cumsum(0.5 * (y[1:] + y[:-1]) * np.diff(t))
    return out


@dataclass(frozen=True)
class IdentityReport:
    """Per-frame residual of the modulated-entropy evolution identity.

    terms maps each right-hand-side contribution to its cumulative series
    (sign as it enters the identity); scale is the per-frame magnitude the
    residual is measured against (the largest |term|, floored so an
    all-zero equilibrium run reports residual 0, not 0/0).
    """

    residual: np.ndarray
    lhs: np.ndarray
    rhs: np.ndarray
    terms: dict
    scale: np.ndarray
    dissipation_source: str


def identity_residual(ledger: EntropyLedger) -> IdentityReport:
    """LHS - RHS of the evolution identity, relative to the largest term."""
    required = (
        "times",
        "h_mod",
        "diss_cum",
        "acc_integrand",
        "heat_integrand",
        "mom_integrand",
        "pressure_value",
    )
    for name in required:
        arr = getattr(ledger, name)
        if arr is None or not np.all(np.isfinite(arr)):
            raise IncompleteLedgerError(f"ledger field {name} is missing or non-finite")
    eps = ledger.eps
    t = ledger.times
    lhs = ledger.h_mod / eps**2
    terms = {
        "initial": np.full(len(t), lhs[0]),
        "dissipation": -ledger.diss_cum / eps**2,
        "acceleration": -_cumtrapz(ledger.acc_integrand, t) / eps,
        "heat_flux": -_cumtrapz(ledger.heat_integrand, t) / (2.0 * eps**2),
        "momentum_flux": -_cumtrapz(ledger.mom_integrand, t) / eps**2,
        "pressure": (ledger.pressure_value - ledger.pressure_value[0]) / (ledger.d * eps**2),
    }
    rhs = sum(terms.values())
    scale = np.maximum.reduce([np.abs(v) for v in terms.values()] + [np.abs(lhs)])
    # every term above is a difference of O(pressure_value / eps^2) integrals,
    # so below roundoff on that magnitude the balance holds vacuously (an
    # equilibrium run must report 0, not noise/noise)
    atol = 1e-12 * max(1.0, float(np.max(np.abs(ledger.pressure_value))) / (ledger.d * eps**2))
    residual = np.where(scale > atol, np.abs(lhs - rhs) / np.maximum(scale, 1e-300), 0.0)
    return IdentityReport(
        residual=residual,
        lhs=lhs,
        rhs=rhs,
        terms=terms,
        scale=scale,
        dissipation_source=ledger.dissipation_source,
    )


def homogeneous_identity_residual(history: HomogeneousHistory, kn: float = 1.0) -> np.ndarray:
    """Residual of S(t) - S(0) = -(1/kn) int D for a homogeneous run.

    The spatially homogeneous reduction of the evolution identity: with a
    frozen background every modulation term vanishes and the entropy
    balance is all that remains.  D is the recorded instantaneous
    dissipation, integrated by the trapezoid rule.
    """
    s = history.entropy
    d_cum = _cumtrapz(history.dissipation, history.times) / kn
    lhs = s - s[0]
    scale = np.maximum(np.abs(lhs), np.abs(d_cum))
    return np.where(scale > 0.0, np.abs(lhs + d_cum) / np.maximum(scale, 1e-300), 0.0)


# ---------------------------------------------------------------------------
# limit profile
# ---------------------------------------------------------------------------


def mollifier_bump(nodes: np.ndarray, center, radius: float) -> np.ndarray:
    """Smooth compactly supported bump exp(1 - 1/(1 - |v-c|^2/r^2))."""
    c = np.asarray(center, dtype=float)
    r2 = np.sum((nodes - c[None, :]) ** 2, axis=-1) / radius**2
    out = np.zeros(nodes.shape[0])
    inside = r2 < 1.0
    out[inside] = np.exp(1.0 - 1.0 / (1.0 - r2[inside]))
    return out


@dataclass(frozen=True)
class LimitProfileReport:
    """Weak-topology distance of g_eps from the hydrodynamic profile.

    pair_errors holds, per test function, the L2(x) norm of the pairing of
    g_eps - g_limit against it in (1+|v|^2) P0 dv; pair_scales holds the
    same pairing of g_limit alone, for context.  rms aggregates the
    errors.
    """

    pair_errors: dict
    pair_scales: dict
    rms: float


def limit_profile_error(
    f: np.ndarray,
    eps: float,
    euler,
    base: FermiDiracParams,
    vgrid: VelocityGrid,
    sgrid: SpatialGrid,
    test_functions: Optional[dict] = None,
) -> LimitProfileReport:
    """Pair g_eps = (f - P0)/(eps P0) against a test family vs the profile.

    euler supplies the hydrodynamic triple (abar, ubar, bbar) on sgrid;
    the profile is (1/(1+M0)) (abar + ubar.v/b0 + bbar |v|^2/(2 b0)).  The
    default test family is {1, each velocity component, |v|^2, two
    mollifier bumps}; pass test_functions to override.
    """
    f = np.asarray(f, dtype=float)
    shape = tuple(sgrid.shape)
    if f.shape != shape + (vgrid.size,):
        raise GridMismatchError(f"f shape {f.shape} != {shape + (vgrid.size,)}")
    abar = np.asarray(euler.abar, dtype=float)
    ubar = np.asarray(euler.ubar, dtype=float)
    bbar = np.asarray(euler.bbar, dtype=float)
    if abar.shape != shape or bbar.shape != shape or ubar.shape != shape + (vgrid.d,):
        raise GridMismatchError("hydrodynamic fields do not match the spatial grid")

    nodes = vgrid.nodes
    sp2 = vgrid.speed_sq
    m0 = base.exponent_weight(nodes)
    p0 = m0 / (1.0 + m0)
    b0 = base.b
    g_eps = (f - p0) / (eps * p0)
    g_lim = (
        abar[..., None]
        + (ubar @ nodes.T) / b0
        + bbar[..., None] * sp2 / (2.0 * b0)
    ) / (1.0 + m0)

    if test_functions is None:
        vmax = vgrid.vmax
        test_functions = {"const": np.ones(vgrid.size)}
        for i in range(vgrid.d):
            test_functions[f"v{i}"] = nodes[:, i]
        test_functions["speed_sq"] = sp2
        test_functions["bump_center"] = mollifier_bump(nodes, np.zeros(vgrid.d), 0.5 * vmax)
        off = np.zeros(vgrid.d)
        off[0] = math.sqrt(b0)
        test_functions["bump_offset"] = mollifier_bump(nodes, off, vmax / 3.0)

    wgt = (1.0 + sp2) * p0 * vgrid.weight
    diff = g_eps - g_lim
    errors = {}
    scales = {}
    for name, phi in test_functions.items():
        pair = diff @ (phi * wgt)
        ref = g_lim @ (phi * wgt)
        errors[name] = math.sqrt(max(sgrid.integrate(pair**2), 0.0))
        scales[name] = math.sqrt(max(sgrid.integrate(ref**2), 0.0))
    rms = math.sqrt(sum(e**2 for e in errors.values()) / len(errors))
    return LimitProfileReport(pair_errors=errors, pair_scales=scales, rms=rms)
