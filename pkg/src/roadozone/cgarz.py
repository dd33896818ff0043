"""Second-order traffic solver: flux family evaluation and Godunov stepping.

The flux has a single-valued free branch (Greenshields) up to rho_f and a
congested branch interpolating between a linear lower envelope f and the
Greenshields parabola g, weighted by the driver property w. The scheme is
a two-equation cell-transmission (supply/demand) Godunov update.

All evaluation functions accept scalars or numpy arrays.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .config import FluxModel, TrafficLightPolicy, TrafficState
from .units import KMH2_TO_MS2, KMH_TO_MS

log = logging.getLogger(__name__)

_VAC = 1e-12  # density below this is treated as vacuum


class DomainError(ValueError):
    pass


def lambda_interp(w, flux: FluxModel):
    """Affine interpolation weight of the congested branch, in [0, 1]."""
    lam = (np.asarray(w, dtype=float) - flux.w_l) / (flux.w_r - flux.w_l)
    if np.any(lam < -1e-9) or np.any(lam > 1 + 1e-9):
        log.debug("w outside [w_l, w_r]; clamping lambda")
    out = np.clip(lam, 0.0, 1.0)
    return out.item() if np.isscalar(w) else out


def flux_eval(rho, w, flux: FluxModel):
    """Flux Q(rho, w) in veh/h."""
    rho_a = np.asarray(rho, dtype=float)
    if np.any(rho_a < -1e-9) or np.any(rho_a > flux.rho_max_vehkm * (1 + 1e-9)):
        raise DomainError("density outside [0, rho_max]")
    lam = lambda_interp(w, flux)
    free = flux.g_upper(rho_a)
    cong = (1.0 - lam) * flux.f_lower(rho_a) + lam * flux.g_upper(rho_a)
    out = np.where(rho_a <= flux.rho_f_vehkm, free, cong)
    return out.item() if np.isscalar(rho) else out


def velocity_eval(rho, w, flux: FluxModel):
    """Velocity V(rho, w) = Q/rho in km/h; V(0, w) = Vmax by continuity."""
    rho_a = np.asarray(rho, dtype=float)
    if np.any(rho_a < -1e-9):
        raise DomainError("negative density")
    safe = np.where(rho_a > _VAC, rho_a, 1.0)
    v = np.where(rho_a > _VAC,
                 flux_eval(np.clip(rho_a, 0, flux.rho_max_vehkm), w, flux) / safe,
                 flux.v_max_kmh)
    out = np.clip(v, 0.0, flux.v_max_kmh)
    return out.item() if np.isscalar(rho) else out


def velocity_drho(rho, w, flux: FluxModel):
    """Closed-form dV/drho, in (km/h)/(veh/km). At rho=0 the free-branch slope."""
    rho_a = np.asarray(rho, dtype=float)
    lam = lambda_interp(w, flux)
    vm, rm, rf = flux.v_max_kmh, flux.rho_max_vehkm, flux.rho_f_vehkm
    free = np.full_like(rho_a, -vm / rm)
    safe = np.where(rho_a > _VAC, rho_a, 1.0)
    # congested: V = vm (1 - rho/rm) ((1-lam) rf / rho + lam)
    cong = vm * (-1.0 / rm * ((1 - lam) * rf / safe + lam)
                 + (1.0 - rho_a / rm) * (-(1 - lam) * rf / safe**2))
    out = np.where(rho_a <= flux.rho_f_vehkm, free, cong)
    out = np.where(rho_a > _VAC, out, free)
    return out.item() if np.isscalar(rho) else out


def invert_velocity(v_target, w, flux: FluxModel):
    """Unique rho with V(rho, w) = v_target.

    Free branch inverts the Greenshields line; congested branch solves the
    closed-form quadratic and keeps the root inside [rho_f, rho_max]
    (ties toward rho_max).
    """
    v = np.asarray(v_target, dtype=float)
    if np.any(v < -1e-9) or np.any(v > flux.v_max_kmh * (1 + 1e-9)):
        raise DomainError("target speed outside [0, v_max]")
    v = np.clip(v, 0.0, flux.v_max_kmh)
    lam = np.broadcast_to(np.asarray(lambda_interp(w, flux), dtype=float), v.shape)
    vm, rm, rf = flux.v_max_kmh, flux.rho_max_vehkm, flux.rho_f_vehkm

    v_f = vm * (1.0 - rf / rm)  # speed at the branch junction (w-independent)
    rho_free = rm * (1.0 - v / vm)

    # congested: -(lam vm / rm) rho^2 + (lam vm - (1-lam) rf vm / rm - v) rho
    #            + (1-lam) rf vm = 0
    a2 = -(lam * vm / rm)
    b1 = lam * vm - (1.0 - lam) * rf * vm / rm - v
    c0 = (1.0 - lam) * rf * vm

    with np.errstate(divide="ignore", invalid="ignore"):
        # lam == 0 degenerates to the linear equation b1 rho + c0 = 0
        rho_lin = np.where(b1 != 0.0, -c0 / np.where(b1 != 0.0, b1, 1.0), rm)
        disc = np.maximum(b1 * b1 - 4.0 * a2 * c0, 0.0)
        sq = np.sqrt(disc)
        denom = np.where(a2 != 0.0, 2.0 * a2, 1.0)
        r_plus = (-b1 + sq) / denom
        r_minus = (-b1 - sq) / denom
        in_plus = (r_plus >= rf - 1e-6) & (r_plus <= rm + 1e-6)
        in_minus = (r_minus >= rf - 1e-6) & (r_minus <= rm + 1e-6)
        # exactly one root is admissible; ties toward rho_max
        rho_quad = np.where(in_plus & in_minus, np.maximum(r_plus, r_minus),
                            np.where(in_plus, r_plus, r_minus))
    rho_cong = np.where(np.abs(lam) < 1e-14, rho_lin, rho_quad)
    rho_cong = np.clip(rho_cong, rf, rm)

    out = np.where(v >= v_f, rho_free, rho_cong)
    return out.item() if np.isscalar(v_target) else out


def critical_density(w, flux: FluxModel):
    """Argmax of Q(., w) over [0, rho_max]."""
    lam = np.asarray(lambda_interp(w, flux), dtype=float)
    vm, rm, rf = flux.v_max_kmh, flux.rho_max_vehkm, flux.rho_f_vehkm

    # free-branch candidate: Greenshields vertex, capped at rho_f
    cand_free = np.full_like(lam, min(rm / 2.0, rf))
    # congested stationary point of (A + B rho)(1 - rho/rm), A=(1-lam)rf, B=lam
    with np.errstate(divide="ignore", invalid="ignore"):
        stat = rm / 2.0 - (1.0 - lam) * rf / np.where(lam > 0, 2.0 * lam, 1.0)
    cand_cong = np.where(lam > 1e-14, np.clip(stat, rf, rm), rf)

    q_free = flux_eval(cand_free, w, flux)
    q_cong = flux_eval(cand_cong, w, flux)
    out = np.where(np.asarray(q_cong) >= np.asarray(q_free), cand_cong, cand_free)
    return out.item() if np.isscalar(w) else out


def q_max(w, flux: FluxModel):
    """Maximum of the flux curve selected by w."""
    return flux_eval(critical_density(w, flux), w, flux)


def supply_demand(rho, w, flux: FluxModel):
    """Receiving capacity S and sending capacity D at a state (rho, w)."""
    rho_cr = critical_density(w, flux)
    qm = flux_eval(rho_cr, w, flux)
    q = flux_eval(rho, w, flux)
    supply = np.where(np.asarray(rho) <= rho_cr, qm, q)
    demand = np.where(np.asarray(rho) <= rho_cr, q, qm)
    if np.isscalar(rho):
        return supply.item(), demand.item()
    return supply, demand


@dataclass
class RiemannSolution:
    intermediate_rho: float
    intermediate_w: float
    flux_rho: float
    flux_y: float


def riemann_flux(left, right, flux: FluxModel) -> RiemannSolution:
    """Godunov interface flux between two states (rho, w).

    The intermediate state carries the left w (1-Riemann invariant) and the
    right speed; the density flux is the supply/demand minimum, and the
    property flux upwinds w from the left. Vacuum on the left sends nothing.
    """
    rho_l, w_l = left
    rho_r, w_r = right
    if rho_l <= _VAC:
        # vacuum: demand is zero; w* from the right is irrelevant to the flux
        return RiemannSolution(0.0, w_r, 0.0, 0.0)
    v_r = velocity_eval(rho_r, w_r, flux)
    rho_star = invert_velocity(v_r, w_l, flux)
    s_star, _ = supply_demand(rho_star, w_l, flux)
    _, d_left = supply_demand(rho_l, w_l, flux)
    f_rho = min(d_left, s_star)
    return RiemannSolution(rho_star, w_l, f_rho, w_l * f_rho)


def _q_at(rho, lam, flux: FluxModel):
    """Branch-selected flux with a precomputed interpolation weight."""
    vm, rm, rf = flux.v_max_kmh, flux.rho_max_vehkm, flux.rho_f_vehkm
    shape = 1.0 - rho / rm
    g = rho * vm * shape
    cong = (1.0 - lam) * rf * vm * shape + lam * g
    return np.where(rho <= rf, g, cong)


def _critical_and_qmax(lam, flux: FluxModel):
    """Vectorized critical density and flux maximum for given lam."""
    vm, rm, rf = flux.v_max_kmh, flux.rho_max_vehkm, flux.rho_f_vehkm
    stat = rm / 2.0 - (1.0 - lam) * rf / np.where(lam > 0, 2.0 * lam, 1.0)
    cand_cong = np.where(lam > 1e-14, np.clip(stat, rf, rm), rf)
    cand_free = min(rm / 2.0, rf)
    q_cong = _q_at(cand_cong, lam, flux)
    q_free = _q_at(np.asarray(cand_free, dtype=float), lam, flux)
    rho_cr = np.where(q_cong >= q_free, cand_cong, cand_free)
    return rho_cr, np.maximum(q_cong, q_free)


def _interface_fluxes(rho_l, w_l, rho_r, w_r, flux: FluxModel):
    """Vectorized supply/demand interface fluxes; returns (F_rho, F_y).

    Fused closed-form evaluation of velocity_eval / invert_velocity /
    supply_demand along the hot path (identical arithmetic, fewer passes).
    """
    vm, rm, rf = flux.v_max_kmh, flux.rho_max_vehkm, flux.rho_f_vehkm
    lam_l = np.clip((w_l - flux.w_l) / (flux.w_r - flux.w_l), 0.0, 1.0)
    lam_r = np.clip((w_r - flux.w_l) / (flux.w_r - flux.w_l), 0.0, 1.0)

    # downstream speed
    safe_r = np.where(rho_r > _VAC, rho_r, 1.0)
    v_r = np.where(rho_r > _VAC, _q_at(rho_r, lam_r, flux) / safe_r, vm)
    v_r = np.clip(v_r, 0.0, vm)

    # invert V(., w_l) = v_r
    v_f = vm * (1.0 - rf / rm)
    rho_free = rm * (1.0 - v_r / vm)
    a2 = -(lam_l * vm / rm)
    b1 = lam_l * vm - (1.0 - lam_l) * rf * vm / rm - v_r
    c0 = (1.0 - lam_l) * rf * vm
    rho_lin = np.where(b1 != 0.0, -c0 / np.where(b1 != 0.0, b1, 1.0), rm)
    sq = np.sqrt(np.maximum(b1 * b1 - 4.0 * a2 * c0, 0.0))
    denom = np.where(a2 != 0.0, 2.0 * a2, 1.0)
    r_plus = (-b1 + sq) / denom
    r_minus = (-b1 - sq) / denom
    in_plus = (r_plus >= rf - 1e-6) & (r_plus <= rm + 1e-6)
    in_minus = (r_minus >= rf - 1e-6) & (r_minus <= rm + 1e-6)
    rho_quad = np.where(in_plus & in_minus, np.maximum(r_plus, r_minus),
                        np.where(in_plus, r_plus, r_minus))
    rho_cong = np.clip(np.where(lam_l < 1e-14, rho_lin, rho_quad), rf, rm)
    rho_star = np.where(v_r >= v_f, rho_free, rho_cong)

    rho_cr, qm = _critical_and_qmax(lam_l, flux)
    s_star = np.where(rho_star <= rho_cr, qm, _q_at(rho_star, lam_l, flux))
    d_left = np.where(rho_l <= rho_cr, _q_at(rho_l, lam_l, flux), qm)
    f_rho = np.minimum(d_left, s_star)
    f_rho = np.where(rho_l <= _VAC, 0.0, f_rho)
    return f_rho, w_l * f_rho


@dataclass
class BoundaryPolicy:
    """Ghost-cell recipe for both road ends.

    left: "neumann" copies the first cell; "dirichlet" pins the inflow
    density (w copied from the first interior cell — the model does not
    prescribe it). right: an open end where all cars may leave — the ghost
    is an empty road, so the outflow equals the last cell's demand; a
    traffic light zeroes the outflow during red phases.
    """

    left_type: str = "neumann"
    left_rho: float = 0.0
    right_type: str = "neumann"
    light: TrafficLightPolicy | None = None

    @classmethod
    def from_config(cls, cfg):
        left = cfg.left_bc.get("type", "neumann")
        return cls(
            left_type="dirichlet" if left == "dirichlet_density" else "neumann",
            left_rho=float(cfg.left_bc.get("rho_vehkm", 0.0)),
            right_type=cfg.right_bc.get("type", "neumann"),
            light=cfg.light,
        )

    def ghost_left(self, state: TrafficState):
        if self.left_type == "dirichlet":
            return self.left_rho, state.w[0]
        return state.rho[0], state.w[0]

    def ghost_right(self, state: TrafficState):
        # empty downstream: supply is unconstrained, outflow = demand
        return 0.0, state.w[-1]

    def right_flux_closed(self, t_s):
        if self.right_type == "traffic_light" and self.light is not None:
            return self.light.is_red(t_s)
        return False


def step_2ctm(state: TrafficState, bc: BoundaryPolicy, flux: FluxModel,
              dt_s: float, dx_km: float) -> TrafficState:
    """One conservative Godunov step of the two-equation scheme."""
    dt_h = dt_s / 3600.0
    if dt_h > dx_km / (2.0 * flux.v_max_kmh) * (1 + 1e-12):
        raise ValueError("CFL violation: dt exceeds dx/(2 Vmax)")

    gl_rho, gl_w = bc.ghost_left(state)
    gr_rho, gr_w = bc.ghost_right(state)
    rho_ext = np.concatenate(([gl_rho], state.rho, [gr_rho]))
    w_ext = np.concatenate(([gl_w], state.w, [gr_w]))

    f_rho, f_y = _interface_fluxes(rho_ext[:-1], w_ext[:-1],
                                   rho_ext[1:], w_ext[1:], flux)
    if bc.right_flux_closed(state.time_s):
        f_rho[-1] = 0.0
        f_y[-1] = 0.0

    lam = dt_h / dx_km
    rho_new = state.rho - lam * (f_rho[1:] - f_rho[:-1])
    y_new = state.y - lam * (f_y[1:] - f_y[:-1])

    rho_new = np.clip(rho_new, 0.0, flux.rho_max_vehkm)
    w_new = np.where(rho_new > _VAC, y_new / np.where(rho_new > _VAC, rho_new, 1.0),
                     state.w)
    w_new = np.clip(w_new, flux.w_l, flux.w_r)
    return TrafficState(rho=rho_new, w=w_new, time_s=state.time_s + dt_s)


def speeds(state: TrafficState, flux: FluxModel):
    return velocity_eval(state.rho, state.w, flux)


def acceleration_analytic(state: TrafficState, flux: FluxModel, dx_km: float):
    """a = -V_rho * rho * v_x with a centered v gradient, in m/s^2.

    One-sided differences at the two boundary cells.
    """
    v = speeds(state, flux)
    dvdx = np.empty_like(v)
    dvdx[1:-1] = (v[2:] - v[:-2]) / (2.0 * dx_km)
    dvdx[0] = (v[1] - v[0]) / dx_km
    dvdx[-1] = (v[-1] - v[-2]) / dx_km
    a_kmh2 = -velocity_drho(state.rho, state.w, flux) * state.rho * dvdx
    return a_kmh2 * KMH2_TO_MS2


def acceleration_discrete(v_now_kmh, v_next_kmh, dt_s, dx_km):
    """Average cell acceleration from two consecutive speed fields, in m/s^2.

    a_i = (v_i^{n+1} - v_i^n)/dt + v_i^n (v_{i+1}^{n+1} - v_i^{n+1})/dx;
    the last cell copies its one-sided neighbour term as zero.
    """
    v_now = np.asarray(v_now_kmh, dtype=float)
    v_next = np.asarray(v_next_kmh, dtype=float)
    if v_now.shape != v_next.shape:
        raise ValueError("speed fields must have the same length")
    v0 = v_now * KMH_TO_MS
    v1 = v_next * KMH_TO_MS
    dx_m = dx_km * 1000.0
    a = np.empty_like(v0)
    a[:-1] = (v1[:-1] - v0[:-1]) / dt_s + v0[:-1] * (v1[1:] - v1[:-1]) / dx_m
    a[-1] = (v1[-1] - v0[-1]) / dt_s
    return a
