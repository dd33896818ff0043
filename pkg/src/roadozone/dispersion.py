"""2-D reaction-advection-diffusion of the pollutant fields around the road.

Transport is implicit Euler with centered diffusion and wind-sign-aware
first-order upwind advection; the stiff reaction is handled in a Lie
splitting substep reusing the Rosenbrock chemistry step. O2 is held at its
ambient value during dispersion and is not transported.

Fields are stored as (n_species, Ny, Nx) in g/km^3, row j=0 at the bottom
(vertical mode: the source plane; horizontal mode: y=0). Internally the
operators use km and hours, matching the diffusivity units.
"""

from __future__ import annotations

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import splu

from .chemistry import DEFAULT_RATES, RateConstants, reaction_step_fixed
from .config import DispersionConfig
from .units import DEFAULT_UNITS

TRANSPORTED = ("O", "O3", "NO", "NO2")
IDX_O, IDX_O3, IDX_NO, IDX_NO2 = range(4)


def _second_difference_1d(n, h):
    """1-D Neumann Laplacian in flux form (symmetric, zero row/column sums)."""
    main = np.full(n, -2.0)
    main[0] = main[-1] = -1.0
    off = np.ones(n - 1)
    return sp.diags([off, main, off], [-1, 0, 1]) / h**2


def _upwind_gradient_1d(n, h, c):
    """First-order upwind d/dx for wind speed c (copy ghost at inflow)."""
    if c >= 0:
        main = np.ones(n)
        main[0] = 0.0
        lower = -np.ones(n - 1)
        return sp.diags([lower, main], [-1, 0]) / h
    main = -np.ones(n)
    main[-1] = 0.0
    upper = np.ones(n - 1)
    return sp.diags([main, upper], [0, 1]) / h


def build_diffusion_operator(cfg: DispersionConfig):
    """Assemble and factorize the per-step transport systems.

    Returns a dict with the factorized solvers: 'neumann' (all-Neumann
    boundaries) and, in vertical mode, 'dirichlet_bottom' (identity rows on
    j=0 for the NO/NO2 Dirichlet condition). The operator is
    time-invariant, so the factorization is reused every step.
    """
    nx, ny = cfg.nx, cfg.ny
    dxk, dyk = cfg.dx_m / 1000.0, cfg.dy_m / 1000.0
    dt_h = cfg.dt_s / 3600.0

    lap = sp.kron(sp.identity(ny), _second_difference_1d(nx, dxk)) \
        + sp.kron(_second_difference_1d(ny, dyk), sp.identity(nx))
    transport = -cfg.mu_km2h * lap
    if cfg.wind_x_kmh != 0.0:
        transport = transport + cfg.wind_x_kmh * sp.kron(
            sp.identity(ny), _upwind_gradient_1d(nx, dxk, cfg.wind_x_kmh))
    if cfg.wind_y_kmh != 0.0:
        transport = transport + cfg.wind_y_kmh * sp.kron(
            _upwind_gradient_1d(ny, dyk, cfg.wind_y_kmh), sp.identity(nx))

    a_neumann = (sp.identity(nx * ny) + dt_h * transport).tocsr()

    ops = {
        "matrix_neumann": a_neumann,
        "neumann": splu(a_neumann.tocsc()),
        "diffusion_matrix": (sp.identity(nx * ny)
                             + dt_h * cfg.mu_km2h * (-lap)).tocsr(),
    }
    if cfg.mode == "vertical":
        a_dir = a_neumann.tolil()
        bottom = np.arange(nx)
        for row in bottom:
            a_dir.rows[row] = [row]
            a_dir.data[row] = [1.0]
        ops["dirichlet_bottom"] = splu(a_dir.tocsc())
    return ops


def _reaction_substep(fields, o2_ambient_molec, dt_s, k: RateConstants,
                      substeps=1, units=DEFAULT_UNITS, reaction_units="mass"):
    """Pointwise reaction over the grid with O2 frozen at ambient.

    "mass" applies the rate equations to the g/km^3 values directly (the
    reference regime: NO levels then sit far below the titration knee, so
    ozone accumulates in proportion to the NO2 burden instead of snapping
    to the photostationary ratio); "molecule" converts per species first.
    """
    ny, nx = fields.shape[1:]
    psi = np.empty((ny * nx, 5))
    if reaction_units == "mass":
        psi[:, 0] = fields[IDX_O].ravel()
        psi[:, 1] = o2_ambient_molec
        psi[:, 2] = fields[IDX_O3].ravel()
        psi[:, 3] = fields[IDX_NO].ravel()
        psi[:, 4] = fields[IDX_NO2].ravel()
        psi = reaction_step_fixed(psi, dt_s, k=k, substeps=substeps, freeze=(1,))
        out = np.empty_like(fields)
        out[IDX_O] = psi[:, 0].reshape(ny, nx)
        out[IDX_O3] = psi[:, 2].reshape(ny, nx)
        out[IDX_NO] = psi[:, 3].reshape(ny, nx)
        out[IDX_NO2] = psi[:, 4].reshape(ny, nx)
        return out
    psi[:, 0] = units.g_per_km3_to_molec_per_cm3(fields[IDX_O].ravel(), "O")
    psi[:, 1] = o2_ambient_molec
    psi[:, 2] = units.g_per_km3_to_molec_per_cm3(fields[IDX_O3].ravel(), "O3")
    psi[:, 3] = units.g_per_km3_to_molec_per_cm3(fields[IDX_NO].ravel(), "NO")
    psi[:, 4] = units.g_per_km3_to_molec_per_cm3(fields[IDX_NO2].ravel(), "NO2")
    psi = reaction_step_fixed(psi, dt_s, k=k, substeps=substeps, freeze=(1,))
    out = np.empty_like(fields)
    out[IDX_O] = units.molec_per_cm3_to_g_per_km3(psi[:, 0], "O").reshape(ny, nx)
    out[IDX_O3] = units.molec_per_cm3_to_g_per_km3(psi[:, 2], "O3").reshape(ny, nx)
    out[IDX_NO] = units.molec_per_cm3_to_g_per_km3(psi[:, 3], "NO").reshape(ny, nx)
    out[IDX_NO2] = units.molec_per_cm3_to_g_per_km3(psi[:, 4], "NO2").reshape(ny, nx)
    return out


def step_vertical(fields, source_row_gkm3h, cfg: DispersionConfig, ops,
                  k: RateConstants = DEFAULT_RATES, o2_ambient_molec=5.02e18,
                  react=True):
    """One split step of the vertical problem.

    source_row_gkm3h holds the per-x NOx volumetric rate at the source
    plane; the bottom row gets Neumann for O/O3 and Dirichlet values
    (1-p)*s*dt and p*s*dt for NO/NO2 ('verbatim' mode; 'rate' mode uses a
    fixed 1 h reference instead of dt).
    """
    ny, nx = fields.shape[1:]
    if react:
        fields = _reaction_substep(fields, o2_ambient_molec, cfg.dt_s, k,
                                   cfg.reaction_substeps,
                                   reaction_units=cfg.reaction_units)
    t_ref_h = cfg.dt_s / 3600.0 if cfg.bc_mode == "verbatim" else 1.0
    bc_no = (1.0 - k.p) * source_row_gkm3h * t_ref_h
    bc_no2 = k.p * source_row_gkm3h * t_ref_h

    out = np.empty_like(fields)
    for s in (IDX_O, IDX_O3):
        out[s] = ops["neumann"].solve(fields[s].ravel()).reshape(ny, nx)
    for s, bc in ((IDX_NO, bc_no), (IDX_NO2, bc_no2)):
        rhs_vec = fields[s].ravel().copy()
        rhs_vec[:nx] = bc
        out[s] = ops["dirichlet_bottom"].solve(rhs_vec).reshape(ny, nx)
    return np.maximum(out, 0.0)


def step_horizontal(fields, line_source_gkm3h, cfg: DispersionConfig, ops,
                    k: RateConstants = DEFAULT_RATES,
                    o2_ambient_molec=5.02e18, react=True):
    """One split step of the horizontal problem.

    The NOx source acts on the road row j = Ny/2, split (1-p)/p into
    NO/NO2 and added to the implicit transport right-hand side.
    """
    ny, nx = fields.shape[1:]
    if react:
        fields = _reaction_substep(fields, o2_ambient_molec, cfg.dt_s, k,
                                   cfg.reaction_substeps,
                                   reaction_units=cfg.reaction_units)
    dt_h = cfg.dt_s / 3600.0
    j_road = ny // 2
    src = np.zeros((4, ny, nx))
    src[IDX_NO, j_road] = (1.0 - k.p) * line_source_gkm3h
    src[IDX_NO2, j_road] = k.p * line_source_gkm3h

    out = np.empty_like(fields)
    for s in range(4):
        rhs_vec = (fields[s] + dt_h * src[s]).ravel()
        out[s] = ops["neumann"].solve(rhs_vec).reshape(ny, nx)
    return np.maximum(out, 0.0)


def couple_traffic_source(rate_per_cell_gh, traffic_dx_km, cfg: DispersionConfig,
                          road_length_km):
    """Conservatively resample per-cell emission rates onto the dispersion x-grid.

    The dispersion segment may be a sub-segment of the road (offset by
    road_offset_km). Returns the volumetric source per dispersion column in
    g/(km^3 h); total mass rate over the overlap is preserved.
    """
    seg_len_km = cfg.domain_x_m / 1000.0
    x0 = cfg.road_offset_km
    if x0 < -1e-12 or x0 + seg_len_km > road_length_km + 1e-9:
        raise ValueError("dispersion segment does not lie within the road extent")
    overlap = resampling_matrix(
        len(rate_per_cell_gh), traffic_dx_km, cfg.nx, cfg.dx_m / 1000.0, x0)
    rate_disp_gh = overlap @ np.asarray(rate_per_cell_gh, dtype=float)
    volume_km3 = (cfg.dx_m / 1000.0) * (cfg.dy_m / 1000.0) * (cfg.dz_m / 1000.0)
    return rate_disp_gh / volume_km3


def resampling_matrix(n_src, dx_src_km, n_dst, dx_dst_km, offset_km=0.0):
    """Overlap-fraction matrix mapping per-cell rates between 1-D grids."""
    m = np.zeros((n_dst, n_src))
    for j in range(n_dst):
        a = offset_km + j * dx_dst_km
        b = a + dx_dst_km
        i_lo = max(0, int(np.floor(a / dx_src_km - 1e-12)))
        i_hi = min(n_src, int(np.ceil(b / dx_src_km + 1e-12)))
        for i in range(i_lo, i_hi):
            lo = max(a, i * dx_src_km)
            hi = min(b, (i + 1) * dx_src_km)
            if hi > lo:
                m[j, i] = (hi - lo) / dx_src_km
    return m
