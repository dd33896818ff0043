"""Scenario configuration: domain types, validation and (de)serialization.

Config files are YAML with unit-suffixed keys (e.g. ``v_max_kmh``). All
quantities are stored internally in km / h / veh / g; conversions to other
unit systems happen at module boundaries.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np
import yaml


class ConfigError(ValueError):
    """Invalid configuration; carries the path of the offending field."""

    def __init__(self, path, message):
        self.path = path
        super().__init__(f"{path}: {message}")


@dataclass(frozen=True)
class RoadGrid:
    """Uniform 1-D road grid with a fixed time step and horizon."""

    length_km: float
    num_cells: int
    dt_s: float
    horizon_s: float

    def __post_init__(self):
        if self.num_cells < 3:
            raise ConfigError("grid.num_cells", "need at least 3 cells")
        if self.length_km <= 0:
            raise ConfigError("grid.length_km", "road length must be positive")
        if self.dt_s <= 0:
            raise ConfigError("grid.dt_s", "time step must be positive")
        if self.horizon_s <= 0:
            raise ConfigError("grid.horizon_s", "horizon must be positive")

    @property
    def dx_km(self):
        return self.length_km / self.num_cells

    @property
    def cell_centers_km(self):
        dx = self.dx_km
        return (np.arange(self.num_cells) + 0.5) * dx


@dataclass(frozen=True)
class FluxModel:
    """Calibrated parameters of the two-branch flux family.

    The congested branch interpolates between a triangular-style lower
    envelope and the Greenshields parabola; ``w_l``/``w_r`` bound the
    advected driver property.
    """

    v_max_kmh: float
    rho_f_vehkm: float
    rho_max_vehkm: float
    w_l: float
    w_r: float

    def __post_init__(self):
        if not 0 < self.rho_f_vehkm < self.rho_max_vehkm:
            raise ConfigError("flux.rho_f_vehkm",
                              "need 0 < rho_f < rho_max (strict)")
        if self.v_max_kmh <= 0:
            raise ConfigError("flux.v_max_kmh", "v_max must be positive")
        if not self.w_l < self.w_r:
            raise ConfigError("flux.w_l", "need w_l < w_r")

    def f_lower(self, rho):
        """Lower congested envelope: line through (rho_f, Q_f(rho_f)) and (rho_max, 0)."""
        return self.rho_f_vehkm * self.v_max_kmh * (1.0 - np.asarray(rho) / self.rho_max_vehkm)

    def g_upper(self, rho):
        """Upper congested envelope: the Greenshields parabola."""
        rho = np.asarray(rho)
        return rho * self.v_max_kmh * (1.0 - rho / self.rho_max_vehkm)


def derived_w_bounds(v_max_kmh, rho_f_vehkm, rho_max_vehkm):
    """Default property bounds: w_l = f(rho_f) = g(rho_f), w_r = g(rho_max/2)."""
    w_l = rho_f_vehkm * v_max_kmh * (1.0 - rho_f_vehkm / rho_max_vehkm)
    w_r = (rho_max_vehkm / 2.0) * v_max_kmh * 0.5
    return w_l, w_r


@dataclass
class TrafficState:
    """Per-cell density and driver property on the road grid.

    ``w`` is stored explicitly so that vacuum cells keep their last advected
    value (``y/rho`` is 0/0 there); ``y = rho * w`` is derived.
    """

    rho: np.ndarray      # veh/km
    w: np.ndarray        # flux units (veh/h)
    time_s: float = 0.0

    @property
    def y(self):
        return self.rho * self.w

    def copy(self):
        return TrafficState(self.rho.copy(), self.w.copy(), self.time_s)


@dataclass(frozen=True)
class TrafficLightPolicy:
    """Green/red cycle at the downstream end; cycle starts green at t=0."""

    cycle_s: float
    red_s: float
    phase_offset_s: float = 0.0

    def __post_init__(self):
        if not 0 < self.red_s < self.cycle_s:
            raise ConfigError("light.red_s",
                              "red phase must be shorter than cycle")

    @property
    def green_s(self):
        return self.cycle_s - self.red_s

    @property
    def ratio_green_red(self):
        return self.green_s / self.red_s

    def is_red(self, t_s):
        phase = math.fmod(t_s - self.phase_offset_s, self.cycle_s)
        if phase < 0:
            phase += self.cycle_s
        return phase >= self.green_s


@dataclass(frozen=True)
class DispersionConfig:
    """2-D dispersion domain: vertical (above the road) or horizontal (around it)."""

    mode: str                  # "vertical" | "horizontal"
    domain_x_m: float
    domain_y_m: float
    dx_m: float
    dy_m: float
    mu_km2h: float
    wind_x_kmh: float = 0.0
    wind_y_kmh: float = 0.0
    dt_s: float = 1.5
    horizon_s: float = 1800.0
    source_height_m: float = 0.5   # exhaust-pipe height (vertical mode)
    road_offset_km: float = 0.0    # start of the dispersion segment on the road
    bc_mode: str = "verbatim"      # "verbatim" (Dirichlet = s*dt) | "rate"
    reaction_substeps: int = 1
    # "mass" evaluates the reaction on g/km^3 values as-is (the regime the
    # reference ozone figures live in: titration is slow, ozone growth is
    # production-limited); "molecule" converts to molecule/cm^3 first,
    # which saturates at the photostationary level within minutes.
    reaction_units: str = "mass"

    def __post_init__(self):
        if self.mode not in ("vertical", "horizontal"):
            raise ConfigError("dispersion.mode", "must be vertical or horizontal")
        if self.reaction_units not in ("mass", "molecule"):
            raise ConfigError("dispersion.reaction_units",
                              "must be mass or molecule")
        if self.mu_km2h <= 0:
            raise ConfigError("dispersion.mu_km2h", "diffusivity must be positive")
        for name, dom, step in (("x", self.domain_x_m, self.dx_m),
                                ("y", self.domain_y_m, self.dy_m)):
            n = dom / step
            if abs(n - round(n)) > 1e-9:
                raise ConfigError(f"dispersion.d{name}_m",
                                  "grid step must divide the domain exactly")
        if self.bc_mode not in ("verbatim", "rate"):
            raise ConfigError("dispersion.bc_mode", "must be verbatim or rate")

    @property
    def nx(self):
        return round(self.domain_x_m / self.dx_m)

    @property
    def ny(self):
        return round(self.domain_y_m / self.dy_m)

    @property
    def dz_m(self):
        return self.dy_m


@dataclass(frozen=True)
class EmissionConfig:
    lanes: int = 1
    table_row: str = "petrol_nox"
    correction_factor: float = 1.0


@dataclass(frozen=True)
class ChemistryConfig:
    enabled: bool = True
    rtol: float = 1.0e-6
    atol: float = 1.0          # molecule/cm^3
    o2_molec_cm3: float = 5.02e18


@dataclass(frozen=True)
class ScenarioConfig:
    grid: RoadGrid
    flux: FluxModel
    initial_rho_vehkm: object            # scalar or array-like of length num_cells
    initial_w: object                    # "w_l" | "w_r" | number | piecewise list
    left_bc: dict = field(default_factory=lambda: {"type": "neumann"})
    right_bc: dict = field(default_factory=lambda: {"type": "neumann"})
    light: TrafficLightPolicy | None = None
    emissions: EmissionConfig = field(default_factory=EmissionConfig)
    chemistry: ChemistryConfig = field(default_factory=ChemistryConfig)
    dispersion: DispersionConfig | None = None


@dataclass(frozen=True)
class ValidatedConfig:
    """A scenario config with all invariants checked and dt clamped to CFL."""

    cfg: ScenarioConfig
    warnings: tuple = ()

    @property
    def dt_effective_s(self):
        return self.cfg.grid.dt_s


def cfl_dt_max_s(grid: RoadGrid, flux: FluxModel) -> float:
    """Largest stable time step: dx / (2 * Vmax), in seconds."""
    return grid.dx_km / (2.0 * flux.v_max_kmh) * 3600.0


def validate_config(cfg: ScenarioConfig) -> ValidatedConfig:
    """Check every invariant and clamp dt to the CFL bound.

    Clamping keeps dt an integer divisor of the requested step so the
    output cadence stays aligned; the clamp is recorded as a warning and
    goes into the run metadata.
    """
    warnings = []

    lb = cfg.left_bc.get("type")
    if lb not in ("dirichlet_density", "neumann"):
        raise ConfigError("boundary.left.type",
                          "must be dirichlet_density or neumann")
    if lb == "dirichlet_density":
        rho_in = cfg.left_bc.get("rho_vehkm")
        if rho_in is None or not 0 <= rho_in <= cfg.flux.rho_max_vehkm:
            raise ConfigError("boundary.left.rho_vehkm",
                              "inflow density must lie in [0, rho_max]")
    rb = cfg.right_bc.get("type")
    if rb not in ("neumann", "traffic_light"):
        raise ConfigError("boundary.right.type",
                          "must be neumann or traffic_light")
    if rb == "traffic_light" and cfg.light is None:
        raise ConfigError("light", "traffic_light boundary requires a light section")

    rho0 = np.asarray(resolve_initial_rho(cfg), dtype=float)
    if np.any(rho0 < 0) or np.any(rho0 > cfg.flux.rho_max_vehkm):
        raise ConfigError("initial.rho_vehkm",
                          "initial density must lie in [0, rho_max]")
    w0 = resolve_initial_w(cfg)
    if np.any(w0 < cfg.flux.w_l - 1e-9) or np.any(w0 > cfg.flux.w_r + 1e-9):
        raise ConfigError("initial.w", "initial property must lie in [w_l, w_r]")

    dt_max = cfl_dt_max_s(cfg.grid, cfg.flux)
    grid = cfg.grid
    if grid.dt_s > dt_max:
        n_sub = math.ceil(grid.dt_s / dt_max)
        dt_eff = grid.dt_s / n_sub
        warnings.append(
            f"dt clamped from {grid.dt_s:g} s to {dt_eff:g} s "
            f"(CFL bound {dt_max:.6g} s)")
        grid = replace(grid, dt_s=dt_eff)
        cfg = replace(cfg, grid=grid)

    return ValidatedConfig(cfg=cfg, warnings=tuple(warnings))


def resolve_initial_rho(cfg: ScenarioConfig) -> np.ndarray:
    rho0 = cfg.initial_rho_vehkm
    if np.isscalar(rho0):
        return np.full(cfg.grid.num_cells, float(rho0))
    rho0 = np.asarray(rho0, dtype=float)
    if rho0.shape != (cfg.grid.num_cells,):
        raise ConfigError("initial.rho_vehkm",
                          f"expected {cfg.grid.num_cells} values, got {rho0.size}")
    return rho0


def _w_value(spec, flux: FluxModel) -> float:
    if spec == "w_l":
        return flux.w_l
    if spec == "w_r":
        return flux.w_r
    return float(spec)


def resolve_initial_w(cfg: ScenarioConfig) -> np.ndarray:
    """Expand the piecewise initial-w spec onto the grid.

    Accepted forms: a number, "w_l"/"w_r", or a list of
    ``{up_to_km: ..., value: ...}`` pieces (last piece may omit up_to_km).
    """
    spec = cfg.initial_w
    x = cfg.grid.cell_centers_km
    if isinstance(spec, (int, float, str)):
        return np.full(cfg.grid.num_cells, _w_value(spec, cfg.flux))
    w = np.empty(cfg.grid.num_cells)
    lo = 0.0
    covered = np.zeros(cfg.grid.num_cells, dtype=bool)
    for piece in spec:
        hi = piece.get("up_to_km", cfg.grid.length_km)
        mask = (~covered) & (x <= hi + 1e-12)
        w[mask] = _w_value(piece["value"], cfg.flux)
        covered |= mask
        lo = hi
    if not covered.all():
        raise ConfigError("initial.w", "piecewise spec does not cover the road")
    return w


# ---------------------------------------------------------------------------
# YAML (de)serialization

def _flux_from_dict(d) -> FluxModel:
    v_max = float(d["v_max_kmh"])
    rho_f = float(d["rho_f_vehkm"])
    rho_max = float(d["rho_max_vehkm"])
    w_l_def, w_r_def = derived_w_bounds(v_max, rho_f, rho_max)
    w_l = float(d["w_l"]) if d.get("w_l") is not None else w_l_def
    w_r = float(d["w_r"]) if d.get("w_r") is not None else w_r_def
    return FluxModel(v_max, rho_f, rho_max, w_l, w_r)


def config_from_dict(d: dict) -> ScenarioConfig:
    try:
        grid = RoadGrid(
            length_km=float(d["grid"]["length_km"]),
            num_cells=int(d["grid"]["num_cells"]),
            dt_s=float(d["grid"]["dt_s"]),
            horizon_s=float(d["grid"]["horizon_s"]),
        )
        flux = _flux_from_dict(d["flux"])
    except KeyError as exc:
        raise ConfigError(str(exc.args[0]), "missing required key") from exc

    light = None
    if d.get("light"):
        light = TrafficLightPolicy(
            cycle_s=float(d["light"]["cycle_s"]),
            red_s=float(d["light"]["red_s"]),
            phase_offset_s=float(d["light"].get("phase_offset_s", 0.0)),
        )

    disp = None
    if d.get("dispersion"):
        dd = d["dispersion"]
        disp = DispersionConfig(
            mode=dd["mode"],
            domain_x_m=float(dd["domain_x_m"]),
            domain_y_m=float(dd["domain_y_m"]),
            dx_m=float(dd["dx_m"]),
            dy_m=float(dd["dy_m"]),
            mu_km2h=float(dd["mu_km2h"]),
            wind_x_kmh=float(dd.get("wind_x_kmh", 0.0)),
            wind_y_kmh=float(dd.get("wind_y_kmh", 0.0)),
            dt_s=float(dd.get("dt_s", d["grid"]["dt_s"])),
            horizon_s=float(dd.get("horizon_s", d["grid"]["horizon_s"])),
            source_height_m=float(dd.get("source_height_m", 0.5)),
            road_offset_km=float(dd.get("road_offset_km", 0.0)),
            bc_mode=dd.get("bc_mode", "verbatim"),
            reaction_substeps=int(dd.get("reaction_substeps", 1)),
            reaction_units=dd.get("reaction_units", "mass"),
        )

    em = d.get("emissions", {})
    chem = d.get("chemistry", {})
    return ScenarioConfig(
        grid=grid,
        flux=flux,
        initial_rho_vehkm=d.get("initial", {}).get("rho_vehkm", 0.0),
        initial_w=d.get("initial", {}).get("w", "w_r"),
        left_bc=d.get("boundary", {}).get("left", {"type": "neumann"}),
        right_bc=d.get("boundary", {}).get("right", {"type": "neumann"}),
        light=light,
        emissions=EmissionConfig(
            lanes=int(em.get("lanes", 1)),
            table_row=em.get("table_row", "petrol_nox"),
            correction_factor=float(em.get("correction_factor", 1.0)),
        ),
        chemistry=ChemistryConfig(
            enabled=bool(chem.get("enabled", True)),
            rtol=float(chem.get("rtol", 1.0e-6)),
            atol=float(chem.get("atol", 1.0)),
            o2_molec_cm3=float(chem.get("o2_molec_cm3", 5.02e18)),
        ),
        dispersion=disp,
    )


def config_to_dict(cfg: ScenarioConfig) -> dict:
    d = {
        "grid": {
            "length_km": cfg.grid.length_km,
            "num_cells": cfg.grid.num_cells,
            "dt_s": cfg.grid.dt_s,
            "horizon_s": cfg.grid.horizon_s,
        },
        "flux": {
            "v_max_kmh": cfg.flux.v_max_kmh,
            "rho_f_vehkm": cfg.flux.rho_f_vehkm,
            "rho_max_vehkm": cfg.flux.rho_max_vehkm,
            "w_l": cfg.flux.w_l,
            "w_r": cfg.flux.w_r,
        },
        "initial": {
            "rho_vehkm": cfg.initial_rho_vehkm
            if np.isscalar(cfg.initial_rho_vehkm)
            else list(np.asarray(cfg.initial_rho_vehkm, dtype=float)),
            "w": cfg.initial_w,
        },
        "boundary": {"left": dict(cfg.left_bc), "right": dict(cfg.right_bc)},
        "emissions": {
            "lanes": cfg.emissions.lanes,
            "table_row": cfg.emissions.table_row,
            "correction_factor": cfg.emissions.correction_factor,
        },
        "chemistry": {
            "enabled": cfg.chemistry.enabled,
            "rtol": cfg.chemistry.rtol,
            "atol": cfg.chemistry.atol,
            "o2_molec_cm3": cfg.chemistry.o2_molec_cm3,
        },
    }
    if cfg.light is not None:
        d["light"] = {
            "cycle_s": cfg.light.cycle_s,
            "red_s": cfg.light.red_s,
            "phase_offset_s": cfg.light.phase_offset_s,
        }
    if cfg.dispersion is not None:
        dd = cfg.dispersion
        d["dispersion"] = {
            "mode": dd.mode,
            "domain_x_m": dd.domain_x_m,
            "domain_y_m": dd.domain_y_m,
            "dx_m": dd.dx_m,
            "dy_m": dd.dy_m,
            "mu_km2h": dd.mu_km2h,
            "wind_x_kmh": dd.wind_x_kmh,
            "wind_y_kmh": dd.wind_y_kmh,
            "dt_s": dd.dt_s,
            "horizon_s": dd.horizon_s,
            "source_height_m": dd.source_height_m,
            "road_offset_km": dd.road_offset_km,
            "bc_mode": dd.bc_mode,
            "reaction_substeps": dd.reaction_substeps,
            "reaction_units": dd.reaction_units,
        }
    return d


def load_config(path) -> ScenarioConfig:
    with open(path) as fh:
        data = yaml.safe_load(fh)
    if not isinstance(data, dict):
        raise ConfigError("<root>", "config file must contain a mapping")
    return config_from_dict(data)


def save_config(cfg: ScenarioConfig, path):
    with open(path, "w") as fh:
        yaml.safe_dump(config_to_dict(cfg), fh, sort_keys=False)


def write_run_metadata(path, validated: ValidatedConfig, extra=None):
    """Sidecar file recording the effective dt and any clamps applied."""
    meta = {
        "dt_effective_s": validated.dt_effective_s,
        "clamps": list(validated.warnings),
        "seeds": [],
    }
    if extra:
        meta.update(extra)
    with open(path, "w") as fh:
        yaml.safe_dump(meta, fh, sort_keys=False)
