"""Four-stage pipeline: traffic -> emissions -> chemistry -> dispersion.

Each stage is a pure function of the validated config and the previous
stage's output; any stage can be disabled. All outputs are deterministic
(no RNG anywhere in the pipeline), so repeated runs are byte-identical.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np

from . import cgarz, chemistry, dispersion, emissions
from .config import (ScenarioConfig, TrafficState, ValidatedConfig,
                     resolve_initial_rho, resolve_initial_w, validate_config,
                     write_run_metadata)
from .units import DEFAULT_UNITS, SPECIES


@dataclass
class TrafficRun:
    times_s: np.ndarray          # (n_t,)
    rho: np.ndarray              # (n_t, nx) veh/km
    w: np.ndarray                # (n_t, nx)
    v: np.ndarray                # (n_t, nx) km/h
    a: np.ndarray                # (n_t, nx) m/s^2, analytic
    dx_km: float


@dataclass
class EmissionRun:
    times_s: np.ndarray
    rate_cells_gh: np.ndarray    # (n_t, nx)
    totals_gh: np.ndarray        # (n_t,)
    source_gkm3h: np.ndarray     # (n_t, nx), per chemistry cell volume


@dataclass
class ChemistryRun:
    times_s: np.ndarray
    psi: np.ndarray              # (n_t, nx, 5) molecule/cm^3
    totals_gkm3: np.ndarray      # (n_t, 5) summed over cells, g/km^3


@dataclass
class DispersionRun:
    times_s: np.ndarray                  # snapshot times
    snapshots: dict                      # species -> (n_snap, ny, nx) g/km^3
    final_fields: np.ndarray             # (4, ny, nx) g/km^3


@dataclass
class RunArtifacts:
    out_dir: str
    traffic: TrafficRun | None = None
    emission: EmissionRun | None = None
    chem: ChemistryRun | None = None
    disp: DispersionRun | None = None
    paths: dict = field(default_factory=dict)


def simulate_traffic(vcfg: ValidatedConfig) -> TrafficRun:
    """Advance the traffic state over the full horizon, recording each step."""
    cfg = vcfg.cfg
    grid, flux = cfg.grid, cfg.flux
    bc = cgarz.BoundaryPolicy.from_config(cfg)
    state = TrafficState(rho=resolve_initial_rho(cfg),
                         w=resolve_initial_w(cfg), time_s=0.0)
    n_steps = int(round(grid.horizon_s / grid.dt_s))
    nx = grid.num_cells
    rho = np.empty((n_steps + 1, nx))
    w = np.empty((n_steps + 1, nx))
    v = np.empty((n_steps + 1, nx))
    a = np.empty((n_steps + 1, nx))
    times = np.arange(n_steps + 1) * grid.dt_s

    for n in range(n_steps + 1):
        rho[n] = state.rho
        w[n] = state.w
        v[n] = cgarz.speeds(state, flux)
        a[n] = cgarz.acceleration_analytic(state, flux, grid.dx_km)
        if n < n_steps:
            state = cgarz.step_2ctm(state, bc, flux, grid.dt_s, grid.dx_km)
    return TrafficRun(times_s=times, rho=rho, w=w, v=v, a=a, dx_km=grid.dx_km)


def compute_emissions(traffic: TrafficRun, cfg: ScenarioConfig) -> EmissionRun:
    """Per-cell NOx emission rates along the traffic solution.

    The chemistry reference volume is the cubic road cell (dx^3).
    """
    coeffs = emissions.COEFFICIENT_TABLE[cfg.emissions.table_row]
    cell_volume_km3 = traffic.dx_km ** 3
    n_t, nx = traffic.rho.shape
    rate = np.empty((n_t, nx))
    for n in range(n_t):
        fld = emissions.emission_field(
            traffic.rho[n], traffic.v[n], traffic.a[n], traffic.dx_km,
            cfg.emissions.lanes, cell_volume_km3, coeffs,
            time_s=traffic.times_s[n],
            correction=cfg.emissions.correction_factor)
        rate[n] = fld.rate_per_cell_gh
    return EmissionRun(times_s=traffic.times_s, rate_cells_gh=rate,
                       totals_gh=rate.sum(axis=1),
                       source_gkm3h=rate / cell_volume_km3)


def run_chemistry(emission: EmissionRun, cfg: ScenarioConfig) -> ChemistryRun:
    """Street-level box chemistry per road cell with the traffic NOx source."""
    chem = cfg.chemistry
    k = chemistry.DEFAULT_RATES
    psi0 = chemistry.initial_state(emission.source_gkm3h.shape[1],
                                   emission.source_gkm3h[0],
                                   o2_molec_cm3=chem.o2_molec_cm3, p=k.p)
    psi = chemistry.run_roadside_chemistry(
        emission.times_s, emission.source_gkm3h, psi0,
        rtol=chem.rtol, atol=chem.atol, k=k)
    totals = np.empty((psi.shape[0], 5))
    for s, name in enumerate(SPECIES):
        totals[:, s] = DEFAULT_UNITS.molec_per_cm3_to_g_per_km3(
            psi[:, :, s], name).sum(axis=1)
    return ChemistryRun(times_s=emission.times_s, psi=psi, totals_gkm3=totals)


def make_source_sampler(emission: EmissionRun, cfg: ScenarioConfig):
    """Time lookup into the per-cell emission series, tiled beyond its end.

    With a traffic light the last full cycle repeats periodically (the
    dynamics is periodic once the queue reaches the inflow); without one
    the final value is held.
    """
    times = emission.times_s
    rate = emission.rate_cells_gh
    t_end = times[-1]
    dt = times[1] - times[0] if times.size > 1 else 1.0
    light = cfg.light
    if light is not None:
        n_cycle = max(1, int(round(light.cycle_s / dt)))
        tail = rate[-n_cycle:]
    else:
        tail = rate[-1:]

    def sample(t_s):
        if t_s <= t_end:
            idx = min(int(t_s / dt), rate.shape[0] - 1)
            return rate[idx]
        extra = t_s - t_end
        idx = int(extra / dt) % tail.shape[0]
        return tail[idx]

    return sample


def run_dispersion(emission: EmissionRun, cfg: ScenarioConfig,
                   snapshot_every_s=None) -> DispersionRun:
    """2-D dispersion fed by the (resampled, possibly tiled) traffic source."""
    dcfg = cfg.dispersion
    if dcfg is None:
        raise ValueError("scenario has no dispersion section")
    seg_len_km = dcfg.domain_x_m / 1000.0
    if (dcfg.road_offset_km < -1e-12
            or dcfg.road_offset_km + seg_len_km > cfg.grid.length_km + 1e-9):
        raise ValueError("dispersion segment does not lie within the road extent")
    k = chemistry.DEFAULT_RATES
    ops = dispersion.build_diffusion_operator(dcfg)
    sample = make_source_sampler(emission, cfg)
    resample = dispersion.resampling_matrix(
        emission.rate_cells_gh.shape[1], cfg.grid.dx_km,
        dcfg.nx, dcfg.dx_m / 1000.0, dcfg.road_offset_km)
    volume_km3 = (dcfg.dx_m / 1000.0) * (dcfg.dy_m / 1000.0) * (dcfg.dz_m / 1000.0)

    n_steps = int(round(dcfg.horizon_s / dcfg.dt_s))
    fields = np.zeros((4, dcfg.ny, dcfg.nx))
    step_fn = dispersion.step_vertical if dcfg.mode == "vertical" \
        else dispersion.step_horizontal

    snap_stride = None
    if snapshot_every_s:
        snap_stride = max(1, int(round(snapshot_every_s / dcfg.dt_s)))
    snap_times = []
    snaps = {name: [] for name in dispersion.TRANSPORTED}

    o2_amb = cfg.chemistry.o2_molec_cm3
    for n in range(n_steps):
        t = n * dcfg.dt_s
        source_row = (resample @ sample(t)) / volume_km3
        fields = step_fn(fields, source_row, dcfg, ops, k=k,
                         o2_ambient_molec=o2_amb)
        if snap_stride and ((n + 1) % snap_stride == 0 or n == n_steps - 1):
            snap_times.append((n + 1) * dcfg.dt_s)
            for s, name in enumerate(dispersion.TRANSPORTED):
                snaps[name].append(fields[s].copy())

    return DispersionRun(
        times_s=np.array(snap_times),
        snapshots={name: np.array(arrs) for name, arrs in snaps.items()},
        final_fields=fields)


# ---------------------------------------------------------------------------
# artifact writing

def _fmt(x):
    return format(float(x), ".10g")


def write_traffic_csv(path, traffic: TrafficRun, every_s=None):
    stride = 1
    if every_s and traffic.times_s.size > 1:
        dt = traffic.times_s[1] - traffic.times_s[0]
        stride = max(1, int(round(every_s / dt)))
    with open(path, "w") as fh:
        fh.write("t_s,cell_index,x_km,rho_vehkm,w,v_kmh,a_ms2\n")
        for n in range(0, traffic.times_s.size, stride):
            t = traffic.times_s[n]
            for i in range(traffic.rho.shape[1]):
                x = (i + 0.5) * traffic.dx_km
                fh.write(",".join([_fmt(t), str(i), _fmt(x),
                                   _fmt(traffic.rho[n, i]), _fmt(traffic.w[n, i]),
                                   _fmt(traffic.v[n, i]), _fmt(traffic.a[n, i])])
                         + "\n")


def write_emission_csv(path, emission: EmissionRun):
    with open(path, "w") as fh:
        fh.write("t_s,total_g_per_h\n")
        for t, tot in zip(emission.times_s, emission.totals_gh):
            fh.write(f"{_fmt(t)},{_fmt(tot)}\n")


def write_emission_cells_csv(path, emission: EmissionRun, every_s=None):
    stride = 1
    if every_s and emission.times_s.size > 1:
        dt = emission.times_s[1] - emission.times_s[0]
        stride = max(1, int(round(every_s / dt)))
    with open(path, "w") as fh:
        fh.write("t_s,cell_index,rate_g_per_h\n")
        for n in range(0, emission.times_s.size, stride):
            for i in range(emission.rate_cells_gh.shape[1]):
                fh.write(f"{_fmt(emission.times_s[n])},{i},"
                         f"{_fmt(emission.rate_cells_gh[n, i])}\n")


def write_chemistry_csvs(totals_path, cells_path, chem: ChemistryRun,
                         every_s=None):
    with open(totals_path, "w") as fh:
        fh.write("t_s," + ",".join(SPECIES) + "\n")
        for n, t in enumerate(chem.times_s):
            fh.write(_fmt(t) + ","
                     + ",".join(_fmt(v) for v in chem.totals_gkm3[n]) + "\n")
    if cells_path is None:
        return
    stride = 1
    if every_s and chem.times_s.size > 1:
        dt = chem.times_s[1] - chem.times_s[0]
        stride = max(1, int(round(every_s / dt)))
    with open(cells_path, "w") as fh:
        fh.write("t_s,cell_index," + ",".join(SPECIES) + "\n")
        for n in range(0, chem.times_s.size, stride):
            for i in range(chem.psi.shape[1]):
                vals = [DEFAULT_UNITS.molec_per_cm3_to_g_per_km3(
                    chem.psi[n, i, s], SPECIES[s]) for s in range(5)]
                fh.write(f"{_fmt(chem.times_s[n])},{i},"
                         + ",".join(_fmt(v) for v in vals) + "\n")


def write_snapshot_csv(path, grid, t_s, dx_m, dy_m):
    ny, nx = grid.shape
    with open(path, "w") as fh:
        fh.write(f"# t_s={_fmt(t_s)} nx={nx} ny={ny} "
                 f"dx_m={_fmt(dx_m)} dy_m={_fmt(dy_m)}\n")
        for j in range(ny):
            fh.write(",".join(_fmt(v) for v in grid[j]) + "\n")


def run_pipeline(cfg: ScenarioConfig, out_dir, snapshot_every_s=60.0,
                 disable=(), figures=True) -> RunArtifacts:
    """Execute the enabled stages in order and write all artifacts."""
    os.makedirs(out_dir, exist_ok=True)
    disable = set(disable)
    vcfg = validate_config(cfg)
    art = RunArtifacts(out_dir=out_dir)
    meta_path = os.path.join(out_dir, "metadata.yaml")
    stages_run = []

    try:
        if "traffic" not in disable:
            art.traffic = simulate_traffic(vcfg)
            stages_run.append("traffic")
            p = os.path.join(out_dir, "traffic.csv")
            write_traffic_csv(p, art.traffic, every_s=snapshot_every_s)
            art.paths["traffic"] = p

        if art.traffic is not None and "emissions" not in disable:
            art.emission = compute_emissions(art.traffic, vcfg.cfg)
            stages_run.append("emissions")
            p = os.path.join(out_dir, "emissions.csv")
            write_emission_csv(p, art.emission)
            art.paths["emissions"] = p
            p2 = os.path.join(out_dir, "emissions_cells.csv")
            write_emission_cells_csv(p2, art.emission, every_s=snapshot_every_s)
            art.paths["emissions_cells"] = p2

        if (art.emission is not None and vcfg.cfg.chemistry.enabled
                and "chemistry" not in disable):
            art.chem = run_chemistry(art.emission, vcfg.cfg)
            stages_run.append("chemistry")
            p = os.path.join(out_dir, "chemistry_totals.csv")
            p2 = os.path.join(out_dir, "chemistry_cells.csv")
            write_chemistry_csvs(p, p2, art.chem, every_s=snapshot_every_s)
            art.paths["chemistry_totals"] = p
            art.paths["chemistry_cells"] = p2

        if (art.emission is not None and vcfg.cfg.dispersion is not None
                and "dispersion" not in disable):
            art.disp = run_dispersion(art.emission, vcfg.cfg,
                                      snapshot_every_s=snapshot_every_s)
            stages_run.append("dispersion")
            snap_dir = os.path.join(out_dir, "snapshots")
            os.makedirs(snap_dir, exist_ok=True)
            dcfg = vcfg.cfg.dispersion
            for name, arrs in art.disp.snapshots.items():
                for t, grid2d in zip(art.disp.times_s, arrs):
                    p = os.path.join(snap_dir, f"{name.lower()}_t{t:08.1f}s.csv")
                    write_snapshot_csv(p, grid2d, t, dcfg.dx_m, dcfg.dy_m)
            art.paths["snapshots"] = snap_dir
    except Exception as exc:
        stage = {0: "traffic", 1: "emissions", 2: "chemistry",
                 3: "dispersion"}.get(len(stages_run), "pipeline")
        raise RuntimeError(f"stage '{stage}' failed: {exc}") from exc

    write_run_metadata(meta_path, vcfg, extra={"stages": stages_run})
    art.paths["metadata"] = meta_path

    if figures:
        from . import plots
        fig_dir = os.path.join(out_dir, "figures")
        plots.render_run_figures(art, vcfg.cfg, fig_dir)
        art.paths["figures"] = fig_dir
    return art


# ---------------------------------------------------------------------------
# experiment drivers

def _light_config(base_cfg: ScenarioConfig, cycle_s, red_s):
    from dataclasses import replace
    from .config import TrafficLightPolicy
    light = TrafficLightPolicy(cycle_s=cycle_s, red_s=red_s)
    return replace(base_cfg, light=light,
                   right_bc={"type": "traffic_light"})


def asymptotic_mean(times_s, series, window_s):
    """Mean over the trailing window (the last few light cycles)."""
    mask = times_s >= times_s[-1] - window_s
    return float(np.mean(np.asarray(series)[mask]))


def _sweep_run(cfg: ScenarioConfig, with_chemistry):
    vcfg = validate_config(cfg)
    traffic = simulate_traffic(vcfg)
    emission = compute_emissions(traffic, vcfg.cfg)
    chem = run_chemistry(emission, vcfg.cfg) if with_chemistry else None
    return vcfg, emission, chem


def sweep_fixed_ratio(ratio, tc_list_s, base_cfg: ScenarioConfig,
                      with_chemistry=False):
    """One run per cycle length at a fixed green/red ratio.

    red = tc / (1 + ratio). Returns a list of per-run dicts with peak and
    asymptotic-mean total emissions (mean over the last 3 cycles).
    """
    if ratio <= 0:
        raise ValueError("green/red ratio must be positive")
    rows = []
    for tc in tc_list_s:
        red = tc / (1.0 + ratio)
        cfg = _light_config(base_cfg, tc, red)
        vcfg, emission, chem = _sweep_run(cfg, with_chemistry)
        row = {
            "cycle_s": tc,
            "red_s": red,
            "peak_total_gh": float(emission.totals_gh.max()),
            "asymptotic_mean_gh": asymptotic_mean(
                emission.times_s, emission.totals_gh, 3 * tc),
        }
        if chem is not None:
            row["chem_totals_gkm3"] = chem.totals_gkm3
            row["chem_times_s"] = chem.times_s
        rows.append(row)
    return rows


def sweep_fixed_cycle(cycle_s, ratio_list, base_cfg: ScenarioConfig,
                      with_chemistry=False):
    """One run per green/red ratio at a fixed cycle length."""
    if cycle_s <= 0:
        raise ValueError("cycle length must be positive")
    rows = []
    for ratio in ratio_list:
        red = cycle_s / (1.0 + ratio)
        cfg = _light_config(base_cfg, cycle_s, red)
        vcfg, emission, chem = _sweep_run(cfg, with_chemistry)
        row = {
            "ratio": ratio,
            "red_s": red,
            "peak_total_gh": float(emission.totals_gh.max()),
            "asymptotic_mean_gh": asymptotic_mean(
                emission.times_s, emission.totals_gh, 3 * cycle_s),
        }
        if chem is not None:
            row["chem_totals_gkm3"] = chem.totals_gkm3
            row["chem_times_s"] = chem.times_s
        rows.append(row)
    return rows


def write_sweep_csv(path, rows, key_name, key_field):
    with open(path, "w") as fh:
        fh.write(f"{key_name},red_s,peak_total_g_per_h,asymptotic_mean_g_per_h\n")
        for row in rows:
            fh.write(f"{_fmt(row[key_field])},{_fmt(row['red_s'])},"
                     f"{_fmt(row['peak_total_gh'])},"
                     f"{_fmt(row['asymptotic_mean_gh'])}\n")


def probe_row_index(dcfg, probe):
    """Map a probe location onto a grid row.

    vertical: {'vertical': height_m above ground}; horizontal:
    {'horizontal': offset_m from the road line}.
    """
    if "vertical" in probe:
        if dcfg.mode != "vertical":
            raise ValueError("vertical probe on a horizontal run")
        j = int(round((probe["vertical"] - dcfg.source_height_m) / dcfg.dy_m)) - 1
    elif "horizontal" in probe:
        if dcfg.mode != "horizontal":
            raise ValueError("horizontal probe on a vertical run")
        j = dcfg.ny // 2 + int(round(probe["horizontal"] / dcfg.dy_m))
    else:
        raise ValueError("probe must specify 'vertical' or 'horizontal'")
    if not 0 <= j < dcfg.ny:
        raise ValueError(f"probe row {j} outside grid of {dcfg.ny} rows")
    return j


def compare_dispersion(cfg_nolight: ScenarioConfig, cfg_light: ScenarioConfig,
                       probe):
    """Relative ozone increase at the probe row, light vs no-light.

    Runs both pipelines (traffic, emissions, dispersion), averages the
    final-time ozone over the probe row, and returns
    (M_light - M_nolight) / M_nolight along with both means.
    """
    if cfg_nolight.dispersion != cfg_light.dispersion:
        raise ValueError("both configs must share the dispersion grid")
    j = probe_row_index(cfg_nolight.dispersion, probe)
    means = []
    for cfg in (cfg_nolight, cfg_light):
        vcfg = validate_config(cfg)
        traffic = simulate_traffic(vcfg)
        emission = compute_emissions(traffic, vcfg.cfg)
        disp = run_dispersion(emission, vcfg.cfg)
        means.append(float(disp.final_fields[dispersion.IDX_O3, j].mean()))
    m1, m2 = means
    if m1 == 0:
        raise ValueError("no-light ozone mean is zero at the probe row")
    return {"mean_nolight_gkm3": m1, "mean_light_gkm3": m2,
            "increase_fraction": (m2 - m1) / m1}
