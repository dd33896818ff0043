"""Vehicle trajectory ingestion, space-time aggregation and flux calibration.

The native file format is delimited text with a header naming
(vehicle_id, frame, x_m, v_ms, a_ms2); frames tick every 0.1 s. An adapter
maps raw NGSIM column names (and feet units) onto this layout.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from . import cgarz
from .config import FluxModel, derived_w_bounds
from .units import MS_TO_KMH

FEET_TO_M = 0.3048

NGSIM_COLUMNS = {
    "Vehicle_ID": "vehicle_id",
    "Frame_ID": "frame",
    "Local_Y": "x_m",
    "v_Vel": "v_ms",
    "v_Acc": "a_ms2",
}


@dataclass(frozen=True)
class TrajectoryRecord:
    vehicle_id: int
    frame: int
    x_m: float
    v_ms: float
    a_ms2: float


@dataclass
class TrajectorySet:
    records: list
    road_start_m: float
    road_end_m: float
    lane_count: int = 1
    frame_dt_s: float = 0.1
    _frames: dict = field(default=None, repr=False)

    def __post_init__(self):
        by_vehicle = {}
        for r in self.records:
            by_vehicle.setdefault(r.vehicle_id, []).append(r.frame)
        for vid, frames in by_vehicle.items():
            if any(b <= a for a, b in zip(frames, frames[1:])):
                raise ValueError(f"vehicle {vid}: frames not strictly increasing")

    @property
    def frames(self):
        if self._frames is None:
            frames = {}
            for r in self.records:
                frames.setdefault(r.frame, []).append(r)
            self._frames = frames
        return self._frames

    def filtered(self):
        """Drop records outside the road extent."""
        keep = [r for r in self.records
                if self.road_start_m <= r.x_m <= self.road_end_m]
        return TrajectorySet(keep, self.road_start_m, self.road_end_m,
                             self.lane_count, self.frame_dt_s)


def read_trajectory_csv(path, road_start_m, road_end_m, lane_count=1,
                        column_map=None, length_unit_m=1.0):
    """Read a trajectory file; column_map adapts foreign headers.

    Pass column_map=NGSIM_COLUMNS and length_unit_m=FEET_TO_M for raw
    NGSIM dumps.
    """
    records = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None:
            raise ValueError(f"{path}: missing header row")
        names = {c: c for c in reader.fieldnames}
        if column_map:
            names.update({src: dst for src, dst in column_map.items()
                          if src in reader.fieldnames})
        cols = set(names.values())
        required = {"vehicle_id", "frame", "x_m", "v_ms", "a_ms2"}
        missing = required - cols
        if missing:
            raise ValueError(f"{path}: missing columns {sorted(missing)}")
        inv = {dst: src for src, dst in names.items()}
        for row in reader:
            records.append(TrajectoryRecord(
                vehicle_id=int(float(row[inv["vehicle_id"]])),
                frame=int(float(row[inv["frame"]])),
                x_m=float(row[inv["x_m"]]) * length_unit_m,
                v_ms=float(row[inv["v_ms"]]) * length_unit_m,
                a_ms2=float(row[inv["a_ms2"]]) * length_unit_m,
            ))
    return TrajectorySet(records, road_start_m, road_end_m, lane_count).filtered()


@dataclass
class CellAggregate:
    density_vehkm: float
    mean_speed_kmh: float

    @property
    def flow_vehh(self):
        return self.density_vehkm * self.mean_speed_kmh


def aggregate_cells(traj: TrajectorySet, cell_dx_m=120.0, cell_dt_s=4.0):
    """Bin trajectories into space-time cells.

    Density counts the distinct vehicles crossing a cell during its time
    window, per cell length; speed is the mean of in-cell samples.
    Returns a 2-D object array indexed [time_bin][space_bin] (None where
    empty).
    """
    if not traj.records:
        return np.empty((0, 0), dtype=object)
    frames_per_bin = max(1, round(cell_dt_s / traj.frame_dt_s))
    road_len = traj.road_end_m - traj.road_start_m
    n_space = max(1, int(np.ceil(road_len / cell_dx_m - 1e-9)))
    f_min = min(r.frame for r in traj.records)
    f_max = max(r.frame for r in traj.records)
    n_time = (f_max - f_min) // frames_per_bin + 1

    vehicles = [[set() for _ in range(n_space)] for _ in range(n_time)]
    speed_sum = np.zeros((n_time, n_space))
    speed_cnt = np.zeros((n_time, n_space), dtype=int)
    for r in traj.records:
        ti = (r.frame - f_min) // frames_per_bin
        si = min(int((r.x_m - traj.road_start_m) / cell_dx_m), n_space - 1)
        vehicles[ti][si].add(r.vehicle_id)
        speed_sum[ti, si] += r.v_ms
        speed_cnt[ti, si] += 1

    grid = np.empty((n_time, n_space), dtype=object)
    for ti in range(n_time):
        for si in range(n_space):
            if speed_cnt[ti, si] == 0:
                grid[ti, si] = None
                continue
            density = len(vehicles[ti][si]) / (cell_dx_m / 1000.0)
            speed = speed_sum[ti, si] / speed_cnt[ti, si] * MS_TO_KMH
            grid[ti, si] = CellAggregate(density, speed)
    return grid


def kde_fields(positions_m, speeds_ms, h_m, road_m, x_eval_m, v_free_kmh=None):
    """Kernel-density traffic fields from one trajectory frame.

    Gaussian kernels with boundary reflection at both road ends; density
    in veh/km, speed in km/h (kernel-weighted mean; the free-flow speed
    where no vehicle contributes).
    """
    if h_m <= 0:
        raise ValueError("bandwidth must be positive")
    a, b = road_m
    x = np.asarray(x_eval_m, dtype=float)[:, None]
    xi = np.asarray(positions_m, dtype=float)[None, :]
    vi = np.asarray(speeds_ms, dtype=float)[None, :]

    def phi(z):
        return np.exp(-z**2 / 2.0) / np.sqrt(2.0 * np.pi)

    if xi.size == 0:
        rho = np.zeros(x.shape[0])
        v = np.full(x.shape[0], v_free_kmh if v_free_kmh is not None else 0.0)
        return rho, v

    kern = (phi((x - xi) / h_m)
            + phi((x - (2 * a - xi)) / h_m)
            + phi((x - (2 * b - xi)) / h_m))
    rho_per_m = kern.sum(axis=1) / h_m
    ksum = kern.sum(axis=1)
    with np.errstate(invalid="ignore", divide="ignore"):
        v_ms = np.where(ksum > 0, (vi * kern).sum(axis=1) / np.where(ksum > 0, ksum, 1.0), 0.0)
    v_kmh = v_ms * MS_TO_KMH
    if v_free_kmh is not None:
        v_kmh = np.where(ksum > 1e-300, v_kmh, v_free_kmh)
    return rho_per_m * 1000.0, v_kmh


def initial_w_from_fields(rho0_vehkm, v0_kmh, flux: FluxModel):
    """Per-cell w solving V(rho0, w) = v0, clamped to [w_l, w_r].

    Free-flow cells (V independent of w) and unattainable speeds return
    w_r.
    """
    rho0 = np.asarray(rho0_vehkm, dtype=float)
    v0 = np.asarray(v0_kmh, dtype=float)
    w = np.full_like(rho0, flux.w_r)
    congested = rho0 > flux.rho_f_vehkm
    if np.any(congested):
        rho_c = rho0[congested]
        v_c = np.clip(v0[congested], 0.0, flux.v_max_kmh)
        v_low = cgarz.velocity_eval(rho_c, flux.w_l, flux)
        v_high = cgarz.velocity_eval(rho_c, flux.w_r, flux)
        # V is affine in lambda(w) at fixed rho
        span = np.where(v_high > v_low, v_high - v_low, 1.0)
        lam = np.clip((v_c - v_low) / span, 0.0, 1.0)
        w[congested] = flux.w_l + lam * (flux.w_r - flux.w_l)
    return w


def cloud_from_aggregates(grid):
    """Flatten an aggregate grid into (rho, Q) data points."""
    rho, q = [], []
    for cell in grid.ravel():
        if cell is not None:
            rho.append(cell.density_vehkm)
            q.append(cell.flow_vehh)
    return np.array(rho), np.array(q)


def envelope_coverage(rho, q, v_max, rho_f, rho_max, free_band=0.10):
    """Fraction of data points covered by the f-g envelope.

    Congested points (rho > rho_f) must lie between the envelopes; free
    points within a relative band around the free-flow parabola.
    """
    rho = np.asarray(rho, dtype=float)
    q = np.asarray(q, dtype=float)
    valid = rho <= rho_max
    g = rho * v_max * (1.0 - rho / rho_max)
    f = rho_f * v_max * (1.0 - rho / rho_max)
    congested = valid & (rho > rho_f)
    free = valid & ~congested
    ok_cong = congested & (q >= f * (1 - 1e-9)) & (q <= g * (1 + 1e-9))
    ok_free = free & (np.abs(q - g) <= free_band * np.maximum(g, 1e-12))
    total = max(1, int(np.sum(valid)))
    return float(np.sum(ok_cong | ok_free)) / total


def calibrate_flux_model(grid, lanes, veh_len_km=7.5e-3, coverage_target=0.97,
                         v_max_grid=None, rho_f_grid=None, free_band=0.10):
    """Grid-search (v_max, rho_f) so the f-g envelope covers the data cloud.

    rho_max is a road property, lanes / vehicle length. Among candidates
    reaching the coverage target the tightest envelope (smallest enclosed
    area) wins; otherwise the best-covering one, with a warning flag.
    Returns (FluxModel, report dict).
    """
    rho, q = cloud_from_aggregates(grid)
    if rho.size == 0:
        raise ValueError("no aggregate data to calibrate against")
    rho_max = lanes / veh_len_km
    if v_max_grid is None:
        # infer the free speed only away from the jam density, where the
        # parabola factor is well conditioned
        ok = (rho > 0) & (rho < 0.9 * rho_max)
        with np.errstate(divide="ignore", invalid="ignore"):
            v_obs = np.where(ok, q / np.maximum(rho, 1e-9)
                             / np.maximum(1 - rho / rho_max, 1e-9), 0.0)
        v_hi = np.percentile(v_obs[v_obs > 0], 99) if np.any(v_obs > 0) else 100.0
        v_hi = min(max(v_hi, 10.0), 300.0)
        v_max_grid = np.arange(max(5.0, 0.5 * v_hi), 1.6 * v_hi + 1.0, 2.5)
    if rho_f_grid is None:
        rho_f_grid = np.arange(0.05, 0.55, 0.025) * rho_max

    best = None  # (meets_target, coverage, -area, v_max, rho_f)
    for v_max in v_max_grid:
        for rho_f in rho_f_grid:
            cov = envelope_coverage(rho, q, v_max, rho_f, rho_max, free_band)
            # area between g and f over [rho_f, rho_max]
            area = v_max * (rho_max - rho_f) ** 3 / (6.0 * rho_max)
            key = (cov >= coverage_target, cov if cov < coverage_target else 1.0,
                   -area)
            if best is None or key > best[0]:
                best = (key, cov, float(v_max), float(rho_f))
    _, coverage, v_max, rho_f = best
    w_l, w_r = derived_w_bounds(v_max, rho_f, rho_max)
    model = FluxModel(v_max_kmh=v_max, rho_f_vehkm=rho_f,
                      rho_max_vehkm=rho_max, w_l=w_l, w_r=w_r)
    report = {
        "coverage": coverage,
        "coverage_target": coverage_target,
        "meets_target": coverage >= coverage_target,
        "n_points": int(rho.size),
        "rho_max_vehkm": rho_max,
    }
    return model, report


def synthetic_trajectories(flux: FluxModel, n_vehicles=60, duration_s=60.0,
                           road_m=(0.0, 500.0), lane_count=1, seed=0,
                           frame_dt_s=0.1):
    """Deterministic synthetic trajectory set exercising the NGSIM code paths.

    Vehicles enter at staggered times and follow speeds drawn from the
    flux family at a slowly varying background density.
    """
    rng = np.random.default_rng(seed)
    a, b = road_m
    records = []
    t_grid = np.arange(0.0, duration_s, frame_dt_s)
    for vid in range(n_vehicles):
        t_enter = rng.uniform(0.0, 0.7 * duration_s)
        w = rng.uniform(flux.w_l, flux.w_r)
        rho_bg = rng.uniform(0.2, 0.9) * flux.rho_max_vehkm
        x = a
        v_prev = None
        for frame, t in enumerate(t_grid):
            if t < t_enter or x > b:
                continue
            rho_here = rho_bg * (1.0 + 0.3 * np.sin(2 * np.pi * (x - a) / (b - a)))
            rho_here = min(max(rho_here, 0.0), flux.rho_max_vehkm)
            v_ms = cgarz.velocity_eval(rho_here, w, flux) / MS_TO_KMH
            a_ms2 = 0.0 if v_prev is None else (v_ms - v_prev) / frame_dt_s
            records.append(TrajectoryRecord(vid, frame, x, v_ms, a_ms2))
            x += v_ms * frame_dt_s
            v_prev = v_ms
    return TrajectorySet(records, a, b, lane_count, frame_dt_s)
