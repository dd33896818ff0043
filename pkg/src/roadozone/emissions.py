"""Instantaneous NOx emission rates from speed/acceleration.

The rate polynomial consumes m/s and m/s^2; callers convert explicitly.
Coefficient rows are keyed by acceleration regime with the switch at
-0.5 m/s^2; the deceleration row is a constant.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .units import KMH_TO_MS, S_PER_H


@dataclass(frozen=True)
class EmissionCoefficients:
    """Polynomial coefficients of the emission-rate formula, petrol-car NOx.

    ``accel_row`` applies for a >= accel_threshold, ``decel_row`` below it.
    Each row is (f1..f6); the deceleration row keeps only the constant.
    """

    accel_row: tuple = (6.19e-4, 8.0e-5, -4.03e-6, -4.13e-4, 3.80e-4, 1.77e-4)
    decel_row: tuple = (2.17e-4, 0.0, 0.0, 0.0, 0.0, 0.0)
    e0_gs: float = 0.0
    accel_threshold_ms2: float = -0.5


PETROL_NOX = EmissionCoefficients()

COEFFICIENT_TABLE = {"petrol_nox": PETROL_NOX}


@dataclass
class EmissionField:
    """Per-cell NOx emission rates and the derived volumetric source term."""

    rate_per_cell_gh: np.ndarray          # g/h
    source_gkm3h: np.ndarray              # g/(km^3 h), rate / cell volume
    time_s: float = 0.0

    @property
    def total_gh(self):
        return float(np.sum(self.rate_per_cell_gh))


def emission_rate_single(v_ms, a_ms2, coeffs: EmissionCoefficients = PETROL_NOX):
    """Emission rate of one vehicle at (v, a), in g/s."""
    v = np.asarray(v_ms, dtype=float)
    a = np.asarray(a_ms2, dtype=float)
    decel = a < coeffs.accel_threshold_ms2

    def poly(row):
        f1, f2, f3, f4, f5, f6 = row
        return f1 + f2 * v + f3 * v**2 + f4 * a + f5 * a**2 + f6 * v * a

    val = np.where(decel, poly(coeffs.decel_row), poly(coeffs.accel_row))
    out = np.maximum(coeffs.e0_gs, val)
    return out.item() if np.isscalar(v_ms) and np.isscalar(a_ms2) else out


def emission_field(rho_vehkm, v_kmh, a_ms2, dx_km, lanes,
                   cell_volume_km3, coeffs: EmissionCoefficients = PETROL_NOX,
                   time_s=0.0, correction=1.0) -> EmissionField:
    """Aggregate per-cell emissions: N_i vehicles, all at the cell's (v, a).

    N_i = rho_i * dx * lanes; the volumetric source divides the cell rate
    by the chemistry cell volume.
    """
    rho = np.asarray(rho_vehkm, dtype=float)
    n_veh = rho * dx_km * lanes
    rate_gs = n_veh * emission_rate_single(np.asarray(v_kmh) * KMH_TO_MS,
                                           np.asarray(a_ms2), coeffs)
    rate_gh = correction * rate_gs * S_PER_H
    return EmissionField(rate_per_cell_gh=rate_gh,
                         source_gkm3h=rate_gh / cell_volume_km3,
                         time_s=time_s)


def total_emission_timeseries(fields) -> np.ndarray:
    """Road total emission rate over time, g/h (sum over cells per frame)."""
    return np.array([f.total_gh for f in fields])


def ground_truth_emissions(traj, coeffs: EmissionCoefficients = PETROL_NOX):
    """Per-frame total emission rate from microscopic trajectories, g/h.

    Sums the single-vehicle rate over all vehicles present in each frame.
    Returns (frame_times_s, totals_gh).
    """
    frames = traj.frames
    times = np.array(sorted(frames)) * traj.frame_dt_s
    totals = np.empty(times.size)
    for k, fr in enumerate(sorted(frames)):
        recs = frames[fr]
        if len(recs) == 0:
            totals[k] = 0.0
            continue
        v = np.array([r.v_ms for r in recs])
        a = np.array([r.a_ms2 for r in recs])
        totals[k] = np.sum(emission_rate_single(v, a, coeffs)) * S_PER_H
    return times, totals


def fit_correction_factor(e_true, e_mod) -> float:
    """Least-squares scale through the origin: r = <true, mod> / <mod, mod>."""
    e_true = np.asarray(e_true, dtype=float)
    e_mod = np.asarray(e_mod, dtype=float)
    if e_true.shape != e_mod.shape:
        raise ValueError("series must have equal length")
    denom = float(np.dot(e_mod, e_mod))
    if denom == 0.0:
        raise ValueError("modeled series is identically zero")
    return float(np.dot(e_true, e_mod)) / denom


def relative_l1_error(e_true, e_mod, r=1.0) -> float:
    """||e_true - r e_mod||_1 / ||e_true||_1."""
    e_true = np.asarray(e_true, dtype=float)
    e_mod = np.asarray(e_mod, dtype=float)
    if e_true.shape != e_mod.shape:
        raise ValueError("series must have equal length")
    denom = float(np.sum(np.abs(e_true)))
    if denom == 0.0:
        raise ValueError("ground-truth series has zero L1 norm")
    return float(np.sum(np.abs(e_true - r * e_mod))) / denom
