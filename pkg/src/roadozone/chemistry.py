"""Five-species photochemistry box: NO2 photolysis, O3 formation, titration.

State vector psi = [O, O2, O3, NO, NO2] in molecule/cm^3. The system is
stiff (rate magnitudes span many orders), so it is advanced with a
linearly-implicit modified Rosenbrock 2(3) pair with adaptive steps.

The integrator is vectorized over a leading batch axis (one box per road
cell or grid point); the shared adaptive step is controlled by the worst
error across the batch, so per-box accuracy is at least the tolerance.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .units import AVOGADRO, CM3_PER_KM3, MOLAR_MASS, S_PER_H

NO2_FRACTION = 0.15


class StiffnessError(RuntimeError):
    """Adaptive step size collapsed below the floor."""


@dataclass(frozen=True)
class RateConstants:
    k1: float = 0.02        # 1/s, NO2 photolysis
    k2: float = 6.09e-34    # cm^6 molecule^-2 s^-1, O + 2 O2 -> O3 + O2
    k3: float = 1.81e-14    # cm^3 molecule^-1 s^-1, O3 + NO -> O2 + NO2
    p: float = NO2_FRACTION

    def __post_init__(self):
        if min(self.k1, self.k2, self.k3) <= 0:
            raise ValueError("rate constants must be positive")
        if not 0 < self.p < 1:
            raise ValueError("NO2 fraction must lie in (0, 1)")


DEFAULT_RATES = RateConstants()


def split_mass_source(s_nox_gkm3h, p=NO2_FRACTION):
    """Split a NOx mass source into NO/NO2 molecule sources.

    The (1-p)/p split is applied to mass first, then each part is converted
    with its own molar mass. Input g/(km^3 h), output molecule/(cm^3 s).
    """
    s = np.asarray(s_nox_gkm3h, dtype=float)
    to_molec = AVOGADRO / CM3_PER_KM3 / S_PER_H
    s_no = (1.0 - p) * s * to_molec / MOLAR_MASS["NO"]
    s_no2 = p * s * to_molec / MOLAR_MASS["NO2"]
    return s_no, s_no2


def rhs(psi, s_no=0.0, s_no2=0.0, k: RateConstants = DEFAULT_RATES):
    """Time derivative of psi; sources in molecule/(cm^3 s)."""
    psi = np.asarray(psi, dtype=float)
    if np.any(psi < 0):
        raise ValueError("negative concentration")
    o, o2, o3, no, no2 = (psi[..., i] for i in range(5))
    r1 = k.k1 * no2
    r2 = k.k2 * o * o2**2
    r3 = k.k3 * o3 * no
    out = np.empty_like(psi)
    out[..., 0] = r1 - r2
    out[..., 1] = r3 - r2
    out[..., 2] = r2 - r3
    out[..., 3] = r1 - r3 + s_no
    out[..., 4] = r3 - r1 + s_no2
    return out


def jacobian(psi, k: RateConstants = DEFAULT_RATES):
    """Analytic Jacobian of the reaction terms, shape (..., 5, 5)."""
    psi = np.asarray(psi, dtype=float)
    o, o2, o3, no = psi[..., 0], psi[..., 1], psi[..., 2], psi[..., 3]
    d2_o = k.k2 * o2**2           # d r2 / d o
    d2_o2 = 2.0 * k.k2 * o * o2   # d r2 / d o2
    d3_o3 = k.k3 * no             # d r3 / d o3
    d3_no = k.k3 * o3             # d r3 / d no
    jac = np.zeros(psi.shape[:-1] + (5, 5))
    jac[..., 0, 0] = -d2_o
    jac[..., 0, 1] = -d2_o2
    jac[..., 0, 4] = k.k1
    jac[..., 1, 0] = -d2_o
    jac[..., 1, 1] = -d2_o2
    jac[..., 1, 2] = d3_o3
    jac[..., 1, 3] = d3_no
    jac[..., 2, 0] = d2_o
    jac[..., 2, 1] = d2_o2
    jac[..., 2, 2] = -d3_o3
    jac[..., 2, 3] = -d3_no
    jac[..., 3, 2] = -d3_o3
    jac[..., 3, 3] = -d3_no
    jac[..., 3, 4] = k.k1
    jac[..., 4, 2] = d3_o3
    jac[..., 4, 3] = d3_no
    jac[..., 4, 4] = -k.k1
    return jac


# modified Rosenbrock 2(3) pair (the ode23s tableau): L-stable order 2
# step with a third-order error estimate
_ROS_D = 1.0 / (2.0 + math.sqrt(2.0))
_ROS_E32 = 6.0 + math.sqrt(2.0)
_H_FLOOR = 1e-12


def _ros_stages(psi, h, s_no, s_no2, k):
    """One Rosenbrock step from psi; returns (psi_new, error_estimate)."""
    eye = np.eye(5)
    jac = jacobian(psi, k)
    w = eye - h * _ROS_D * jac
    f0 = rhs(np.maximum(psi, 0.0), s_no, s_no2, k)
    k1 = np.linalg.solve(w, f0[..., None])[..., 0]
    f1 = rhs(np.maximum(psi + 0.5 * h * k1, 0.0), s_no, s_no2, k)
    k2 = np.linalg.solve(w, (f1 - k1)[..., None])[..., 0] + k1
    psi_new = psi + h * k2
    f2 = rhs(np.maximum(psi_new, 0.0), s_no, s_no2, k)
    k3 = np.linalg.solve(
        w, (f2 - _ROS_E32 * (k2 - f1) - 2.0 * (k1 - f0))[..., None])[..., 0]
    err = (h / 6.0) * (k1 - 2.0 * k2 + k3)
    return psi_new, err


def integrate_adaptive(psi0, source_fn, t_span, rtol=1e-6, atol=1.0,
                       k: RateConstants = DEFAULT_RATES, t_eval=None,
                       h0=None):
    """Integrate the box from t_span[0] to t_span[1].

    source_fn(t) returns (s_no, s_no2) in molecule/(cm^3 s), broadcastable
    over the batch; the source is held constant within each internal step.
    Returns (times, trajectory) where trajectory has one row per output
    time. With t_eval=None only the endpoints are reported.

    Negative excursions beyond atol reject the step; smaller ones are
    floored to zero (concentrations stay nonnegative at accepted steps).
    """
    if rtol <= 0 or atol <= 0:
        raise ValueError("rtol and atol must be positive")
    t0, t1 = float(t_span[0]), float(t_span[1])
    psi = np.asarray(psi0, dtype=float).copy()
    if t_eval is None:
        t_eval = np.array([t0, t1])
    else:
        t_eval = np.asarray(t_eval, dtype=float)
    out = np.empty((t_eval.size,) + psi.shape)
    idx = 0
    while idx < t_eval.size and t_eval[idx] <= t0 + 1e-12:
        out[idx] = psi
        idx += 1

    t = t0
    h = h0 if h0 is not None else min(1e-4, t1 - t0)
    while t < t1 - 1e-12:
        h = min(h, t1 - t)
        # land exactly on the next output time
        if idx < t_eval.size and t + h > t_eval[idx] - 1e-12:
            h = t_eval[idx] - t
        if h < _H_FLOOR:
            raise StiffnessError(f"step size underflow at t={t:.6g} s")
        s_no, s_no2 = source_fn(t)
        psi_new, err = _ros_stages(psi, h, s_no, s_no2, k)

        scale = atol + rtol * np.maximum(np.abs(psi), np.abs(psi_new))
        err_norm = float(np.max(np.abs(err) / scale))
        too_negative = bool(np.any(psi_new < -atol))
        if err_norm <= 1.0 and not too_negative:
            t += h
            psi = np.maximum(psi_new, 0.0)
            while idx < t_eval.size and t_eval[idx] <= t + 1e-9:
                out[idx] = psi
                idx += 1
            fac = 0.9 * err_norm ** (-1.0 / 3.0) if err_norm > 0 else 5.0
            h *= min(5.0, max(0.2, fac))
        elif too_negative:
            h *= 0.5
        else:
            h *= min(1.0, max(0.2, 0.9 * err_norm ** (-1.0 / 3.0)))
    while idx < t_eval.size:
        out[idx] = psi
        idx += 1
    return t_eval, out


def reaction_step_fixed(psi, dt_s, s_no=0.0, s_no2=0.0,
                        k: RateConstants = DEFAULT_RATES, substeps=1,
                        freeze=()):
    """Fixed-step Rosenbrock advance over dt (no error control).

    Used as the reaction half of operator splitting in the dispersion
    solver, where the L-stable step absorbs the stiff transient and the
    splitting itself limits accuracy. ``freeze`` lists component indices
    restored after the step (O2 is held at ambient during dispersion).
    """
    psi = np.asarray(psi, dtype=float).copy()
    frozen = [psi[..., i].copy() for i in freeze]
    h = dt_s / substeps
    for _ in range(substeps):
        psi, _ = _ros_stages(psi, h, s_no, s_no2, k)
        psi = np.maximum(psi, 0.0)
        for i, val in zip(freeze, frozen):
            psi[..., i] = val
    return psi


def initial_state(n_cells, source0_gkm3h, o2_molec_cm3=5.02e18,
                  p=NO2_FRACTION):
    """Street-level initial concentrations.

    O and O3 start at zero, O2 at ambient; NO/NO2 take the mass of one
    hour of the initial NOx source, split (1-p)/p and converted with their
    own molar masses.
    """
    psi0 = np.zeros((n_cells, 5))
    psi0[:, 1] = o2_molec_cm3
    s0 = np.asarray(source0_gkm3h, dtype=float)  # g/(km^3 h) ~ g/km^3 over 1 h
    to_molec = AVOGADRO / CM3_PER_KM3
    psi0[:, 3] = (1.0 - p) * s0 * to_molec / MOLAR_MASS["NO"]
    psi0[:, 4] = p * s0 * to_molec / MOLAR_MASS["NO2"]
    return psi0


def run_roadside_chemistry(times_s, source_gkm3h, psi0, rtol=1e-6, atol=1.0,
                           k: RateConstants = DEFAULT_RATES):
    """Integrate one box per road cell against a sampled NOx source.

    times_s: (n_t,) sample times; source_gkm3h: (n_t, n_cells) volumetric
    NOx mass rate, piecewise-constant between samples. psi0: (n_cells, 5).
    Returns trajectory of shape (n_t, n_cells, 5) in molecule/cm^3.
    """
    times_s = np.asarray(times_s, dtype=float)
    source = np.asarray(source_gkm3h, dtype=float)
    if source.shape[0] != times_s.size:
        raise ValueError("source series and time grid lengths differ")
    psi = np.asarray(psi0, dtype=float).copy()
    out = np.empty((times_s.size,) + psi.shape)
    out[0] = psi
    h = 1e-4
    for n in range(times_s.size - 1):
        s_no, s_no2 = split_mass_source(source[n], k.p)

        def const_source(_t, s_no=s_no, s_no2=s_no2):
            return s_no, s_no2

        try:
            _, traj = integrate_adaptive(
                psi, const_source, (times_s[n], times_s[n + 1]),
                rtol=rtol, atol=atol, k=k, h0=h)
        except StiffnessError as exc:
            raise StiffnessError(f"{exc} (interval starting at index {n})") from exc
        psi = traj[-1]
        out[n + 1] = psi
        h = min(1.0, max(1e-6, (times_s[n + 1] - times_s[n]) / 4.0))
    return out
