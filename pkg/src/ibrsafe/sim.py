"""Closed-loop time-domain simulation with constraint monitoring.

The plant is integrated with classical fixed-step RK4. The grid voltage is
sampled at the start of each step and held through all four stages; the
setpoint is looked up at each stage time (zero-order hold on the schedule).
"""

import csv
import json
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

from .certify import is_hurwitz, spectral_abscissa_2x2
from .errors import NonFiniteState, RiccatiDiverged
from .model import (EPS_X, InverterParams, StateMatrices, build_matrices,
                    control_law, input_constraint_margins, phase_from_aux,
                    power_factor_array, state_constraint_margin)

DIVERGENCE_LIMIT = 1e12
DEFAULT_DT = 1e-4
DEFAULT_HOLD = 0.01   # s, jitter resampling period
RIDE_THROUGH_SCHEDULE = ((0.0, (1300.0, 120.0)), (3.0, (20.0, 0.0)), (6.0, (1300.0, 120.0)))


# --------------------------------------------------------------------------
# grid voltage profiles

@dataclass(frozen=True)
class ConstantVoltage:
    v: float

    def values(self, t):
        return np.full(np.shape(t), float(self.v))


@dataclass(frozen=True)
class JitterVoltage:
    """Uniform random level in ``[v_min, v_max]`` redrawn every ``hold`` seconds."""

    v_min: float
    v_max: float
    hold: float = DEFAULT_HOLD
    seed: int = 0

    def values(self, t):
        t = np.asarray(t, dtype=float)
        idx = np.floor(t / self.hold + 1e-9).astype(np.int64)
        draws = np.random.default_rng(self.seed).uniform(self.v_min, self.v_max, int(idx.max()) + 1)
        return draws[idx]


@dataclass(frozen=True)
class PiecewiseVoltage:
    """Zero-order hold through ``(t, v)`` breakpoints; the first must be at t=0."""

    breakpoints: tuple

    def values(self, t):
        bt = np.array([b[0] for b in self.breakpoints], dtype=float)
        bv = np.array([b[1] for b in self.breakpoints], dtype=float)
        i = np.searchsorted(bt, np.asarray(t, dtype=float) + 1e-12, side="right") - 1
        return bv[np.clip(i, 0, len(bv) - 1)]


# --------------------------------------------------------------------------
# controllers

@dataclass(frozen=True)
class LqrWeights:
    q_weight: np.ndarray = field(default_factory=lambda: np.eye(2))
    r_weight: np.ndarray = field(default_factory=lambda: 1e-4 * np.eye(2))


def lqr_gain(mats: StateMatrices, q_weight=None, r_weight=None, tol=1e-9, max_iter=100):
    """Continuous-time LQR gain by Newton-Kleinman iteration.

    Starts from K=0 when A is Hurwitz, otherwise from a gain placing A-BK at
    -I. Raises RiccatiDiverged if the relative Riccati residual does not
    reach ``tol``.
    """
    a, b = mats.a_mat, mats.b_mat
    q = np.eye(2) if q_weight is None else np.asarray(q_weight, dtype=float)
    r = 1e-4 * np.eye(2) if r_weight is None else np.asarray(r_weight, dtype=float)
    r_inv = np.linalg.inv(r)
    n = a.shape[0]
    k = np.zeros((b.shape[1], n))
    if not is_hurwitz(mats, k)[0]:
        k = np.linalg.solve(b, a + np.eye(n))
    p = None
    for _ in range(max_iter):
        acl = a - b @ k
        if spectral_abscissa_2x2(acl) >= 0:
            raise RiccatiDiverged("Kleinman iterate lost stability")
        p = scipy.linalg.solve_continuous_lyapunov(acl.T, -(q + k.T @ r @ k))
        p = 0.5 * (p + p.T)
        k = r_inv @ b.T @ p
        if riccati_residual(mats, p, q, r) <= tol:
            return k
    raise RiccatiDiverged(f"residual {riccati_residual(mats, p, q, r):.3g} after {max_iter} iterations")


def riccati_residual(mats: StateMatrices, p, q, r):
    """Relative residual of ``A'P + PA - P B R^-1 B' P + Q = 0``."""
    a, b = mats.a_mat, mats.b_mat
    quad = p @ b @ np.linalg.solve(r, b.T) @ p
    res = a.T @ p + p @ a - quad + q
    scale = np.linalg.norm(q) + np.linalg.norm(quad) + 2 * np.linalg.norm(a.T @ p)
    return float(np.linalg.norm(res) / scale)


def resolve_gain(controller, mats: StateMatrices):
    if isinstance(controller, LqrWeights):
        return lqr_gain(mats, controller.q_weight, controller.r_weight)
    return np.asarray(controller, dtype=float)


# --------------------------------------------------------------------------
# scenarios

@dataclass(frozen=True)
class Scenario:
    duration: float
    dt: float
    initial_state: tuple
    setpoint_schedule: tuple    # ((t, (p_ref, q_ref)), ...), first at t = 0
    profile: object             # ConstantVoltage | JitterVoltage | PiecewiseVoltage
    controller: object          # 2x2 gain or LqrWeights

    def __post_init__(self):
        if not self.dt > 0 or not self.duration >= 0:
            raise ValueError("need dt > 0 and duration >= 0")
        times = [s[0] for s in self.setpoint_schedule]
        if not times or times[0] != 0.0 or np.any(np.diff(times) <= 0):
            raise ValueError("schedule times must start at 0 and strictly increase")

    def schedule_arrays(self):
        times = np.array([s[0] for s in self.setpoint_schedule], dtype=float)
        refs = np.array([s[1] for s in self.setpoint_schedule], dtype=float)
        return times, refs


def ride_through_scenario(params: InverterParams, controller, seed=0, dt=DEFAULT_DT,
                          hold=DEFAULT_HOLD, duration=9.0):
    """Fault ride-through: 1300 W/120 Var, 20 W/0 Var from 3 s to 6 s, then back.

    Starts in steady state at the pre-fault setpoint.
    """
    return Scenario(duration, dt, RIDE_THROUGH_SCHEDULE[0][1], RIDE_THROUGH_SCHEDULE,
                    JitterVoltage(params.v_g_min, params.v_g_max, hold, seed), controller)


def hold_scenario(params: InverterParams, controller, setpoint, duration=10.0, seed=0,
                  dt=DEFAULT_DT, hold=DEFAULT_HOLD, initial_state=None):
    """Single setpoint under full-range jitter; starts at the setpoint by default."""
    sp = tuple(map(float, setpoint))
    x0 = sp if initial_state is None else tuple(map(float, initial_state))
    return Scenario(duration, dt, x0, ((0.0, sp),),
                    JitterVoltage(params.v_g_min, params.v_g_max, hold, seed), controller)


# --------------------------------------------------------------------------
# integration

TRAJECTORY_HEADER = ("t", "p", "q", "u_p", "u_q", "u_alpha", "u_beta", "v_g", "pf",
                     "u_out", "m_state", "m_in_lo", "m_in_hi")


@dataclass
class TrajectoryRecord:
    t: np.ndarray
    x: np.ndarray
    u: np.ndarray
    u_phase: np.ndarray
    v_g: np.ndarray
    pf: np.ndarray              # NaN where undefined
    u_out: np.ndarray
    m_state: np.ndarray
    m_in_lo: np.ndarray
    m_in_hi: np.ndarray
    x_ref: np.ndarray           # setpoint in force at each sample
    gain: np.ndarray

    def columns(self):
        return np.column_stack([self.t, self.x, self.u, self.u_phase, self.v_g, self.pf,
                                self.u_out, self.m_state, self.m_in_lo, self.m_in_hi])

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(TRAJECTORY_HEADER)
            for row in self.columns():
                w.writerow([repr(float(v)) for v in row])


def _stage_refs(t0, h, times, refs):
    tiny = 1e-9 * h
    idx = [np.searchsorted(times, tt + tiny, side="right") - 1 for tt in (t0, t0 + h / 2, t0 + h)]
    return [refs[i] for i in idx]


def integrate(scenario: Scenario, params: InverterParams) -> TrajectoryRecord:
    mats = build_matrices(params)
    k = resolve_gain(scenario.controller, mats)
    h = scenario.dt
    n = int(np.floor(scenario.duration / h + 1e-9))
    t = np.arange(n + 1) * h
    v = np.asarray(scenario.profile.values(t), dtype=float)
    if np.any(v <= 0) or not np.all(np.isfinite(v)):
        raise ValueError("grid voltage profile must be positive and finite")
    times, refs = scenario.schedule_arrays()

    a, b = mats.a_mat, mats.b_mat
    b_inv = mats.b_inv
    ff = -(refs @ (b_inv @ a).T)             # per schedule entry
    dist = -(b_inv @ mats.e_vec)
    # closed-loop derivative from the control law, unrolled to scalars
    a11, a12, a21, a22 = a.ravel().tolist()
    b11, b12, b21, b22 = b.ravel().tolist()
    k11, k12, k21, k22 = k.ravel().tolist()
    e1, e2 = mats.e_vec.tolist()
    d1, d2 = dist.tolist()
    refs_l = refs.tolist()
    ff_l = ff.tolist()

    def f(p, q, seg, v2):
        rp, rq = refs_l[seg]
        ep, eq = p - rp, q - rq
        up = -(k11 * ep + k12 * eq) + ff_l[seg][0] + d1 * v2
        uq = -(k21 * ep + k22 * eq) + ff_l[seg][1] + d2 * v2
        return (a11 * p + a12 * q + b11 * up + b12 * uq + e1 * v2,
                a21 * p + a22 * q + b21 * up + b22 * uq + e2 * v2)

    tiny = 1e-9 * h
    seg0 = (np.searchsorted(times, t + tiny, side="right") - 1).tolist()
    segh = (np.searchsorted(times, t + h / 2 + tiny, side="right") - 1).tolist()
    seg1 = (np.searchsorted(times, t + h + tiny, side="right") - 1).tolist()
    v2s = (v * v).tolist()

    xs = np.empty((n + 1, 2))
    p, q = map(float, scenario.initial_state)
    xs[0] = p, q
    for i in range(n):
        v2 = v2s[i]
        k1p, k1q = f(p, q, seg0[i], v2)
        k2p, k2q = f(p + 0.5 * h * k1p, q + 0.5 * h * k1q, segh[i], v2)
        k3p, k3q = f(p + 0.5 * h * k2p, q + 0.5 * h * k2q, segh[i], v2)
        k4p, k4q = f(p + h * k3p, q + h * k3q, seg1[i], v2)
        p += h / 6.0 * (k1p + 2.0 * k2p + 2.0 * k3p + k4p)
        q += h / 6.0 * (k1q + 2.0 * k2q + 2.0 * k3q + k4q)
        if not (abs(p) < DIVERGENCE_LIMIT and abs(q) < DIVERGENCE_LIMIT):
            raise NonFiniteState(f"state left +/-{DIVERGENCE_LIMIT:g} at t={t[i + 1]:.6g} s")
        xs[i + 1] = p, q

    x_ref = refs[np.asarray(seg0)]
    u = control_law(xs, x_ref, k, v, mats)
    u_phase = phase_from_aux(u, v, t, params.omega)
    lo, hi = input_constraint_margins(u, v, params)
    m_state, _ = state_constraint_margin(xs, params.pf_min)
    return TrajectoryRecord(t, xs, u, u_phase, v, power_factor_array(xs),
                            np.linalg.norm(u, axis=1) / v, m_state, lo, hi, x_ref, k)


# --------------------------------------------------------------------------
# monitoring

@dataclass(frozen=True)
class ConstraintStats:
    count: int = 0
    worst: float = 0.0          # largest violation magnitude, native units
    worst_time: float | None = None
    first_time: float | None = None

    def to_json(self):
        return {"count": self.count, "worst": self.worst,
                "worst_time": self.worst_time, "first_time": self.first_time}


@dataclass(frozen=True)
class ViolationSummary:
    input_lower: ConstraintStats
    input_upper: ConstraintStats
    power_factor: ConstraintStats
    output_voltage: ConstraintStats

    def as_dict(self):
        return {"input_lower": self.input_lower, "input_upper": self.input_upper,
                "power_factor": self.power_factor, "output_voltage": self.output_voltage}

    @property
    def total(self):
        return sum(s.count for s in self.as_dict().values())

    @property
    def input_violations(self):
        return self.input_lower.count + self.input_upper.count

    def to_json(self):
        out = {k: v.to_json() for k, v in self.as_dict().items()}
        out["total"] = self.total
        return out


def _stats(t, excess):
    """``excess`` > 0 marks a violation; its value is the magnitude."""
    bad = excess > 0
    if not bad.any():
        return ConstraintStats()
    j = int(np.argmax(np.where(bad, excess, -np.inf)))
    return ConstraintStats(int(bad.sum()), float(excess[j]), float(t[j]),
                           float(t[int(np.argmax(bad))]))


def monitor(traj: TrajectoryRecord, params: InverterParams, rel_tol=1e-9) -> ViolationSummary:
    """Count per-sample constraint violations; margins >= -rel_tol*scale pass."""
    t = traj.t
    in_scale = rel_tol * params.u_out_max * traj.v_g
    lo_ex = np.where(-traj.m_in_lo > in_scale, -traj.m_in_lo, 0.0)
    hi_ex = np.where(-traj.m_in_hi > in_scale, -traj.m_in_hi, 0.0)

    s = np.hypot(traj.x[:, 0], traj.x[:, 1])
    defined = np.isfinite(traj.pf) & (s > EPS_X)
    pf_gap = params.pf_min - np.where(defined, traj.pf, params.pf_min)
    pf_ex = np.where(pf_gap > rel_tol, pf_gap, 0.0)

    v_tol = rel_tol * params.u_out_max
    v_gap = np.maximum(params.u_out_min - traj.u_out, traj.u_out - params.u_out_max)
    v_ex = np.where(v_gap > v_tol, v_gap, 0.0)
    return ViolationSummary(_stats(t, lo_ex), _stats(t, hi_ex), _stats(t, pf_ex), _stats(t, v_ex))


# --------------------------------------------------------------------------
# metrics

@dataclass(frozen=True)
class SegmentMetrics:
    t_start: float
    t_end: float
    x_ref: tuple
    settling_time: float        # NaN if the band is left at the final sample
    steady_state_error: tuple   # |p - p_ref|, |q - q_ref| at the last sample

    def to_json(self):
        return {"t_start": self.t_start, "t_end": self.t_end, "x_ref": list(self.x_ref),
                "settling_time": None if np.isnan(self.settling_time) else self.settling_time,
                "steady_state_error": list(self.steady_state_error)}


def settling_metrics(traj: TrajectoryRecord, schedule, band=0.02):
    """Per-segment settling time and terminal tracking error.

    Settled means ``|p - p_ref| <= band*(1 + |p_ref|)`` and likewise for q for
    the rest of the segment.
    """
    if not 0 < band <= 1:
        raise ValueError("band must be in (0, 1]")
    times = [float(s[0]) for s in schedule]
    out = []
    tiny = 1e-9 * (traj.t[1] - traj.t[0] if len(traj.t) > 1 else 1.0)
    for i, (t0, ref) in enumerate(schedule):
        t1 = times[i + 1] if i + 1 < len(times) else np.inf
        sel = np.nonzero((traj.t >= t0 - tiny) & (traj.t < t1 - tiny))[0]
        if not len(sel):
            continue
        ref = np.asarray(ref, dtype=float)
        err = np.abs(traj.x[sel] - ref)
        inside = np.all(err <= band * (1.0 + np.abs(ref)), axis=1)
        if inside.all():
            settle = 0.0
        elif not inside[-1]:
            settle = float("nan")
        else:
            last_out = int(np.nonzero(~inside)[0][-1])
            settle = float(traj.t[sel[last_out + 1]] - t0)
        out.append(SegmentMetrics(float(t0), float(traj.t[sel[-1]]), tuple(ref.tolist()),
                                  settle, tuple(err[-1].tolist())))
    return out


def log_error_slope(traj: TrajectoryRecord, t_min=0.0, floor=1e-9):
    """Least-squares slope of ``log |x - x_ref|`` (1/s).

    Uses samples after ``t_min`` whose error is above ``floor`` times the
    initial error, so roundoff does not flatten the tail.
    """
    err = np.linalg.norm(traj.x - traj.x_ref, axis=1)
    keep = (traj.t >= t_min) & (err > floor * err[0])
    slope, _ = np.polyfit(traj.t[keep], np.log(err[keep]), 1)
    return float(slope)


def write_violations_json(summary: ViolationSummary, path, extra=None):
    data = summary.to_json()
    if extra:
        data.update(extra)
    with open(path, "w") as fh:
        json.dump(data, fh, indent=2, sort_keys=True)
        fh.write("\n")
