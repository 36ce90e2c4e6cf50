"""Direct-power-control model of a grid-connected inverter.

State is ``x = [P, Q]`` (W, Var). The plant is driven through the auxiliary
input ``u = [u_P, u_Q]`` (V^2), which turns the bilinear alpha-beta model into

    xdot = A x + B u + E V_G^2

with the squared grid-voltage magnitude acting as a measurable disturbance.
All quantities are SI. Functions broadcast over leading axes where it is
cheap to do so (states ``(..., 2)``, voltages ``(...)``).
"""

from dataclasses import dataclass

import numpy as np

from .errors import SingularGridVoltage, UndefinedPowerFactor

EPS_V = 1e-9  # V, guard for the auxiliary-input inverse
EPS_X = 1e-9  # VA, guard for 0/0 power factor

# The default parameter set rounds omega to 314 rad/s for f = 50 Hz (2*pi*50 = 314.159...).
OMEGA_REL_TOL = 1e-3


@dataclass(frozen=True)
class InverterParams:
    """Filter, grid and constraint parameters.

    ``omega`` defaults to ``2*pi*freq``. An explicit value is accepted when it
    agrees with ``2*pi*freq`` to ``OMEGA_REL_TOL`` relative, which admits the
    rounded 314 rad/s used for 50 Hz grids.
    """

    r_filter: float
    l_filter: float
    freq: float
    v_g_min: float
    v_g_max: float
    u_out_min: float
    u_out_max: float
    pf_min: float
    omega: float | None = None

    def __post_init__(self):
        if self.omega is None:
            object.__setattr__(self, "omega", 2.0 * np.pi * self.freq)
        problems = self.problems()
        if problems:
            raise ValueError("invalid InverterParams: " + "; ".join(problems))

    def problems(self):
        """List every violated invariant (empty when valid)."""
        out = []
        values = {k: getattr(self, k) for k in (
            "r_filter", "l_filter", "freq", "omega", "v_g_min", "v_g_max",
            "u_out_min", "u_out_max", "pf_min")}
        for k, v in values.items():
            if not np.isfinite(v):
                out.append(f"{k} must be finite")
        if not self.r_filter > 0:
            out.append("r_filter must be > 0")
        if not self.l_filter > 0:
            out.append("l_filter must be > 0")
        if self.freq < 0:
            out.append("freq must be >= 0")
        expected = 2.0 * np.pi * self.freq
        if abs(self.omega - expected) > OMEGA_REL_TOL * max(abs(expected), 1e-12):
            out.append(f"omega={self.omega} inconsistent with 2*pi*freq={expected:.6g}")
        if not 0 < self.v_g_min <= self.v_g_max:
            out.append("need 0 < v_g_min <= v_g_max")
        if not 0 < self.u_out_min <= self.u_out_max:
            out.append("need 0 < u_out_min <= u_out_max")
        if not 0 < self.pf_min < 1:
            out.append("need 0 < pf_min < 1")
        return out


DEFAULT_PARAMS = InverterParams(
    r_filter=0.12, l_filter=4e-3, freq=50.0, omega=314.0,
    v_g_min=105.6, v_g_max=114.4, u_out_min=104.5, u_out_max=115.5,
    pf_min=0.95,
)

# Reference gain obtained for DEFAULT_PARAMS by Monte Carlo optimisation.
REFERENCE_GAIN = np.array([[-0.0015, -0.0003], [-0.4028, -0.3211]])


@dataclass(frozen=True)
class StateMatrices:
    a_mat: np.ndarray
    b_mat: np.ndarray
    e_vec: np.ndarray

    @property
    def b_inv(self):
        return np.linalg.inv(self.b_mat)

    def closed_loop(self, gain):
        return self.a_mat - self.b_mat @ np.asarray(gain, dtype=float)


def build_matrices(params: InverterParams) -> StateMatrices:
    rl = params.r_filter / params.l_filter
    w = params.omega
    g = 3.0 / (2.0 * params.l_filter)
    a = np.array([[-rl, -w], [w, -rl]])
    b = g * np.eye(2)
    e = np.array([-g, 0.0])
    for m in (a, b, e):
        m.setflags(write=False)
    return StateMatrices(a, b, e)


def _grid_phasor(v_g, t, omega):
    return v_g * np.cos(omega * t), v_g * np.sin(omega * t)


def aux_from_phase(phase, v_g, t, omega):
    """Map inverter alpha-beta voltage to the auxiliary input (V -> V^2)."""
    phase = np.asarray(phase, dtype=float)
    va, vb = _grid_phasor(np.asarray(v_g, dtype=float), np.asarray(t, dtype=float), omega)
    ua, ub = phase[..., 0], phase[..., 1]
    return np.stack([va * ua + vb * ub, vb * ua - va * ub], axis=-1)


def phase_from_aux(aux, v_g, t, omega):
    """Inverse of :func:`aux_from_phase`.

    Raises SingularGridVoltage when any ``v_g <= EPS_V``.
    """
    v_g = np.asarray(v_g, dtype=float)
    if np.any(v_g <= EPS_V):
        raise SingularGridVoltage(f"grid voltage {v_g.min()} V too small to invert")
    aux = np.asarray(aux, dtype=float)
    c, s = np.cos(omega * np.asarray(t, dtype=float)), np.sin(omega * np.asarray(t, dtype=float))
    up, uq = aux[..., 0], aux[..., 1]
    return np.stack([(c * up + s * uq) / v_g, (s * up - c * uq) / v_g], axis=-1)


def power_factor(state):
    p, q = float(state[0]), float(state[1])
    s = np.hypot(p, q)
    if s <= EPS_X:
        raise UndefinedPowerFactor(f"apparent power {s} VA is zero")
    return p / s


def power_factor_array(states):
    """Vectorised power factor; NaN where undefined."""
    states = np.asarray(states, dtype=float)
    s = np.hypot(states[..., 0], states[..., 1])
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(s > EPS_X, states[..., 0] / np.where(s > EPS_X, s, 1.0), np.nan)


def state_constraint_margin(state, pf_min):
    """Return ``(quadratic_margin, p >= 0)`` for the power-factor sector.

    The quadratic alone also admits the mirrored ``p < 0`` sector, hence the
    separate sign flag.
    """
    state = np.asarray(state, dtype=float)
    p, q = state[..., 0], state[..., 1]
    margin = (1.0 - pf_min**2) * p**2 - pf_min**2 * q**2
    return margin, p >= 0


def input_constraint_margins(aux, v_g, params: InverterParams):
    """Margins of the annulus ``u_out_min*v_g <= |u| <= u_out_max*v_g`` (V^2)."""
    norm = np.linalg.norm(np.asarray(aux, dtype=float), axis=-1)
    v_g = np.asarray(v_g, dtype=float)
    return norm - params.u_out_min * v_g, params.u_out_max * v_g - norm


def control_law(state, setpoint, gain, v_g, mats: StateMatrices):
    """u = -K (x - x_ref) - B^-1 A x_ref - B^-1 E v_g^2."""
    x = np.asarray(state, dtype=float)
    r = np.asarray(setpoint, dtype=float)
    k = np.asarray(gain, dtype=float)
    b_inv = mats.b_inv
    ff = -(r @ (b_inv @ mats.a_mat).T)
    dist = -(b_inv @ mats.e_vec)
    v2 = np.asarray(v_g, dtype=float) ** 2
    return -(x - r) @ k.T + ff + v2[..., None] * dist


def open_loop_derivative(state, aux, v_g, mats: StateMatrices):
    x = np.asarray(state, dtype=float)
    u = np.asarray(aux, dtype=float)
    v2 = np.asarray(v_g, dtype=float) ** 2
    return x @ mats.a_mat.T + u @ mats.b_mat.T + v2[..., None] * mats.e_vec


def closed_loop_derivative(state, setpoint, gain, mats: StateMatrices):
    """Error dynamics (A - BK)(x - x_ref); the feedforward removes v_g."""
    err = np.asarray(state, dtype=float) - np.asarray(setpoint, dtype=float)
    return err @ mats.closed_loop(gain).T
