"""Quadratic forms ``z'Qz + r'z + c`` and the lambda-affine pencils built from them.

The lifted coordinate is always ``z = [V_G^2, P, Q]`` in that order. A pencil
``(m_b, m_a)`` stands for the family ``F(lam) = m_b - lam * m_a`` of
homogenised matrices; ``F(lam) >= 0`` certifies ``Q_a(z) >= 0 => Q_b(z) >= 0``.
"""

from dataclasses import dataclass

import numpy as np

from .model import InverterParams, StateMatrices


@dataclass(frozen=True)
class QuadraticForm:
    q_mat: np.ndarray
    r_vec: np.ndarray
    c: float = 0.0

    def __post_init__(self):
        q = np.array(self.q_mat, dtype=float)
        r = np.array(self.r_vec, dtype=float).reshape(-1)
        if q.ndim != 2 or q.shape[0] != q.shape[1] or q.shape[0] != r.size:
            raise ValueError(f"inconsistent shapes: q {q.shape}, r {r.shape}")
        q = 0.5 * (q + q.T)
        q.setflags(write=False)
        r.setflags(write=False)
        object.__setattr__(self, "q_mat", q)
        object.__setattr__(self, "r_vec", r)
        object.__setattr__(self, "c", float(self.c))

    @property
    def dim(self):
        return self.r_vec.size

    def __call__(self, z):
        return evaluate(self, z)

    def __add__(self, other):
        return QuadraticForm(self.q_mat + other.q_mat, self.r_vec + other.r_vec, self.c + other.c)

    def to_json(self):
        iu = np.triu_indices(self.dim)
        return {
            "dim": self.dim,
            "q_upper": self.q_mat[iu].tolist(),
            "r": self.r_vec.tolist(),
            "c": self.c,
        }

    @classmethod
    def from_json(cls, data):
        n = int(data["dim"])
        q = np.zeros((n, n))
        q[np.triu_indices(n)] = data["q_upper"]
        q = q + np.triu(q, 1).T
        return cls(q, data["r"], data["c"])


@dataclass(frozen=True)
class Pencil:
    m_b: np.ndarray
    m_a: np.ndarray

    def __post_init__(self):
        mb = np.array(self.m_b, dtype=float)
        ma = np.array(self.m_a, dtype=float)
        if mb.shape != ma.shape or mb.shape[0] != mb.shape[1]:
            raise ValueError(f"pencil shapes differ: {mb.shape} vs {ma.shape}")
        for m in (mb, ma):
            if not np.allclose(m, m.T, rtol=1e-12, atol=0.0):
                raise ValueError("pencil matrices must be symmetric")
        object.__setattr__(self, "m_b", 0.5 * (mb + mb.T))
        object.__setattr__(self, "m_a", 0.5 * (ma + ma.T))

    @property
    def size(self):
        return self.m_b.shape[0]

    def at(self, lam):
        return self.m_b - lam * self.m_a


def evaluate(q: QuadraticForm, z):
    """Evaluate a form; ``z`` may carry leading batch axes."""
    z = np.asarray(z, dtype=float)
    if z.shape[-1] != q.dim:
        raise ValueError(f"expected {q.dim}-vector, got shape {z.shape}")
    return np.einsum("...i,ij,...j->...", z, q.q_mat, z) + z @ q.r_vec + q.c


def homogenize(q: QuadraticForm):
    n = q.dim
    h = np.zeros((n + 1, n + 1))
    h[:n, :n] = q.q_mat
    h[:n, n] = h[n, :n] = 0.5 * q.r_vec
    h[n, n] = q.c
    return h


def _pf_weights(pf_min):
    return 1.0 - pf_min**2, -(pf_min**2)


def state_quadratic_x(pf_min):
    a, b = _pf_weights(pf_min)
    return QuadraticForm(np.diag([a, b]), np.zeros(2), 0.0)


def state_quadratic_z(pf_min):
    a, b = _pf_weights(pf_min)
    return QuadraticForm(np.diag([0.0, a, b]), np.zeros(3), 0.0)


def disturbance_quadratic(v_g_min, v_g_max):
    """Nonnegative exactly for ``v_g_min^2 <= V_G^2 <= v_g_max^2``."""
    lo, hi = v_g_min**2, v_g_max**2
    return QuadraticForm(np.diag([-1.0, 0.0, 0.0]), [lo + hi, 0.0, 0.0], -lo * hi)


def invariance_derivative_quadratic(mats: StateMatrices, gain, setpoint, pf_min):
    """Time derivative of the power-factor quadratic along the closed loop.

    For every x the form equals ``grad Q_a(x) . (A - BK)(x - x_ref)``.
    """
    a, b = _pf_weights(pf_min)
    d = np.diag([2.0 * a, 2.0 * b])
    dacl = d @ mats.closed_loop(gain)
    return QuadraticForm(dacl, -dacl @ np.asarray(setpoint, dtype=float), 0.0)


def _input_map(mats: StateMatrices, gain, setpoint):
    """Return ``(M, w)`` with ``u(z) = w - M z`` under the control law."""
    k = np.asarray(gain, dtype=float)
    b_inv = mats.b_inv
    m = np.column_stack([b_inv @ mats.e_vec, k])
    w = (k - b_inv @ mats.a_mat) @ np.asarray(setpoint, dtype=float)
    return m, w


def input_quadratics(mats: StateMatrices, gain, setpoint, u_out_min, u_out_max):
    """Lower/upper annulus forms in z.

    ``lower(z) = |u(z)|^2 - u_out_min^2 V_G^2`` and
    ``upper(z) = u_out_max^2 V_G^2 - |u(z)|^2``.
    """
    m, w = _input_map(mats, gain, setpoint)
    mtm = m.T @ m
    mtw = m.T @ w
    e1 = np.array([1.0, 0.0, 0.0])
    lower = QuadraticForm(mtm, -2.0 * mtw - u_out_min**2 * e1, w @ w)
    upper = QuadraticForm(-mtm, 2.0 * mtw + u_out_max**2 * e1, -(w @ w))
    return lower, upper


@dataclass(frozen=True)
class CertificatePencils:
    sc: Pencil
    ic1: Pencil
    ic2: Pencil

    def __iter__(self):
        return iter((self.sc, self.ic1, self.ic2))


PENCIL_NAMES = ("sc", "ic1", "ic2")


def assemble_pencils(mats: StateMatrices, gain, setpoint, params: InverterParams):
    """Build the state-invariance pencil (3x3) and both input pencils (4x4)."""
    q_sc_b = invariance_derivative_quadratic(mats, gain, setpoint, params.pf_min)
    q_sc_a = state_quadratic_x(params.pf_min)
    sc = Pencil(homogenize(q_sc_b), homogenize(q_sc_a))

    lower, upper = input_quadratics(mats, gain, setpoint, params.u_out_min, params.u_out_max)
    premise = homogenize(state_quadratic_z(params.pf_min)) + homogenize(
        disturbance_quadratic(params.v_g_min, params.v_g_max))
    return CertificatePencils(
        sc, Pencil(homogenize(lower), premise), Pencil(homogenize(upper), premise))


def forms_json(mats: StateMatrices, gain, setpoint, params: InverterParams):
    """Every quadratic used by the certificate, for debugging dumps."""
    lower, upper = input_quadratics(mats, gain, setpoint, params.u_out_min, params.u_out_max)
    forms = {
        "state_x": state_quadratic_x(params.pf_min),
        "state_z": state_quadratic_z(params.pf_min),
        "disturbance": disturbance_quadratic(params.v_g_min, params.v_g_max),
        "invariance_derivative": invariance_derivative_quadratic(
            mats, gain, setpoint, params.pf_min),
        "input_lower": lower,
        "input_upper": upper,
    }
    out = {"coordinates": ["V_G^2", "P", "Q"]}
    out["forms"] = {k: v.to_json() for k, v in forms.items()}
    pencils = assemble_pencils(mats, gain, setpoint, params)
    out["pencils"] = {
        name: {"m_b": p.m_b.tolist(), "m_a": p.m_a.tolist()}
        for name, p in zip(PENCIL_NAMES, pencils)
    }
    return out
