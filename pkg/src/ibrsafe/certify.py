"""Stability and achievability certificates.

A setpoint is certified for a gain when the closed loop is Hurwitz, a
Lyapunov matrix exists, and three S-lemma pencils admit nonnegative
multipliers: state-sector invariance (``sc``) and the lower/upper annulus
bounds on the auxiliary input (``ic1``, ``ic2``).

The three pencil conditions are decoupled in their multipliers, so each is
solved as a one-dimensional concave maximisation of the smallest eigenvalue
instead of handing a joint SDP to a solver.
"""

from dataclasses import dataclass

import numpy as np
import scipy.linalg

from .errors import (BracketExhausted, Infeasible, NoFeasibleGain,
                     NotAchievable, NotHurwitz)
from .model import (InverterParams, StateMatrices, build_matrices,
                    control_law, input_constraint_margins,
                    state_constraint_margin)
from .quadforms import (PENCIL_NAMES, Pencil, assemble_pencils, evaluate,
                        invariance_derivative_quadratic)

GOLDEN = (np.sqrt(5.0) - 1.0) / 2.0
DEFAULT_PQ_RANGE = ((-5000.0, 5000.0), (-5000.0, 5000.0))


@dataclass(frozen=True)
class Tolerances:
    psd_rel: float = 1e-8       # eps_psd = psd_rel * (1 + ||F||_F)
    hurwitz: float = 1e-9       # 1/s
    lambda_max: float = 1e6
    lambda_start: float = 1e-6  # first non-zero bracket point
    expand: float = 4.0
    width_rel: float = 1e-9     # golden/bisection stop: width <= width_rel*(1+lam)

    def eps_psd(self, mat):
        return self.psd_rel * (1.0 + np.linalg.norm(mat))


DEFAULT_TOL = Tolerances()


# --------------------------------------------------------------------------
# stability

@dataclass(frozen=True)
class LyapunovCertificate:
    p_mat: np.ndarray
    decay_margin: float

    def to_json(self):
        return {"p_upper": self.p_mat[np.triu_indices(2)].tolist(),
                "decay_margin": self.decay_margin}


def spectral_abscissa_2x2(mat):
    """Largest real part of the eigenvalues of a real 2x2 matrix."""
    half_tr = 0.5 * (mat[0, 0] + mat[1, 1])
    det = mat[0, 0] * mat[1, 1] - mat[0, 1] * mat[1, 0]
    disc = half_tr**2 - det
    return half_tr + np.sqrt(disc) if disc > 0 else half_tr


def is_hurwitz(mats: StateMatrices, gain, tol: Tolerances = DEFAULT_TOL):
    """Return ``(flag, spectral_abscissa)`` for ``A - BK``."""
    absc = float(spectral_abscissa_2x2(mats.closed_loop(gain)))
    return absc < -tol.hurwitz, absc


def solve_lyapunov(mats: StateMatrices, gain, tol: Tolerances = DEFAULT_TOL):
    """Solve ``Acl' P + P Acl = -I`` and check both Lyapunov inequalities."""
    ok, absc = is_hurwitz(mats, gain, tol)
    if not ok:
        raise NotHurwitz(f"spectral abscissa {absc:.6g} >= 0")
    acl = mats.closed_loop(gain)
    p = scipy.linalg.solve_continuous_lyapunov(acl.T, -np.eye(2))
    p = 0.5 * (p + p.T)
    lyap_ok, decay = lyapunov_margins(acl, p)
    if not lyap_ok:
        raise NotHurwitz("Lyapunov solution is not positive definite")
    return LyapunovCertificate(p, decay)


def lyapunov_margins(acl, p_mat):
    """``(P > 0 and decay > 0, decay)`` with decay = lam_min(-(Acl'P + P Acl))."""
    p_min = np.linalg.eigvalsh(p_mat)[0]
    decay = float(np.linalg.eigvalsh(-(acl.T @ p_mat + p_mat @ acl))[0])
    return bool(p_min > 0 and decay > 0), decay


# --------------------------------------------------------------------------
# pencils

@dataclass(frozen=True)
class PencilSolution:
    lam: float
    margin: float


def _equilibrate(pencil: Pencil):
    """Fixed diagonal congruence so the PSD tolerance is scale-aware.

    Row ``i`` is scaled by ``1/sqrt(s_i)`` with ``s_i`` the largest magnitude
    in that row of either matrix, which bounds every scaled entry by 1.
    Congruence preserves definiteness and keeps ``F(lam)`` affine in lam, so
    the smallest eigenvalue stays concave in lam.
    """
    mb, ma = pencil.m_b, pencil.m_a
    s = np.maximum(np.abs(mb).max(axis=1), np.abs(ma).max(axis=1))
    t = 1.0 / np.sqrt(np.where(s > 0, s, 1.0))
    # two-sided product applied stepwise so subnormal rows do not overflow
    return (mb * t[:, None]) * t[None, :], (ma * t[:, None]) * t[None, :]


class _ScaledPencil:
    def __init__(self, pencil, tol):
        self.mb, self.ma = _equilibrate(pencil)
        self.tol = tol

    def margin(self, lam):
        f = self.mb - lam * self.ma
        return float(np.linalg.eigvalsh(f)[0]), self.tol.eps_psd(f)

    def feasible(self, lam):
        m, eps = self.margin(lam)
        return m >= -eps


def pencil_margin(pencil: Pencil, lam, tol: Tolerances = DEFAULT_TOL):
    """Smallest eigenvalue of the equilibrated ``F(lam)`` and its tolerance."""
    return _ScaledPencil(pencil, tol).margin(lam)


def pencil_feasible(pencil: Pencil, tol: Tolerances = DEFAULT_TOL) -> PencilSolution:
    """Smallest ``lam >= 0`` with ``lam_min(F(lam)) >= -eps_psd``.

    Geometric bracket expansion over ``[0, lambda_max]``, golden-section on
    the concave ``lam_min``, then bisection down to the smallest feasible lam.
    Raises Infeasible when the maximum is negative, BracketExhausted when the
    function is still increasing at ``lambda_max``.
    """
    sp = _ScaledPencil(pencil, tol)
    g0, eps0 = sp.margin(0.0)
    if g0 >= -eps0:
        return PencilSolution(0.0, g0)

    before, prev, g_prev = 0.0, 0.0, g0
    lam = tol.lambda_start
    while True:
        lam = min(lam, tol.lambda_max)
        g, eps = sp.margin(lam)
        if g >= -eps:
            return _smallest_feasible(sp, prev, lam, tol)
        if g <= g_prev:
            lo, hi = before, lam
            break
        if lam >= tol.lambda_max:
            raise BracketExhausted(
                f"lam_min still increasing at lambda_max={tol.lambda_max:g} (margin {g:.3g})")
        before, prev, g_prev = prev, lam, g
        lam *= tol.expand

    # golden section for the concave maximum on [lo, hi]
    best_lam, best_g = (prev, g_prev) if g_prev >= g else (lam, g)
    x1 = hi - GOLDEN * (hi - lo)
    x2 = lo + GOLDEN * (hi - lo)
    (g1, e1), (g2, e2) = sp.margin(x1), sp.margin(x2)
    while True:
        for x, gx, ex in ((x1, g1, e1), (x2, g2, e2)):
            if gx >= -ex:
                return _smallest_feasible(sp, 0.0, x, tol)
            if gx > best_g:
                best_lam, best_g = x, gx
        if hi - lo <= tol.width_rel * (1.0 + best_lam):
            break
        if g1 < g2:
            lo, x1, g1, e1 = x1, x2, g2, e2
            x2 = lo + GOLDEN * (hi - lo)
            g2, e2 = sp.margin(x2)
        else:
            hi, x2, g2, e2 = x2, x1, g1, e1
            x1 = hi - GOLDEN * (hi - lo)
            g1, e1 = sp.margin(x1)
    raise Infeasible(
        f"max lam_min {best_g:.4g} at lam={best_lam:.4g}",
        best_margin=best_g, best_lambda=best_lam)


def _smallest_feasible(sp, lo, hi, tol):
    # lo infeasible, hi feasible; concavity makes the feasible set an interval
    while hi - lo > tol.width_rel * (1.0 + hi):
        mid = 0.5 * (lo + hi)
        if sp.feasible(mid):
            hi = mid
        else:
            lo = mid
    return PencilSolution(hi, sp.margin(hi)[0])


# --------------------------------------------------------------------------
# achievability

@dataclass(frozen=True)
class Multipliers:
    lambda_sc: float
    lambda_ic1: float
    lambda_ic2: float

    def __post_init__(self):
        if min(self.as_array()) < 0:
            raise ValueError("multipliers must be nonnegative")

    def as_array(self):
        return np.array([self.lambda_sc, self.lambda_ic1, self.lambda_ic2])

    def to_json(self):
        return {"sc": self.lambda_sc, "ic1": self.lambda_ic1, "ic2": self.lambda_ic2}


@dataclass(frozen=True)
class AchievabilityCertificate:
    gain: np.ndarray
    setpoint: np.ndarray
    lyap: LyapunovCertificate
    multipliers: Multipliers
    psd_margins: tuple

    def to_json(self):
        return {
            "gain": np.asarray(self.gain).reshape(-1).tolist(),
            "setpoint": np.asarray(self.setpoint).tolist(),
            "lyapunov": self.lyap.to_json(),
            "multipliers": self.multipliers.to_json(),
            "psd_margins": dict(zip(PENCIL_NAMES, map(float, self.psd_margins))),
        }


def check_achievable(gain, setpoint, params: InverterParams,
                     tol: Tolerances = DEFAULT_TOL, mats=None) -> AchievabilityCertificate:
    """Certify ``setpoint`` under ``gain`` or raise NotAchievable.

    Each multiplier is the smallest feasible one for its pencil, which is the
    minimum-norm multiplier vector because the three conditions decouple.
    """
    mats = mats if mats is not None else build_matrices(params)
    gain = np.asarray(gain, dtype=float)
    setpoint = np.asarray(setpoint, dtype=float)
    ok, absc = is_hurwitz(mats, gain, tol)
    if not ok:
        raise NotAchievable("hurwitz", f"spectral abscissa {absc:.6g} 1/s")
    try:
        lyap = solve_lyapunov(mats, gain, tol)
    except NotHurwitz as exc:
        raise NotAchievable("lyapunov", str(exc)) from exc
    sols = []
    for name, pencil in zip(PENCIL_NAMES, assemble_pencils(mats, gain, setpoint, params)):
        try:
            sols.append(pencil_feasible(pencil, tol))
        except Infeasible as exc:
            raise NotAchievable(name, str(exc)) from exc
        except BracketExhausted as exc:
            raise NotAchievable(name, f"bracket exhausted: {exc}") from exc
    return AchievabilityCertificate(
        gain, setpoint, lyap,
        Multipliers(*(s.lam for s in sols)), tuple(s.margin for s in sols))


@dataclass(frozen=True)
class FixedCheck:
    ok: bool
    margins: tuple  # (sc, ic1, ic2) smallest eigenvalues of equilibrated F_i
    lyapunov_ok: bool = True

    def __bool__(self):
        return bool(self.ok)


def check_achievable_fixed(gain, setpoint, lyap: LyapunovCertificate,
                           multipliers: Multipliers, params: InverterParams,
                           tol: Tolerances = DEFAULT_TOL, mats=None) -> FixedCheck:
    """Membership test with (P, multipliers) held fixed; no search."""
    mats = mats if mats is not None else build_matrices(params)
    lyap_ok, _ = lyapunov_margins(mats.closed_loop(gain), lyap.p_mat)
    margins, ok = [], lyap_ok
    pencils = assemble_pencils(mats, gain, setpoint, params)
    for pencil, lam in zip(pencils, multipliers.as_array()):
        m, eps = pencil_margin(pencil, lam, tol)
        margins.append(m)
        ok = ok and m >= -eps
    return FixedCheck(bool(ok), tuple(margins), lyap_ok)


# --------------------------------------------------------------------------
# gain synthesis

@dataclass(frozen=True)
class SearchConfig:
    n_starts: int = 1000
    refine_steps: int = 200
    k_box: tuple = (-0.5, 0.5)
    min_step: float = 1e-6
    initial_step: float | None = None  # default: quarter of the box width

    def __post_init__(self):
        if self.n_starts < 0 or self.refine_steps < 0:
            raise ValueError("search budgets must be >= 0")
        if not self.k_box[0] <= self.k_box[1]:
            raise ValueError("k_box must be (low, high) with low <= high")


def synthesize_gain(setpoint, params: InverterParams, search: SearchConfig = SearchConfig(),
                    seed=0, tol: Tolerances = DEFAULT_TOL):
    """Smallest-Frobenius-norm certified gain found by multi-start + pattern search.

    Eliminates the bilinear term by taking P from the Lyapunov equation, so
    every evaluated candidate is a plain :func:`check_achievable` call.
    Returns ``(gain, certificate)``; raises NoFeasibleGain.
    """
    mats = build_matrices(params)
    rng = np.random.default_rng(seed)
    lo, hi = search.k_box

    def attempt(k):
        try:
            return check_achievable(k, setpoint, params, tol, mats)
        except NotAchievable:
            return None

    best_k, best_cert = None, None
    for _ in range(search.n_starts):
        k = rng.uniform(lo, hi, size=(2, 2))
        if best_k is not None and np.linalg.norm(k) >= np.linalg.norm(best_k):
            continue
        cert = attempt(k)
        if cert is not None:
            best_k, best_cert = k, cert
    if best_k is None:
        raise NoFeasibleGain(
            f"no certified gain for setpoint {np.asarray(setpoint).tolist()} "
            f"in {search.n_starts} samples")

    step = search.initial_step or 0.25 * max(hi - lo, 1e-12)
    for _ in range(search.refine_steps):
        if step < search.min_step:
            break
        improved = False
        for idx in np.ndindex(2, 2):
            for sign in (-1.0, 1.0):
                k = best_k.copy()
                k[idx] += sign * step
                if np.linalg.norm(k) >= np.linalg.norm(best_k):
                    continue
                cert = attempt(k)
                if cert is not None:
                    best_k, best_cert, improved = k, cert, True
                    break
        if not improved:
            step *= 0.5
    return best_k, best_cert


# --------------------------------------------------------------------------
# brute-force oracles

def _sample_sector(rng, params, n_samples, pq_range):
    (p_lo, p_hi), (q_lo, q_hi) = pq_range
    v = rng.uniform(params.v_g_min, params.v_g_max, n_samples)
    x = np.column_stack([rng.uniform(p_lo, p_hi, n_samples), rng.uniform(q_lo, q_hi, n_samples)])
    m, _ = state_constraint_margin(x, params.pf_min)
    return v, x, m >= 0


def implication_counterexample(gain, setpoint, params: InverterParams, n_samples=100_000,
                               pq_range=DEFAULT_PQ_RANGE, seed=0, rel_tol=1e-9):
    """First sampled ``z = [V_G^2, P, Q]`` where the premise holds but the annulus fails.

    Premise: ``v_g`` in its bounds and ``(P, Q)`` in the quadratic sector.
    Returns None when no sample violates the input bounds.
    """
    mats = build_matrices(params)
    rng = np.random.default_rng(seed)
    v, x, in_sector = _sample_sector(rng, params, n_samples, pq_range)
    u = control_law(x, setpoint, gain, v, mats)
    lower, upper = input_constraint_margins(u, v, params)
    scale = rel_tol * params.u_out_max * v
    bad = in_sector & ((lower < -scale) | (upper < -scale))
    if not bad.any():
        return None
    i = int(np.argmax(bad))
    return np.array([v[i] ** 2, x[i, 0], x[i, 1]])


def invariance_counterexample(gain, setpoint, params: InverterParams, n_samples=100_000,
                              pq_range=DEFAULT_PQ_RANGE, seed=0, rel_tol=1e-8):
    """First sampled sector state where the power-factor quadratic is decreasing."""
    mats = build_matrices(params)
    rng = np.random.default_rng(seed)
    _, x, in_sector = _sample_sector(rng, params, n_samples, pq_range)
    form = invariance_derivative_quadratic(mats, gain, setpoint, params.pf_min)
    qdot = evaluate(form, x)
    xn = np.linalg.norm(x, axis=1)
    scale = rel_tol * (1.0 + np.linalg.norm(form.q_mat) * xn**2 + np.linalg.norm(form.r_vec) * xn)
    bad = in_sector & (qdot < -scale)
    if not bad.any():
        return None
    return x[int(np.argmax(bad))].copy()


def steady_state_input_margins(setpoint, params: InverterParams, n_grid=201):
    """Annulus margins with the state parked at ``setpoint`` across the v_g range.

    Holding ``x = x_ref`` is possible for every admissible grid voltage only
    if both margins stay nonnegative, so a negative entry rules the setpoint
    out for any gain. Returns ``(v_grid, lower, upper)`` in V^2.
    """
    mats = build_matrices(params)
    v = np.linspace(params.v_g_min, params.v_g_max, n_grid)
    x = np.broadcast_to(np.asarray(setpoint, dtype=float), (n_grid, 2))
    u = control_law(x, setpoint, np.zeros((2, 2)), v, mats)
    lower, upper = input_constraint_margins(u, v, params)
    return v, lower, upper
