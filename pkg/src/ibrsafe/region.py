"""Achievable-set estimation for fixed gains.

Setpoints are sampled uniformly, certified one by one, and certificates that
share (approximately) the same multipliers are merged into convex polygons.
Because the convex-combination argument behind that merge is not airtight
for the input conditions, every polygon is audited by random probing before
it is exported.

Certification is injected through ``check`` / ``check_fixed`` callables with
the signatures of :func:`ibrsafe.certify.check_achievable` and
:func:`ibrsafe.certify.check_achievable_fixed`.
"""

from dataclasses import dataclass, field

import numpy as np

from .certify import (DEFAULT_TOL, LyapunovCertificate,
                      Multipliers, SearchConfig, check_achievable,
                      check_achievable_fixed, is_hurwitz, synthesize_gain)
from .errors import NoFeasibleGain, NoStabilizingGain, NotAchievable
from .model import InverterParams, build_matrices

DEFAULT_P_RANGE = (0.0, 3000.0)
DEFAULT_Q_RANGE = (-1000.0, 1000.0)


@dataclass(frozen=True)
class SetpointGrid:
    p_min: float = DEFAULT_P_RANGE[0]
    p_max: float = DEFAULT_P_RANGE[1]
    q_min: float = DEFAULT_Q_RANGE[0]
    q_max: float = DEFAULT_Q_RANGE[1]
    n_samples: int = 1000
    seed: int = 0

    def __post_init__(self):
        if not (self.p_min <= self.p_max and self.q_min <= self.q_max):
            raise ValueError("grid bounds must satisfy min <= max")
        if self.n_samples <= 0:
            raise ValueError("n_samples must be > 0")


def sample_setpoints(grid: SetpointGrid):
    """``(n_samples, 2)`` array of i.i.d. uniform setpoints."""
    rng = np.random.default_rng(grid.seed)
    p = rng.uniform(grid.p_min, grid.p_max, grid.n_samples)
    q = rng.uniform(grid.q_min, grid.q_max, grid.n_samples)
    return np.column_stack([p, q])


# --------------------------------------------------------------------------
# rate

@dataclass
class RegionReport:
    gain: np.ndarray
    setpoints: np.ndarray
    certificates: list          # AchievabilityCertificate or None per sample
    reasons: list               # failing stage per sample ("" when achievable)
    groups: list = field(default_factory=list)
    validations: list = field(default_factory=list)

    @property
    def n_samples(self):
        return len(self.setpoints)

    @property
    def achievable_mask(self):
        return np.array([c is not None for c in self.certificates], dtype=bool)

    @property
    def rate(self):
        return float(self.achievable_mask.sum()) / self.n_samples if self.n_samples else 0.0

    def reason_counts(self):
        out = {}
        for r in self.reasons:
            if r:
                out[r] = out.get(r, 0) + 1
        return dict(sorted(out.items()))

    def to_json(self):
        samples = []
        for x, cert, why in zip(self.setpoints, self.certificates, self.reasons):
            entry = {"p": float(x[0]), "q": float(x[1]),
                     "status": "achievable" if cert is not None else "unachievable"}
            if cert is not None:
                entry["multipliers"] = cert.multipliers.to_json()
            else:
                entry["reason"] = why
            samples.append(entry)
        out = {
            "gain": np.asarray(self.gain).reshape(-1).tolist(),
            "n_samples": self.n_samples,
            "rate": self.rate,
            "failure_counts": self.reason_counts(),
            "samples": samples,
            "groups": [],
        }
        for i, g in enumerate(self.groups):
            entry = g.to_json()
            if i < len(self.validations):
                entry["validation"] = self.validations[i].to_json()
            out["groups"].append(entry)
        return out


def achievability_rate(gain, samples, params: InverterParams, check=check_achievable,
                       tol=DEFAULT_TOL) -> RegionReport:
    mats = build_matrices(params)
    certs, reasons = [], []
    for x in np.asarray(samples, dtype=float):
        try:
            certs.append(check(gain, x, params, tol=tol, mats=mats))
            reasons.append("")
        except NotAchievable as exc:
            certs.append(None)
            reasons.append(exc.stage)
    return RegionReport(np.asarray(gain, dtype=float), np.asarray(samples, dtype=float),
                        certs, reasons)


@dataclass(frozen=True)
class GainTrial:
    gain: np.ndarray
    rate: float
    hurwitz: bool


def optimize_gain(k_box, n_gain_samples, samples, params: InverterParams, seed=0,
                  extra_candidates=(), check=check_achievable, tol=DEFAULT_TOL):
    """Monte Carlo sweep of gains; returns ``(best_gain, report, trace)``.

    Gains are drawn element-wise uniform in ``k_box`` (either a ``(lo, hi)``
    pair or a 2x2x2 array of per-element bounds); ``extra_candidates`` are
    evaluated first. Non-Hurwitz gains are recorded with rate 0 and skipped.
    The first gain attaining the maximal rate wins.
    """
    if n_gain_samples <= 0 and not len(extra_candidates):
        raise ValueError("n_gain_samples must be > 0")
    lo, hi = _box_bounds(k_box)
    rng = np.random.default_rng(seed)
    mats = build_matrices(params)
    gains = [np.asarray(k, dtype=float) for k in extra_candidates]
    gains += [rng.uniform(lo, hi) for _ in range(max(n_gain_samples, 0))]

    trace, best = [], None
    for k in gains:
        stable, _ = is_hurwitz(mats, k, tol)
        if not stable:
            trace.append(GainTrial(k, 0.0, False))
            continue
        report = achievability_rate(k, samples, params, check=check, tol=tol)
        trace.append(GainTrial(k, report.rate, True))
        if best is None or report.rate > best[1].rate:
            best = (k, report)
    if best is None:
        raise NoStabilizingGain(f"none of {len(gains)} sampled gains is Hurwitz")
    return best[0], best[1], trace


def _box_bounds(k_box):
    arr = np.asarray(k_box, dtype=float)
    if arr.shape == (2,):
        return np.full((2, 2), arr[0]), np.full((2, 2), arr[1])
    if arr.shape == (2, 2, 2):
        return arr[0], arr[1]
    raise ValueError("k_box must be (lo, hi) or shape (2, 2, 2)")


# --------------------------------------------------------------------------
# convex hulls

def _cross(o, a, b):
    return (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])


def convex_hull(points):
    """Monotone chain; counterclockwise vertices without collinear points."""
    pts = sorted(set(map(tuple, np.asarray(points, dtype=float).tolist())))
    if len(pts) < 3:
        return np.array(pts, dtype=float).reshape(-1, 2)
    lower, upper = [], []
    for p in pts:
        while len(lower) >= 2 and _cross(lower[-2], lower[-1], p) <= 0:
            lower.pop()
        lower.append(p)
    for p in reversed(pts):
        while len(upper) >= 2 and _cross(upper[-2], upper[-1], p) <= 0:
            upper.pop()
        upper.append(p)
    return np.array(lower[:-1] + upper[:-1], dtype=float)


def polygon_area(vertices):
    v = np.asarray(vertices, dtype=float)
    x, y = v[:, 0], v[:, 1]
    return 0.5 * float(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1)))


@dataclass(frozen=True)
class HullGroup:
    gain: np.ndarray
    lyap: LyapunovCertificate
    multipliers: Multipliers
    vertices: np.ndarray        # counterclockwise
    members: np.ndarray         # setpoints that passed re-verification

    def to_json(self):
        return {
            "multipliers": self.multipliers.to_json(),
            "vertices": self.vertices.tolist(),
            "n_members": len(self.members),
            "area": polygon_area(self.vertices),
        }


def hull_contains(group: HullGroup, setpoint, rel_tol=1e-9):
    """Point-in-convex-polygon test, boundary inclusive."""
    return polygon_contains(group.vertices, setpoint, rel_tol)


def polygon_contains(vertices, point, rel_tol=1e-9):
    v = np.asarray(vertices, dtype=float)
    x = np.asarray(point, dtype=float)
    scale = max(float(np.abs(v).max()), float(np.abs(x).max()), 1.0)
    nxt = np.roll(v, -1, axis=0)
    edge = nxt - v
    cross = edge[:, 0] * (x[1] - v[:, 1]) - edge[:, 1] * (x[0] - v[:, 0])
    return bool(np.all(cross >= -rel_tol * scale * np.linalg.norm(edge, axis=1)))


def round_sig(value, digits=2):
    if value == 0 or not np.isfinite(value):
        return float(value)
    return float(f"{value:.{digits - 1}e}")


def _cluster_key(mults: Multipliers, lambda_quantum):
    lam = mults.as_array()
    if lambda_quantum is None:
        return tuple(round_sig(v, 2) for v in lam)
    return tuple(np.round(lam / lambda_quantum).astype(int).tolist())


def group_hulls(report: RegionReport, params: InverterParams, lambda_quantum=None,
                check_fixed=check_achievable_fixed, tol=DEFAULT_TOL):
    """Cluster certificates by multiplier, re-verify at the medoid, hull survivors.

    ``lambda_quantum=None`` rounds every multiplier to two significant
    figures; otherwise multipliers are binned to multiples of the quantum.
    """
    mats = build_matrices(params)
    clusters = {}
    for x, cert in zip(report.setpoints, report.certificates):
        if cert is not None:
            clusters.setdefault(_cluster_key(cert.multipliers, lambda_quantum), []).append((x, cert))

    groups = []
    for key in sorted(clusters):
        members = clusters[key]
        if len(members) < 3:
            continue
        rep = _medoid([c for _, c in members])
        kept = np.array([x for x, _ in members
                         if check_fixed(report.gain, x, rep.lyap, rep.multipliers, params,
                                        tol=tol, mats=mats)])
        if len(kept) < 3:
            continue
        hull = convex_hull(kept)
        if len(hull) < 3 or polygon_area(hull) <= 1e-12 * max(1.0, np.abs(hull).max()) ** 2:
            continue
        groups.append(HullGroup(report.gain, rep.lyap, rep.multipliers, hull, kept))
    return groups


def _medoid(certs):
    lam = np.array([c.multipliers.as_array() for c in certs])
    dist = np.abs(lam[:, None, :] - lam[None, :, :]).sum(axis=(1, 2))
    return certs[int(np.argmin(dist))]


# --------------------------------------------------------------------------
# validation

@dataclass
class GroupValidation:
    n_probe: int
    n_pass: int
    worst_margin: float
    failures: list              # [(setpoint, margins)]

    @property
    def pass_fraction(self):
        return self.n_pass / self.n_probe if self.n_probe else 0.0

    def to_json(self):
        return {
            "n_probe": self.n_probe,
            "pass_fraction": self.pass_fraction,
            "worst_margin": self.worst_margin,
            "failures": [{"setpoint": np.asarray(x).tolist(), "margins": list(map(float, m))}
                         for x, m in self.failures],
        }


def sample_in_polygon(vertices, n, rng):
    """Uniform points in a convex polygon by bounding-box rejection."""
    v = np.asarray(vertices, dtype=float)
    lo, hi = v.min(axis=0), v.max(axis=0)
    out = []
    while len(out) < n:
        batch = rng.uniform(lo, hi, size=(max(2 * (n - len(out)), 16), 2))
        out.extend(p for p in batch if polygon_contains(v, p))
    return np.array(out[:n])


def validate_points(group: HullGroup, points, params: InverterParams,
                    check_fixed=check_achievable_fixed, tol=DEFAULT_TOL) -> GroupValidation:
    mats = build_matrices(params)
    n_pass, worst, failures = 0, np.inf, []
    for x in np.asarray(points, dtype=float):
        res = check_fixed(group.gain, x, group.lyap, group.multipliers, params,
                          tol=tol, mats=mats)
        worst = min(worst, min(res.margins))
        if res.ok:
            n_pass += 1
        else:
            failures.append((x, res.margins))
    return GroupValidation(len(points), n_pass, float(worst), failures)


def validate_group(group: HullGroup, n_probe, params: InverterParams, seed=0,
                   check_fixed=check_achievable_fixed, tol=DEFAULT_TOL) -> GroupValidation:
    """Probe ``n_probe`` uniform points of the polygon with the fixed-multiplier test."""
    if n_probe <= 0:
        raise ValueError("n_probe must be > 0")
    pts = sample_in_polygon(group.vertices, n_probe, np.random.default_rng(seed))
    return validate_points(group, pts, params, check_fixed=check_fixed, tol=tol)


def build_region(gain, samples, params: InverterParams, n_probe=200, seed=0,
                 lambda_quantum=None, check=check_achievable,
                 check_fixed=check_achievable_fixed, tol=DEFAULT_TOL):
    """Rate, hull groups and their validation in one report."""
    report = achievability_rate(gain, samples, params, check=check, tol=tol)
    report.groups = group_hulls(report, params, lambda_quantum, check_fixed=check_fixed, tol=tol)
    report.validations = [
        validate_group(g, n_probe, params, seed=seed + i, check_fixed=check_fixed, tol=tol)
        for i, g in enumerate(report.groups)]
    return report


# --------------------------------------------------------------------------
# multi-gain cover

@dataclass
class CoverReport:
    setpoints: np.ndarray
    selected: list              # [(gain, RegionReport)] in selection order
    coverage_history: list      # covered fraction after each selected gain
    uncovered: np.ndarray       # indices into setpoints
    uncovered_synthesis: dict = field(default_factory=dict)  # index -> gain or None

    @property
    def covered_fraction(self):
        return self.coverage_history[-1] if self.coverage_history else 0.0

    def to_json(self):
        return {
            "n_samples": len(self.setpoints),
            "covered_fraction": self.covered_fraction,
            "coverage_history": self.coverage_history,
            "gains": [{"gain": np.asarray(k).reshape(-1).tolist(), "rate": rep.rate,
                       "certified": rep.achievable_mask.nonzero()[0].tolist()}
                      for k, rep in self.selected],
            "uncovered": [{"index": int(i), "p": float(self.setpoints[i, 0]),
                           "q": float(self.setpoints[i, 1]),
                           "synthesized_gain": (None if self.uncovered_synthesis.get(int(i)) is None
                                                else np.asarray(self.uncovered_synthesis[int(i)])
                                                .reshape(-1).tolist())}
                          for i in self.uncovered],
        }


def greedy_cover(samples, params: InverterParams, candidate_gains, max_gains=10,
                 check=check_achievable, synthesis: SearchConfig | None = None, seed=0,
                 tol=DEFAULT_TOL) -> CoverReport:
    """Greedy set cover of the samples by candidate gains.

    Leftover samples are retried with :func:`synthesize_gain` when
    ``synthesis`` is given, recording whether any gain certifies them.
    """
    if not len(candidate_gains):
        raise ValueError("candidate_gains must be nonempty")
    samples = np.asarray(samples, dtype=float)
    reports = [achievability_rate(k, samples, params, check=check, tol=tol)
               for k in candidate_gains]
    masks = [r.achievable_mask for r in reports]
    covered = np.zeros(len(samples), dtype=bool)
    selected, history, used = [], [], set()

    while len(selected) < max_gains:
        gains_new = [(-1 if i in used else int((m & ~covered).sum())) for i, m in enumerate(masks)]
        i = int(np.argmax(gains_new))
        if gains_new[i] <= 0:
            break
        used.add(i)
        covered |= masks[i]
        selected.append((np.asarray(candidate_gains[i], dtype=float), reports[i]))
        history.append(float(covered.mean()))

    uncovered = np.nonzero(~covered)[0]
    synth = {}
    if synthesis is not None:
        for j, idx in enumerate(uncovered):
            try:
                k, _ = synthesize_gain(samples[idx], params, synthesis, seed=seed + j, tol=tol)
                synth[int(idx)] = k
            except NoFeasibleGain:
                synth[int(idx)] = None
    return CoverReport(samples, selected, history, uncovered, synth)


def default_cover_candidates(samples, params: InverterParams, best_gain, n_far=20,
                             search: SearchConfig = SearchConfig(), seed=0,
                             check=check_achievable, tol=DEFAULT_TOL):
    """Best swept gain plus gains synthesised at the farthest uncovered samples.

    Distance is Euclidean in (W, Var) to the nearest sample certified by
    ``best_gain``; with nothing covered, distance to the sample centroid.
    """
    samples = np.asarray(samples, dtype=float)
    base = achievability_rate(best_gain, samples, params, check=check, tol=tol)
    ok = base.achievable_mask
    cand = [np.asarray(best_gain, dtype=float)]
    if ok.all():
        return cand
    anchor = samples[ok] if ok.any() else samples.mean(axis=0, keepdims=True)
    idx = np.nonzero(~ok)[0]
    d = np.min(np.linalg.norm(samples[idx, None, :] - anchor[None, :, :], axis=2), axis=1)
    for j, i in enumerate(idx[np.argsort(-d, kind="stable")][:n_far]):
        try:
            k, _ = synthesize_gain(samples[i], params, search, seed=seed + j, tol=tol)
            cand.append(k)
        except NoFeasibleGain:
            pass
    return cand


def certifiable_mask(samples, params: InverterParams, search: SearchConfig, seed=0,
                     tol=DEFAULT_TOL):
    """Per-sample result of :func:`synthesize_gain` (True when any gain is found)."""
    out = []
    for j, x in enumerate(np.asarray(samples, dtype=float)):
        try:
            synthesize_gain(x, params, search, seed=seed + j, tol=tol)
            out.append(True)
        except NoFeasibleGain:
            out.append(False)
    return np.array(out, dtype=bool)
