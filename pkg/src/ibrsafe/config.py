"""YAML configuration for the command-line tool.

Every section and key is optional; missing values take the defaults below.
Unknown keys are errors. All problems are collected and raised together.

    params:       r_filter, l_filter, freq, omega, v_g_min, v_g_max,
                  u_out_min, u_out_max, pf_min            (defaults below)
    grid:         p_min, p_max, q_min, q_max, n_samples, seed
    gain_search:  k_box [lo, hi], n_gain_samples, seed, include_reference_gain
    synthesis:    k_box, n_starts, refine_steps, min_step, seed
    region:       n_probe, seed, lambda_quantum
    cover:        max_gains, n_far, seed
    simulation:   dt, hold, duration, seed, lqr_q, lqr_r
    oracle:       n_samples, pq_range [[p_lo, p_hi], [q_lo, q_hi]], seed
    tolerances:   psd_rel, hurwitz, lambda_max, lambda_start, expand, width_rel
    output_dir:   directory for all written files (relative to the config file)
"""

import copy
import os
from dataclasses import dataclass, fields
from importlib import resources

import numpy as np
import yaml

from .certify import DEFAULT_PQ_RANGE, SearchConfig, Tolerances
from .errors import ConfigError
from .model import DEFAULT_PARAMS, InverterParams
from .region import SetpointGrid

SAMPLE_CONFIG = "defaults.yaml"

DEFAULTS = {
    "params": {f.name: getattr(DEFAULT_PARAMS, f.name) for f in fields(InverterParams)},
    "grid": {f.name: f.default for f in fields(SetpointGrid)},
    "gain_search": {"k_box": [-0.5, 0.5], "n_gain_samples": 1000, "seed": 0,
                    "include_reference_gain": True},
    "synthesis": {"k_box": [-0.5, 0.5], "n_starts": 1000, "refine_steps": 200,
                  "min_step": 1e-6, "seed": 0},
    "region": {"n_probe": 200, "seed": 0, "lambda_quantum": None},
    "cover": {"max_gains": 10, "n_far": 20, "seed": 0},
    "simulation": {"dt": 1e-4, "hold": 0.01, "duration": 10.0, "seed": 0,
                   "lqr_q": [[1.0, 0.0], [0.0, 1.0]], "lqr_r": [[1e-4, 0.0], [0.0, 1e-4]]},
    "oracle": {"n_samples": 100_000, "pq_range": [list(r) for r in DEFAULT_PQ_RANGE], "seed": 0},
    "tolerances": {f.name: f.default for f in fields(Tolerances)},
    "output_dir": "out",
}


@dataclass(frozen=True)
class ToolConfig:
    params: InverterParams
    grid: SetpointGrid
    gain_search: dict
    synthesis: SearchConfig
    synthesis_seed: int
    region: dict
    cover: dict
    simulation: dict
    oracle: dict
    tol: Tolerances
    output_dir: str


def sample_config_path():
    return str(resources.files("ibrsafe") / "data" / SAMPLE_CONFIG)


def _merge(raw, problems):
    if raw is None:
        raw = {}
    if not isinstance(raw, dict):
        problems.append("top level must be a mapping")
        return copy.deepcopy(DEFAULTS)
    cfg = copy.deepcopy(DEFAULTS)
    for key, value in raw.items():
        if key not in DEFAULTS:
            problems.append(f"unknown key: {key}")
        elif isinstance(DEFAULTS[key], dict):
            if not isinstance(value, dict):
                problems.append(f"{key}: must be a mapping")
                continue
            for sub, v in value.items():
                if sub not in DEFAULTS[key]:
                    problems.append(f"unknown key: {key}.{sub}")
                else:
                    cfg[key][sub] = v
        else:
            cfg[key] = value
    return cfg


def _number(cfg, section, key, problems, kind=float, positive=False, nonneg=False):
    val = cfg[section][key]
    name = f"{section}.{key}"
    if isinstance(val, str):
        # YAML 1.1 reads exponents without a sign ("1.0e9") as strings
        try:
            val = float(val)
        except ValueError:
            pass
    if isinstance(val, bool) or not isinstance(val, (int, float)):
        problems.append(f"{name}: expected a number, got {val!r}")
        return None
    if kind is int and int(val) != val:
        problems.append(f"{name}: expected an integer")
        return None
    val = kind(val)
    if not np.isfinite(val):
        problems.append(f"{name}: must be finite")
    elif positive and not val > 0:
        problems.append(f"{name}: must be > 0")
    elif nonneg and val < 0:
        problems.append(f"{name}: must be >= 0")
    else:
        return val
    return None


def _interval(cfg, section, key, problems):
    val = cfg[section][key]
    try:
        arr = np.asarray(val, dtype=float)
    except (TypeError, ValueError):
        arr = None
    if arr is None or arr.shape != (2,) or not np.all(np.isfinite(arr)) or not arr[0] < arr[1]:
        problems.append(f"{section}.{key}: expected [lo, hi] with lo < hi")
        return None
    return (float(arr[0]), float(arr[1]))


def _matrix(cfg, section, key, problems, definite):
    try:
        m = np.asarray(cfg[section][key], dtype=float)
    except (TypeError, ValueError):
        m = None
    if m is None or m.shape != (2, 2) or not np.all(np.isfinite(m)) or not np.allclose(m, m.T):
        problems.append(f"{section}.{key}: expected a symmetric 2x2 matrix")
        return None
    ev = np.linalg.eigvalsh(m)
    if (definite and ev.min() <= 0) or ev.min() < 0:
        problems.append(f"{section}.{key}: must be positive {'definite' if definite else 'semidefinite'}")
    return m


def validate(raw, base_dir="."):
    """Turn a parsed mapping into a ToolConfig or raise ConfigError."""
    problems = []
    cfg = _merge(raw, problems)

    pvals = {}
    for f in fields(InverterParams):
        v = cfg["params"][f.name]
        if f.name == "omega" and v is None:
            pvals[f.name] = None
            continue
        pvals[f.name] = _number(cfg, "params", f.name, problems)
    params = None
    if None not in [v for k, v in pvals.items() if k != "omega"]:
        try:
            params = InverterParams(**pvals)
        except ValueError as exc:
            problems.extend("params: " + p for p in str(exc).split(": ", 1)[1].split("; "))

    g = {k: _number(cfg, "grid", k, problems) for k in ("p_min", "p_max", "q_min", "q_max")}
    n_samples = _number(cfg, "grid", "n_samples", problems, int, positive=True)
    grid_seed = _number(cfg, "grid", "seed", problems, int, nonneg=True)
    grid = None
    if None not in g.values():
        if not (g["p_min"] < g["p_max"] and g["q_min"] < g["q_max"]):
            problems.append("grid: need p_min < p_max and q_min < q_max")
        elif n_samples is not None and grid_seed is not None:
            grid = SetpointGrid(g["p_min"], g["p_max"], g["q_min"], g["q_max"], n_samples, grid_seed)

    gs = cfg["gain_search"]
    gain_search = {"k_box": _interval(cfg, "gain_search", "k_box", problems),
                   "n_gain_samples": _number(cfg, "gain_search", "n_gain_samples", problems,
                                             int, nonneg=True),
                   "seed": _number(cfg, "gain_search", "seed", problems, int, nonneg=True),
                   "include_reference_gain": gs["include_reference_gain"]}
    if not isinstance(gs["include_reference_gain"], bool):
        problems.append("gain_search.include_reference_gain: expected true/false")

    synth = None
    box = _interval(cfg, "synthesis", "k_box", problems)
    n_starts = _number(cfg, "synthesis", "n_starts", problems, int, positive=True)
    refine = _number(cfg, "synthesis", "refine_steps", problems, int, nonneg=True)
    min_step = _number(cfg, "synthesis", "min_step", problems, positive=True)
    synth_seed = _number(cfg, "synthesis", "seed", problems, int, nonneg=True)
    if None not in (box, n_starts, refine, min_step):
        synth = SearchConfig(n_starts=n_starts, refine_steps=refine, k_box=box, min_step=min_step)

    region = {"n_probe": _number(cfg, "region", "n_probe", problems, int, positive=True),
              "seed": _number(cfg, "region", "seed", problems, int, nonneg=True),
              "lambda_quantum": None}
    if cfg["region"]["lambda_quantum"] is not None:
        region["lambda_quantum"] = _number(cfg, "region", "lambda_quantum", problems, positive=True)

    cover = {"max_gains": _number(cfg, "cover", "max_gains", problems, int, positive=True),
             "n_far": _number(cfg, "cover", "n_far", problems, int, nonneg=True),
             "seed": _number(cfg, "cover", "seed", problems, int, nonneg=True)}

    simulation = {"dt": _number(cfg, "simulation", "dt", problems, positive=True),
                  "hold": _number(cfg, "simulation", "hold", problems, positive=True),
                  "duration": _number(cfg, "simulation", "duration", problems, nonneg=True),
                  "seed": _number(cfg, "simulation", "seed", problems, int, nonneg=True),
                  "lqr_q": _matrix(cfg, "simulation", "lqr_q", problems, definite=False),
                  "lqr_r": _matrix(cfg, "simulation", "lqr_r", problems, definite=True)}

    oracle = {"n_samples": _number(cfg, "oracle", "n_samples", problems, int, positive=True),
              "seed": _number(cfg, "oracle", "seed", problems, int, nonneg=True),
              "pq_range": None}
    try:
        pq = np.asarray(cfg["oracle"]["pq_range"], dtype=float)
        if pq.shape != (2, 2) or not np.all(pq[:, 0] < pq[:, 1]):
            raise ValueError
        oracle["pq_range"] = (tuple(pq[0]), tuple(pq[1]))
    except (TypeError, ValueError):
        problems.append("oracle.pq_range: expected [[p_lo, p_hi], [q_lo, q_hi]]")

    tvals = {}
    for f in fields(Tolerances):
        tvals[f.name] = _number(cfg, "tolerances", f.name, problems, positive=True)
    tol = None
    if None not in tvals.values():
        if tvals["expand"] <= 1:
            problems.append("tolerances.expand: must be > 1")
        if tvals["lambda_start"] >= tvals["lambda_max"]:
            problems.append("tolerances: need lambda_start < lambda_max")
        tol = Tolerances(**tvals)

    out = cfg["output_dir"]
    if not isinstance(out, str) or not out:
        problems.append("output_dir: expected a nonempty string")
        out = None
    else:
        out = os.path.normpath(os.path.join(base_dir, out))

    if problems:
        raise ConfigError(problems)
    return ToolConfig(params, grid, gain_search, synth, synth_seed, region, cover,
                      simulation, oracle, tol, out)


def load_config(path=None):
    """Read and validate a YAML config; ``None`` loads the shipped sample."""
    path = sample_config_path() if path is None else path
    try:
        with open(path) as fh:
            raw = yaml.safe_load(fh)
    except OSError as exc:
        raise ConfigError([f"cannot read {path}: {exc.strerror}"]) from exc
    except yaml.YAMLError as exc:
        raise ConfigError([f"YAML parse error in {path}: {exc}"]) from exc
    base = os.path.dirname(os.path.abspath(path)) if path != sample_config_path() else os.getcwd()
    return validate(raw, base)
