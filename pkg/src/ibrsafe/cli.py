"""``ibrsafe`` command-line tool.

Exit codes: 0 success, 2 analysis completed with a negative answer
(unachievable, counterexample found, constraints violated), 1 usage or
configuration error, 3 numeric failure. Messages go to stderr; reports go to
stdout or to files under the configured output directory.
"""

import argparse
import csv
import json
import os
import sys

import numpy as np

from .certify import (check_achievable, implication_counterexample,
                      invariance_counterexample, is_hurwitz)
from .config import load_config
from .errors import (ConfigError, NoStabilizingGain, NotAchievable, NumericFailure)
from .model import REFERENCE_GAIN, build_matrices
from .quadforms import forms_json
from .region import (build_region, default_cover_candidates, greedy_cover,
                     optimize_gain, sample_setpoints)
from .sim import (LqrWeights, hold_scenario, integrate, monitor, ride_through_scenario,
                  settling_metrics, write_violations_json)

EXIT_OK, EXIT_USAGE, EXIT_NEGATIVE, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _floats(text, n, what):
    try:
        vals = [float(v) for v in text.replace(";", ",").split(",")]
    except ValueError:
        raise UsageError(f"{what}: expected {n} comma-separated numbers, got {text!r}")
    if len(vals) != n or not np.all(np.isfinite(vals)):
        raise UsageError(f"{what}: expected {n} finite numbers, got {text!r}")
    return np.array(vals)


def parse_gain(text):
    """``reference`` or four numbers ``k11,k12,k21,k22`` (row-major)."""
    if text == "reference":
        return REFERENCE_GAIN.copy()
    return _floats(text, 4, "--gain").reshape(2, 2)


def parse_setpoint(text):
    return _floats(text, 2, "--setpoint")


def _dumps(obj):
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


class Outputs:
    """Writes confined to one directory."""

    def __init__(self, root):
        self.root = os.path.abspath(root)

    def path(self, name):
        p = os.path.abspath(os.path.join(self.root, name))
        if os.path.commonpath([p, self.root]) != self.root:
            raise UsageError(f"refusing to write outside {self.root}: {name}")
        os.makedirs(os.path.dirname(p), exist_ok=True)
        return p

    def write_json(self, name, obj):
        p = self.path(name)
        with open(p, "w") as fh:
            fh.write(_dumps(obj))
        return p


# --------------------------------------------------------------------------
# subcommands

def cmd_certify(args, cfg, out):
    gain, sp = parse_gain(args.gain), parse_setpoint(args.setpoint)
    try:
        cert = check_achievable(gain, sp, cfg.params, tol=cfg.tol)
    except NotAchievable as exc:
        print(_dumps({"achievable": False, "stage": exc.stage, "detail": exc.detail,
                      "gain": gain.tolist(), "setpoint": sp.tolist()}), end="")
        print(f"not achievable: {exc.stage} ({exc.detail})", file=sys.stderr)
        return EXIT_NEGATIVE
    data = {"achievable": True, **cert.to_json()}
    print(_dumps(data), end="")
    return EXIT_OK


def cmd_gain_search(args, cfg, out):
    gs = cfg.gain_search
    samples = sample_setpoints(cfg.grid)
    extra = [REFERENCE_GAIN] if gs["include_reference_gain"] else []
    try:
        best, report, trace = optimize_gain(gs["k_box"], gs["n_gain_samples"], samples,
                                            cfg.params, seed=gs["seed"], extra_candidates=extra,
                                            tol=cfg.tol)
    except NoStabilizingGain as exc:
        print(str(exc), file=sys.stderr)
        return EXIT_NEGATIVE
    with open(out.path("gain_trace.csv"), "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["k11", "k12", "k21", "k22", "hurwitz", "rate"])
        for tr in trace:
            w.writerow([repr(float(v)) for v in tr.gain.reshape(-1)]
                       + [int(tr.hurwitz), repr(float(tr.rate))])
    n_hurwitz = sum(tr.hurwitz for tr in trace)
    summary = {"n_gains": len(trace), "n_hurwitz": n_hurwitz, "best_gain": best.tolist(),
               "best_rate": report.rate, "failure_counts": report.reason_counts()}
    out.write_json("gain_search.json", summary)
    print(_dumps(summary), end="")
    return EXIT_OK if report.rate > 0 else EXIT_NEGATIVE


def cmd_region(args, cfg, out):
    gain = parse_gain(args.gain)
    samples = sample_setpoints(cfg.grid)
    r = cfg.region
    report = build_region(gain, samples, cfg.params, n_probe=r["n_probe"], seed=r["seed"],
                          lambda_quantum=r["lambda_quantum"], tol=cfg.tol)
    path = out.write_json("region.json", report.to_json())
    print(f"rate {report.rate:.4f}, {len(report.groups)} groups -> {path}", file=sys.stderr)
    return EXIT_OK if report.rate > 0 else EXIT_NEGATIVE


def cmd_cover(args, cfg, out):
    samples = sample_setpoints(cfg.grid)
    c = cfg.cover
    cand = default_cover_candidates(samples, cfg.params, parse_gain(args.gain), n_far=c["n_far"],
                                    search=cfg.synthesis, seed=cfg.synthesis_seed, tol=cfg.tol)
    report = greedy_cover(samples, cfg.params, cand, max_gains=c["max_gains"],
                          synthesis=cfg.synthesis if args.synthesize_uncovered else None,
                          seed=c["seed"], tol=cfg.tol)
    data = report.to_json()
    data["n_candidates"] = len(cand)
    path = out.write_json("cover.json", data)
    print(f"covered {report.covered_fraction:.4f} with {len(report.selected)} gains -> {path}",
          file=sys.stderr)
    return EXIT_OK if report.covered_fraction > 0 else EXIT_NEGATIVE


def cmd_simulate(args, cfg, out):
    s = cfg.simulation
    seed = s["seed"] if args.seed is None else args.seed
    if args.controller == "lqr":
        controller = LqrWeights(s["lqr_q"], s["lqr_r"])
    else:
        controller = parse_gain(args.gain)
    if args.scenario == "ride-through":
        scen = ride_through_scenario(cfg.params, controller, seed=seed, dt=s["dt"], hold=s["hold"])
    else:
        if args.setpoint is None:
            raise UsageError("--scenario hold needs --setpoint")
        scen = hold_scenario(cfg.params, controller, parse_setpoint(args.setpoint),
                             duration=s["duration"], seed=seed, dt=s["dt"], hold=s["hold"])
    traj = integrate(scen, cfg.params)
    summary = monitor(traj, cfg.params)
    prefix = f"{args.scenario}_{args.controller}_seed{seed}"
    traj.write_csv(out.path(prefix + "_trajectory.csv"))
    segments = [m.to_json() for m in settling_metrics(traj, scen.setpoint_schedule, args.band)]
    write_violations_json(summary, out.path(prefix + "_violations.json"),
                          extra={"gain": traj.gain.tolist(), "segments": segments})
    print(f"{summary.total} violating samples -> {out.path(prefix + '_trajectory.csv')}",
          file=sys.stderr)
    return EXIT_OK if summary.total == 0 else EXIT_NEGATIVE


def cmd_oracle(args, cfg, out):
    gain, sp = parse_gain(args.gain), parse_setpoint(args.setpoint)
    o = cfg.oracle
    kw = dict(n_samples=o["n_samples"], pq_range=o["pq_range"], seed=o["seed"])
    result = {"gain": gain.tolist(), "setpoint": sp.tolist(),
              "hurwitz": bool(is_hurwitz(build_matrices(cfg.params), gain, cfg.tol)[0])}
    found = False
    if args.kind in ("implication", "both"):
        z = implication_counterexample(gain, sp, cfg.params, **kw)
        result["implication_counterexample"] = None if z is None else np.asarray(z).tolist()
        found |= z is not None
    if args.kind in ("invariance", "both"):
        x = invariance_counterexample(gain, sp, cfg.params, **kw)
        result["invariance_counterexample"] = None if x is None else np.asarray(x).tolist()
        found |= x is not None
    print(_dumps(result), end="")
    return EXIT_NEGATIVE if found else EXIT_OK


def cmd_dump_forms(args, cfg, out):
    data = forms_json(build_matrices(cfg.params), parse_gain(args.gain),
                      parse_setpoint(args.setpoint), cfg.params)
    print(_dumps(data), end="")
    return EXIT_OK


def build_parser():
    p = _Parser(prog="ibrsafe", description=__doc__.split("\n")[0])
    p.add_argument("--config", help="YAML config (default: shipped sample)")
    p.add_argument("--out-dir", help="override output_dir from the config")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def with_gain(sp, required=False):
        sp.add_argument("--gain", default=None if required else "reference", required=required,
                        help="'reference' or k11,k12,k21,k22")

    c = sub.add_parser("certify", help="check one (gain, setpoint) pair")
    with_gain(c, required=True)
    c.add_argument("--setpoint", required=True, help="p,q in W,Var")
    c.set_defaults(func=cmd_certify)

    c = sub.add_parser("gain-search", help="Monte Carlo gain sweep")
    c.set_defaults(func=cmd_gain_search)

    c = sub.add_parser("region", help="achievable region of one gain")
    with_gain(c)
    c.set_defaults(func=cmd_region)

    c = sub.add_parser("cover", help="greedy multi-gain cover")
    with_gain(c)
    c.add_argument("--synthesize-uncovered", action="store_true",
                   help="retry leftover samples with gain synthesis")
    c.set_defaults(func=cmd_cover)

    c = sub.add_parser("simulate", help="time-domain run with constraint monitor")
    c.add_argument("--scenario", required=True, choices=("ride-through", "hold"))
    c.add_argument("--controller", choices=("gain", "lqr"), default="gain")
    with_gain(c)
    c.add_argument("--setpoint", help="p,q for the hold scenario")
    c.add_argument("--seed", type=int, help="jitter seed (default from config)")
    c.add_argument("--band", type=float, default=0.02, help="settling band fraction")
    c.set_defaults(func=cmd_simulate)

    c = sub.add_parser("oracle", help="sampling counterexample search")
    with_gain(c, required=True)
    c.add_argument("--setpoint", required=True)
    c.add_argument("--kind", choices=("implication", "invariance", "both"), default="both")
    c.set_defaults(func=cmd_oracle)

    c = sub.add_parser("dump-forms", help="print every quadratic form as JSON")
    with_gain(c, required=True)
    c.add_argument("--setpoint", required=True)
    c.set_defaults(func=cmd_dump_forms)
    return p


def run(argv=None):
    try:
        args = build_parser().parse_args(argv)
        cfg = load_config(args.config)
        out = Outputs(args.out_dir if args.out_dir else cfg.output_dir)
        return args.func(args, cfg, out)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except ConfigError as exc:
        for prob in exc.problems:
            print(f"config error: {prob}", file=sys.stderr)
        return EXIT_USAGE
    except NumericFailure as exc:
        print(f"numeric failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as exc:
        print(f"invalid input: {exc}", file=sys.stderr)
        return EXIT_USAGE


def main():
    sys.exit(run())
