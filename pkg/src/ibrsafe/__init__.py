"""Certified setpoint achievability for grid-connected inverters under direct power control."""

from .certify import (AchievabilityCertificate, Multipliers, SearchConfig, Tolerances,
                      check_achievable, check_achievable_fixed, implication_counterexample,
                      invariance_counterexample, is_hurwitz, pencil_feasible, solve_lyapunov,
                      synthesize_gain)
from .errors import (ConfigError, IbrError, Infeasible, NonFiniteState, NotAchievable,
                     NotHurwitz, NumericFailure)
from .model import REFERENCE_GAIN, DEFAULT_PARAMS, InverterParams, build_matrices, control_law
from .quadforms import Pencil, QuadraticForm, assemble_pencils
from .region import (SetpointGrid, achievability_rate, build_region, greedy_cover,
                     optimize_gain, sample_setpoints)
from .sim import (Scenario, integrate, lqr_gain, monitor, ride_through_scenario,
                  settling_metrics)

__version__ = "0.1.0"
