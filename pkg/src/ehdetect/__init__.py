"""Adaptive transmit-power design for energy-harvesting detection networks."""

from .battery import BatteryChain, build_chain, clipped_poisson, interval_probs
from .errors import ChainError, ConfigError, InfeasibleError, NumericalError
from .metrics import (analytic_error_prob, avg_j_interval, clt_error_prob, evaluate_policy,
                      moment_match, z_moments, z_pdf)
from .model import (EnergyModel, LocalDetector, NetworkConfig, Policy, SensorParams,
                    derive_local_detector, load_config)
from .optimize import (GridSpace, GridSpec, Problem, RrsParams, exploration_count, grid_search,
                       hybrid_solve, mmae_thresholds, moe_thresholds, rrs_solve, solve_p1)
from .simulate import empirical_battery_check, run_monte_carlo

__version__ = "0.1.0"
