"""Monte Carlo solver for backward SDEs with jumps and a delayed generator.

The package simulates path-dependent forward jump diffusions, solves the
delayed backward equation by Picard iteration over least-squares Monte
Carlo sweeps, checks the contraction condition on the delay, verifies the
nonlinear Feynman–Kac representation numerically and prices claims for a
large investor whose wealth feeds back into the market.
"""

__version__ = "0.1.0"

from .backward import (BsdeSolution, GeneratorSpec, PolynomialBasis, TerminalSpec, backward_induction,
                       picard_solve, regress_conditional)
from .delay import DelayParams, best_chi, certify, condition_value, contraction_constants
from .errors import (ConfigurationError, DelayBsdeError, DomainError, NonConvergenceError, NumericError,
                     UnsupportedInputError)
from .feynman_kac import AnalyticU, MonteCarloU, SolverConfig, evaluate_u, mild_residual, pide_residual
from .forward import ForwardCoefficients, ForwardEnsemble, flow_check, simulate, simulate_ensemble
from .large_investor import MarketModel, build_driver, hedge_pnl, replicate
from .levy import LevyModel, compensated_increment, nu_integral
from .paths import CadlagPath, Segment, lift_eta, segment, unlift_varphi
from .scenario import Scenario, load_scenario

__all__ = [
    "AnalyticU", "BsdeSolution", "CadlagPath", "ConfigurationError", "DelayBsdeError", "DelayParams",
    "DomainError", "ForwardCoefficients", "ForwardEnsemble", "GeneratorSpec", "LevyModel", "MarketModel",
    "MonteCarloU", "NonConvergenceError", "NumericError", "PolynomialBasis", "Scenario", "Segment",
    "SolverConfig", "TerminalSpec", "UnsupportedInputError", "backward_induction", "best_chi", "build_driver",
    "certify", "compensated_increment", "condition_value", "contraction_constants", "evaluate_u", "flow_check",
    "hedge_pnl", "lift_eta", "load_scenario", "mild_residual", "nu_integral", "picard_solve", "pide_residual",
    "regress_conditional", "replicate", "segment", "simulate", "simulate_ensemble", "unlift_varphi",
]
