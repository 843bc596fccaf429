"""Discrete-time laboratory for mean-field Dynkin games and doubly reflected BSDEs with jumps."""

__version__ = "0.1.0"

from .chaos import ChaosReport, chaos_gap_experiment, iid_copies, lln_experiment, reference_solution
from .coefficients import (CoefficientSet, InsuranceScenario, Lipschitz, ValidationReport,
                           make_insurance_scenario, validate_assumptions)
from .drbsde import (DRBSDESolution, EstimateParams, backward, check_apriori_estimate,
                     check_k_bound, solve_frozen)
from .errors import (BackendUnsupported, ConfigError, EmptySample, ImplicitDiverge, InvalidGrid,
                     InvalidIntensity, InvalidParam, InvalidTerminal, LengthMismatch, MFDynkinError,
                     NoConvergence, ObstacleCross, SingularRegression, TooLarge)
from .game import (GameResult, SaddleReport, StoppingRule, brute_force_values, extract_saddle,
                   payoff, verify_saddle, verify_saddle_paths)
from .lattice import (JumpSpec, PathEnsemble, TimeGrid, TreeLattice, build_tree, conditional_expectation,
                      joint_tree, sample_paths)
from .meanfield import (FixedPointConfig, MeanFieldSolution, check_chaos_condition,
                        check_contraction_condition, fixed_point, mean_field_value_and_saddle)
from .measures import Measure, MeasureFlow, check_coupling_inequality, wasserstein_p, wasserstein_pp
from .particles import (ParticleSystemSolution, exchangeability_check, joint_tree_oracle,
                        particle_saddles, solve_particle_system)
from .scenarios import get_scenario, list_scenarios, make_scenario, register_scenario
