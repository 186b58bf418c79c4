"""Equilibrium solver for finite-type dynamic games with private information.

Computes stationary belief-based equilibria (structured perfect Bayesian
equilibria): prescriptions that depend on public history only through a
common product belief over private types and on private history only through
the current own type. Provides the belief update, per-belief stage solving,
finite-horizon backward recursion, infinite-horizon fixed-point iteration,
an empirical equilibrium verifier, and a trajectory simulator.
"""
from .belief import (
    EPS_DENOM,
    Prescription,
    ProductBelief,
    forward_beliefs,
    push_forward,
    update_joint,
    update_marginal,
)
from .game import (
    GameSpec,
    SpecFormatError,
    SpecValidationError,
    flatten_profile,
    load_spec,
    make_spec,
    public_goods_spec,
    save_spec,
    unflatten_profile,
    validate_spec,
)
from .grid import BeliefGrid, PolicyGrid, ValueTable
from .stage import (
    GridNonConvergence,
    SolverConfig,
    StageFixedPointReport,
    action_values,
    best_response,
    solve_stage_grid,
    stage_fixed_point,
)
from .finite_horizon import FinitePolicy, FiniteHorizonSolution, backward_solve, finite_policy
from .infinite_horizon import SolveReport, interpolate_value, residual, solve_fixed_point
from .simulator import (
    Trajectory,
    belief_lattice,
    coordination_benchmarks,
    markov_chain_ensemble,
    sample_trajectory,
)
from .verifier import (
    DeviationReport,
    EnumerationTooLarge,
    GridPolicy,
    deviation_gap_mc,
    lemma4_check,
    reward_to_go_exact,
    run_deviation_suite,
)

__version__ = "0.1.0"
