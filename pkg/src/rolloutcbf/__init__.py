"""Safety filtering for second-order systems via a rollout-defined
control barrier function, velocity box constraints, and an exact one-step
input filter, with a fixed-wing UAV demonstration scenario."""

from .errors import (
    AssumptionViolationError,
    ConfigError,
    ContractViolationError,
    DomainError,
    EpsilonTooLargeError,
    RolloutError,
    SafetyModelError,
    SimAbort,
    SingularChannelError,
    TieError,
)
from .evading import (
    EvadingConfig,
    boundary_decay,
    closed_loop_field,
    evade_constrained,
    evade_unconstrained,
    evading_input,
    greedy_input_oracle,
    modified_evading_input,
)
from .model import (
    ConstraintSet,
    RD2Constraint,
    SystemModel,
    d_coeffs,
    eval_dynamics,
    modified_input,
    mu_nu,
    rd1_value,
    rd1_values,
    rd2_derivatives,
    smooth_input_cap,
)
from .safety_filter import (
    FilterConfig,
    FilterResult,
    Membership,
    baseline_filter,
    discrete_step,
    membership,
    solve_filter,
)
from .zcbf import (
    H_dot,
    ZcbfConfig,
    ZcbfEvaluation,
    eval_H,
    evaluate,
    grad_H,
    rollout_flow,
    zcbf_margin,
)

__version__ = "0.1.0"

__all__ = [name for name in dir() if not name.startswith("_")]
