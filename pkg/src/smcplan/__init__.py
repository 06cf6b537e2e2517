"""Sequential Monte-Carlo planning for tabular reinforcement learning.

Particle-filter planning with trust-region tilted proposals, terminal
state revival, per-atom ancestor backups, and search-based value
targets, trained in an outer expectation-maximization loop and verified
against exact enumeration oracles.
"""

from .backups import (
    accumulate_ancestor_q,
    message_passing_policy,
    mix_value_target,
    retrace_root_value,
)
from .errors import (
    BudgetError,
    ConfigError,
    ContractError,
    DegenerateWeightsError,
    NumericalError,
    SupportError,
)
from .harness import ExperimentConfig, bootstrap_ci, load_config, run
from .mdp import (
    TabularMdp,
    Trajectory,
    builtin_mdp,
    enumerate_trajectories,
    load_mdp,
    make_absorbing_zero,
    make_chain,
    make_gridworld,
    make_two_arm,
    mdp_from_dict,
    mdp_to_dict,
    step,
)
from .oracle import (
    SoftSolution,
    elbo_and_gap,
    exact_posterior_trajectories,
    optimal_policy,
    policy_value,
    posterior_policy_stages,
    root_action_marginal,
    soft_value_iteration,
)
from .planner import (
    ParticleSet,
    PlannerConfig,
    PlannerOutput,
    advance,
    dirac_policy,
    init_particles,
    multinomial_resample,
    run_planner,
    weight_update,
)
from .training import (
    LossConfig,
    Model,
    ReplayBuffer,
    TrainConfig,
    TransitionRecord,
    collect_segment,
    grad,
    load_checkpoint,
    loss,
    outer_targets,
    save_checkpoint,
    sgd_step,
    train,
)
from .trust_region import (
    TrustRegionSolution,
    adaptive_epsilon,
    greedy_row,
    solve_trust_region,
    solve_trust_region_sampled,
)

__version__ = "0.1.0"
