"""PPO with a growing, smoothly squashed action range, plus numerical checks of its analysis."""

__version__ = "0.1.0"

from .envs import EnvKind, EnvSpec, EnvState, env_reset, env_step, observe, reward_eval
from .errors import ConfigError, GPOError, NonFiniteInput, NumericalError, PreconditionError, SaturationError
from .growth import GrowthSchedule, ScheduleKind, schedule_value, squash, squash_jacobian, unsquash
from .policy import PolicyParams, init_policy, latent_log_prob, score_gradient, transformed_log_prob
from .theory import BoundReport, QuadraticModel, TheoryConfig, run_suite
from .trainer import RolloutBatch, TrainerConfig, collect_rollout, compute_gae, ppo_update, train_loop

__all__ = [
    "BoundReport",
    "ConfigError",
    "EnvKind",
    "EnvSpec",
    "EnvState",
    "GPOError",
    "GrowthSchedule",
    "NonFiniteInput",
    "NumericalError",
    "PolicyParams",
    "PreconditionError",
    "QuadraticModel",
    "RolloutBatch",
    "SaturationError",
    "ScheduleKind",
    "TheoryConfig",
    "TrainerConfig",
    "collect_rollout",
    "compute_gae",
    "env_reset",
    "env_step",
    "init_policy",
    "latent_log_prob",
    "observe",
    "ppo_update",
    "reward_eval",
    "run_suite",
    "schedule_value",
    "score_gradient",
    "squash",
    "squash_jacobian",
    "train_loop",
    "transformed_log_prob",
    "unsquash",
]
