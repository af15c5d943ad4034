"""Latent-space MPPI control with group-relative policy optimization under
a KL trust region, on toy continuous-control environments."""

from .autodiff import GradTape, Tensor, backward
from .envs import ENV_REGISTRY, make_env
from .grpo import (
    ConstraintConfig,
    GroupSample,
    PolicyPrior,
    grpo_loss,
    kl_gaussian,
    policy_constraint_loss,
    policy_loss,
    softmax_advantages,
    std_norm_advantages,
    threshold_actions,
    variance_diagnostic,
)
from .nn import MlpParams, OptimizerState, mlp_forward, mlp_init, optimizer_step
from .planner import (
    PlannerConfig,
    PlanDiagnostics,
    ScoredTrajectory,
    TrajectoryDistribution,
    compute_moments,
    estimate_return,
    estimate_returns,
    plan,
)
from .replay import BufferConfig, InsufficientDataError, ReplayBuffer, Transition
from .trainer import (
    AblationFlags,
    MetricsRecord,
    TrainConfig,
    collect,
    evaluate,
    run_training,
    train_step,
)
from .world_model import (
    PolicyDistribution,
    Segment,
    WorldModel,
    WorldModelConfig,
    encode,
    dynamics_step,
    gaussian,
    init_world_model,
    model_loss,
    policy_distribution,
    predict_reward,
    predict_value,
    sample_action,
    update_value_target,
)

__version__ = "0.1.0"
