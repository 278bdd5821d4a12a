from .ppo import PPOConfig, StepMetrics, Trajectory, compute_gae, ppo_update, train_rlhf
from .reward import pairwise_accuracy, train_reward_model
from .supervised import SFTConfig, train_supervised

__all__ = [
    "PPOConfig",
    "SFTConfig",
    "StepMetrics",
    "Trajectory",
    "compute_gae",
    "pairwise_accuracy",
    "ppo_update",
    "train_reward_model",
    "train_rlhf",
    "train_supervised",
]
