"""Balanced actor initialization and a desk-scale PPO-RLHF lab."""

__version__ = "0.1.0"
