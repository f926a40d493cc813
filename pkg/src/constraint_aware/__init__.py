"""Constraint-aware compliant manipulation: simulator, PPO trainer and harness."""

__version__ = "0.1.0"
