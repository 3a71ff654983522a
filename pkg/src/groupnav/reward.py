"""Trajectory rewards and the step-level progress coefficient."""

from __future__ import annotations

import math
from dataclasses import dataclass


@dataclass(frozen=True)
class RewardConfig:
    epsilon: float = 3.0
    alpha: float = 0.25

    def __post_init__(self):
        if not self.epsilon > 0:
            raise ValueError(f"epsilon must be positive, got {self.epsilon}")
        if not self.alpha >= 0:
            raise ValueError(f"alpha must be non-negative, got {self.alpha}")


def nav_success_reward(d_k: float, epsilon: float) -> float:
    # strict: d_k == epsilon earns nothing
    if d_k < epsilon:
        return math.exp(-(d_k * d_k) / (2.0 * epsilon * epsilon))
    return 0.0


def path_efficiency_reward(L_k: float, L_star: float) -> float:
    return -max(L_k - L_star, 0.0) / L_star


def trajectory_reward(d_k: float, L_k: float, L_star: float, cfg: RewardConfig) -> float:
    return nav_success_reward(d_k, cfg.epsilon) + cfg.alpha * path_efficiency_reward(L_k, L_star)


def progress_coefficient(d_prev: float, d_curr: float, L_star: float, advantage_sign: float) -> float:
    """Scale for one step's advantage: >1 when the step agrees with the advantage's direction."""
    sign = (advantage_sign > 0) - (advantage_sign < 0)
    return 1.0 + sign * (d_prev - d_curr) / L_star
