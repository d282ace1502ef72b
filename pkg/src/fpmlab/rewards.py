"""Reward algebra for the triple-criterion manipulation task.

Distances are normalized by psi(phi, eps) = eps / (phi + eps), then
combined either as the min-scaled mutual reward or the plain weighted
sum baseline, plus a hand-base action penalty and a terminal success
bonus. All functions are pure.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np

from .errors import DomainError


@dataclass(frozen=True)
class RewardWeights:
    w_p: float = 3.0
    w_theta: float = 3.0
    w_j: float = 3.0
    w_ap: float = -0.01
    w_succ: float = 800.0


@dataclass(frozen=True)
class Thresholds:
    pos: float = 0.05
    ori: float = 0.1
    fj: float = 0.2

    def __post_init__(self):
        if self.pos <= 0 or self.ori <= 0 or self.fj <= 0:
            raise DomainError("thresholds must be strictly positive")

    def scaled(self, factor: float) -> "Thresholds":
        return Thresholds(self.pos * factor, self.ori * factor, self.fj * factor)


class RewardMode(Enum):
    MUTUAL = "mutual"
    SUM = "sum"


def normalize(phi: float, eps: float) -> float:
    """psi(phi, eps) = eps / (phi + eps), in (0, 1]."""
    if phi < 0:
        raise DomainError(f"distance must be non-negative, got {phi}")
    if eps <= 0:
        raise DomainError(f"normalizer must be positive, got {eps}")
    return eps / (phi + eps)


def _normalized(phi_p, phi_theta, phi_j, thresholds: Thresholds):
    return (normalize(phi_p, thresholds.pos),
            normalize(phi_theta, thresholds.ori),
            normalize(phi_j, thresholds.fj))


def mutual_distance_reward(phi_p, phi_theta, phi_j, thresholds: Thresholds,
                           weights: RewardWeights) -> float:
    """min(r_p, r_theta, r_j) * (w_p r_p + w_theta r_theta + w_j r_j).

    The min is taken over the unweighted normalized rewards, so progress
    on any single criterion cannot inflate the total while another lags.
    """
    r_p, r_t, r_j = _normalized(phi_p, phi_theta, phi_j, thresholds)
    return min(r_p, r_t, r_j) * (weights.w_p * r_p + weights.w_theta * r_t + weights.w_j * r_j)


def sum_distance_reward(phi_p, phi_theta, phi_j, thresholds: Thresholds,
                        weights: RewardWeights) -> float:
    r_p, r_t, r_j = _normalized(phi_p, phi_theta, phi_j, thresholds)
    return weights.w_p * r_p + weights.w_theta * r_t + weights.w_j * r_j


def action_penalty(base_action) -> float:
    """L2 norm of the hand-base action (dx, dz); the negative weight
    w_ap applies in total_reward."""
    return float(np.linalg.norm(np.asarray(base_action, dtype=np.float64)))


def total_reward(mode: RewardMode, distances, base_action, success: bool,
                 thresholds: Thresholds, weights: RewardWeights) -> float:
    """Distance reward (per mode) + w_ap * ||a_base|| + w_succ on the
    terminal success transition."""
    phi_p, phi_theta, phi_j = distances
    if mode is RewardMode.MUTUAL:
        r = mutual_distance_reward(phi_p, phi_theta, phi_j, thresholds, weights)
    else:
        r = sum_distance_reward(phi_p, phi_theta, phi_j, thresholds, weights)
    r += weights.w_ap * action_penalty(base_action)
    if success:
        r += weights.w_succ
    return r
