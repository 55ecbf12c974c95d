"""Penalty terms and the bounded reward R = 1/(1 + P).

All arithmetic is in SI (meters, radians); the weights absorb scale.
With the shipped defaults one millimeter of path-average excursion past
the envelope band costs P_env = 1.

The same R doubles as the extremum-seeking objective V(o(t)).
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .kv import EnvelopeTrajectory, InfeasibleTrajectoryError


@dataclass(frozen=True)
class RewardConfig:
    """Weights and radii for the penalty composition.

    r_band and r_tt_sq are derived from r_max (half the radius, half the
    squared radius) so the invariants hold exactly by construction.
    """

    r_max: float = 0.0254
    w_e: float = 1000.0
    w_s: float = 10.0
    w_r: float = 100.0
    w_w: float = 100.0
    w_t: float = 100.0
    failure_penalty: float = 99.0

    def __post_init__(self) -> None:
        if self.r_max <= 0.0:
            raise ValueError("r_max must be positive")
        for name in ("w_e", "w_s", "w_r", "w_w", "w_t"):
            if getattr(self, name) < 0.0:
                raise ValueError(f"{name} must be nonnegative")
        if self.failure_penalty < 0.0:
            raise ValueError("failure_penalty must be nonnegative")
        if self.failure_penalty == 0.0:
            warnings.warn(
                "failure_penalty = 0 makes failure as good as a perfect run",
                stacklevel=2,
            )

    @property
    def r_band(self) -> float:
        return self.r_max / 2.0

    @property
    def r_tt_sq(self) -> float:
        return self.r_max**2 / 2.0


@dataclass(frozen=True)
class RewardBreakdown:
    P_env: float
    P_smooth: float
    P_term: float
    P_total: float
    R: float

    def as_dict(self) -> dict:
        return {
            "P_env": self.P_env,
            "P_smooth": self.P_smooth,
            "P_term": self.P_term,
            "P_total": self.P_total,
            "R": self.R,
        }


def path_averages(traj: EnvelopeTrajectory) -> tuple[float, float, float, float]:
    """(mean X, mean Y, mean X'^2, mean Y'^2) over the n observation nodes."""
    if not traj.feasible:
        raise InfeasibleTrajectoryError("path averages need a feasible trajectory")
    n = traj.n_obs
    return (
        float(np.mean(traj.X[:n])),
        float(np.mean(traj.Y[:n])),
        float(np.mean(traj.Xp[:n] ** 2)),
        float(np.mean(traj.Yp[:n] ** 2)),
    )


def penalty(traj: EnvelopeTrajectory, cfg: RewardConfig) -> RewardBreakdown:
    """Envelope + smoothness + terminal penalties and the bounded reward."""
    if not traj.feasible:
        raise InfeasibleTrajectoryError("penalty needs a feasible trajectory")
    xbar, ybar, xp2, yp2 = path_averages(traj)

    p_env = cfg.w_e * (max(0.0, xbar - cfg.r_band) + max(0.0, ybar - cfg.r_band))
    p_smooth = cfg.w_s * (xp2 + yp2)

    x_end = float(traj.X[-1])
    y_end = float(traj.Y[-1])
    xp_end = float(traj.Xp[-1])
    yp_end = float(traj.Yp[-1])
    p_term = (
        cfg.w_r * abs(x_end - y_end)
        + cfg.w_w * (abs(xp_end) + abs(yp_end))
        + cfg.w_t * abs(x_end**2 + y_end**2 - cfg.r_tt_sq)
    )

    p_total = p_env + p_smooth + p_term
    return RewardBreakdown(
        P_env=p_env,
        P_smooth=p_smooth,
        P_term=p_term,
        P_total=p_total,
        R=1.0 / (1.0 + p_total),
    )


def failure_reward(cfg: RewardConfig) -> float:
    """Episode-terminating reward for infeasible integrations."""
    return 1.0 / (1.0 + cfg.failure_penalty)
