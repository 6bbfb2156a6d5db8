"""Scalar bootstrap targets for SAC and TD3-style critics.

``mask`` is the continuation flag (1 while the episode goes on, 0 at a
terminal transition) and ``n`` the number of steps folded into ``reward``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class TargetInputs:
    reward: float
    discount: float
    q_agg: float
    n: int = 1
    mask: float = 1.0
    alpha_ent: float = 0.0
    logp: float = 0.0

    def __post_init__(self):
        if not 0.0 < self.discount <= 1.0:
            raise ValueError(f"discount must lie in (0, 1], got {self.discount}")
        if self.mask not in (0, 1):
            raise ValueError(f"mask must be 0 or 1, got {self.mask}")
        if self.n < 1:
            raise ValueError(f"n must be >= 1, got {self.n}")


def sac_target(t: TargetInputs) -> float:
    return t.reward + t.discount ** t.n * t.mask * (t.q_agg - t.alpha_ent * t.logp)


def td3_target(t: TargetInputs) -> float:
    return t.reward + t.discount ** t.n * t.mask * t.q_agg


def smoothing_noise(rng: np.random.Generator, shape, sigma: float) -> np.ndarray:
    """Target-policy smoothing noise ``N(0, sigma^2)``."""
    return rng.normal(0.0, sigma, size=shape)


def td3_smoothed_action(mu_out, noise, clip: float, a_min, a_max) -> np.ndarray:
    """``clip(mu + clip(noise, -c, c), a_min, a_max)`` for an already drawn ``noise``."""
    if clip <= 0:
        raise ValueError(f"clip must be positive, got {clip}")
    if np.any(np.asarray(a_min) > np.asarray(a_max)):
        raise ValueError("action bounds are not ordered")
    noise = np.clip(np.asarray(noise, dtype=np.float64), -clip, clip)
    return np.clip(np.asarray(mu_out, dtype=np.float64) + noise, a_min, a_max)
