"""Online evaluation of a deterministic actor in the navigation environment."""
from __future__ import annotations

import numpy as np

from .env import NavEnv, WorldConfig, action_from_unit
from .nn import ParamVector, mlp_forward


def episode_returns(actor: ParamVector, world: WorldConfig, episodes: int,
                    rng: np.random.Generator) -> np.ndarray:
    """Undiscounted return of each of ``episodes`` rollouts; resets draw from ``rng``."""
    if episodes < 1:
        raise ValueError(f"episodes must be >= 1, got {episodes}")
    env = NavEnv(world)
    out = np.empty(episodes)
    for e in range(episodes):
        obs = env.reset(rng)
        total = 0.0
        while True:
            res = env.step(action_from_unit(mlp_forward(actor, obs.vector()), world))
            total += res.reward
            if res.done:
                break
            obs = res.obs
        out[e] = total
    return out


def evaluate_policy(actor: ParamVector, world: WorldConfig, episodes: int,
                    rng: np.random.Generator) -> tuple[float, float]:
    """Mean and (population) standard deviation of episode returns."""
    r = episode_returns(actor, world, episodes, rng)
    return float(r.mean()), float(r.std())
