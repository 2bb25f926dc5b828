"""Ensemble-directed federation of client actors and critics."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .client import ClientState, ClientUpdate, TD3BCConfig, train_client
from .nn import ParamVector, weighted_param_average

Evaluator = Callable[[ParamVector, int], "tuple[float, float]"]


def compute_priorities(J: Sequence[float], beta: float) -> np.ndarray:
    """Softmax of ``beta * J`` (max-subtracted)."""
    J = np.asarray(J, dtype=np.float64)
    if J.size == 0:
        raise ValueError("need at least one value estimate")
    if not np.all(np.isfinite(J)):
        raise ValueError(f"value estimates must be finite, got {J}")
    z = beta * J
    e = np.exp(z - z.max())
    return e / e.sum()


def compute_weights(priorities: Sequence[float], sizes: Sequence[int]) -> np.ndarray:
    p = np.asarray(priorities, dtype=np.float64)
    n = np.asarray(sizes, dtype=np.float64)
    if p.shape != n.shape:
        raise ValueError(f"{len(p)} priorities but {len(n)} dataset sizes")
    if np.any(n <= 0):
        raise ValueError("dataset sizes must be positive")
    if np.any(p < 0) or not p.max() > 0:
        raise ValueError("priorities must be non-negative and not all zero")
    # weights ignore the scale of p; rescaling makes uniform p reproduce size weights bit for bit
    raw = (p / p.max()) * n
    total = raw.sum()
    if not total > 0:
        raise ValueError("priority-weighted dataset sizes sum to zero")
    return raw / total


def fedavg_weights(sizes: Sequence[int]) -> np.ndarray:
    """Weights proportional to dataset size."""
    n = np.asarray(sizes, dtype=np.float64)
    if n.size == 0:
        raise ValueError("need at least one dataset size")
    if np.any(n <= 0):
        raise ValueError("dataset sizes must be positive")
    return n / n.sum()


def federate_actor(actors: Sequence[ParamVector], weights: Sequence[float]) -> ParamVector:
    if len(actors) != len(weights):
        raise ValueError("one weight per actor required")
    return weighted_param_average(list(zip(actors, weights)))


def federate_critic(critic_pairs: Sequence[Sequence[ParamVector]], weights: Sequence[float]):
    if len(critic_pairs) != len(weights):
        raise ValueError("one weight per critic pair required")
    return tuple(
        weighted_param_average([(pair[j], w) for pair, w in zip(critic_pairs, weights)])
        for j in range(2)
    )


def sample_clients(ids: Sequence[int], fraction: float, rng: np.random.Generator) -> list[int]:
    """``ceil(fraction * N)`` distinct ids, uniformly without replacement, in ascending order."""
    if not 0.0 < fraction <= 1.0:
        raise ValueError(f"fraction must lie in (0, 1], got {fraction}")
    ids = list(ids)
    if not ids:
        raise ValueError("no clients to sample from")
    # guard against 0.3 * 10 = 3.0000000000000004
    k = min(len(ids), max(1, math.ceil(fraction * len(ids) - 1e-9)))
    picked = rng.choice(len(ids), size=k, replace=False)
    return sorted(ids[i] for i in picked)


@dataclass(frozen=True)
class FederationConfig:
    fraction: float = 1.0
    # "priority": softmax over client value estimates; "fedavg": dataset size only
    weighting: str = "priority"
    federate_critic: bool = True

    def __post_init__(self):
        if not 0.0 < self.fraction <= 1.0:
            raise ValueError("fraction must lie in (0, 1]")
        if self.weighting not in ("priority", "fedavg"):
            raise ValueError("weighting must be 'priority' or 'fedavg'")


@dataclass
class ServerState:
    fed_actor: ParamVector
    fed_critics: tuple[ParamVector, ParamVector]
    round: int = 0
    beta: float = 0.1

    def __post_init__(self):
        if self.beta < 0:
            raise ValueError("beta must be non-negative")


@dataclass
class RoundReport:
    round: int
    client_ids: list[int]
    J: list[float]
    J_fed: list[float]
    priorities: list[float]
    weights: list[float]
    sizes: list[int]
    local_coeffs: list[float]
    eval_mean: float = math.nan
    eval_std: float = math.nan
    labels: list[str] = field(default_factory=list)


def make_report(round_idx: int, updates: Sequence[ClientUpdate], priorities, weights,
                clients_by_id, evaluation) -> RoundReport:
    mean, std = evaluation if evaluation is not None else (math.nan, math.nan)
    return RoundReport(
        round=round_idx,
        client_ids=[u.client_id for u in updates],
        J=[u.J for u in updates],
        J_fed=[u.J_fed for u in updates],
        priorities=[float(p) for p in priorities],
        weights=[float(w) for w in weights],
        sizes=[u.size for u in updates],
        local_coeffs=[u.local_coeff for u in updates],
        eval_mean=mean,
        eval_std=std,
        labels=[clients_by_id[u.client_id].label for u in updates],
    )


def run_round(server: ServerState, clients: Sequence[ClientState], cfg: TD3BCConfig,
              fed: FederationConfig, rng: np.random.Generator,
              evaluator: Evaluator | None = None) -> tuple[ServerState, RoundReport]:
    """One round: sample, broadcast, train locally, weight, aggregate, evaluate.

    Only sampled clients contribute; their priorities are normalized among
    themselves. ``evaluator(actor, round)`` scores the new federated actor for the
    report and has no effect on training.
    """
    if not clients:
        raise ValueError("need at least one client")
    by_id = {c.client_id: c for c in clients}
    sampled = sample_clients(sorted(by_id), fed.fraction, rng)
    fed_critics = server.fed_critics if fed.federate_critic else None
    updates = [
        train_client(by_id[i], server.fed_actor, fed_critics, cfg,
                     broadcast_critics=fed.federate_critic)
        for i in sampled
    ]
    sizes = [u.size for u in updates]
    if fed.weighting == "priority":
        p = compute_priorities([u.J for u in updates], server.beta)
        w = compute_weights(p, sizes)
    else:
        p = w = fedavg_weights(sizes)
    actor = federate_actor([u.actor for u in updates], w)
    critics = federate_critic([u.critics for u in updates], w) if fed.federate_critic else server.fed_critics
    new = ServerState(actor, critics, server.round + 1, server.beta)
    evaluation = evaluator(actor, new.round) if evaluator is not None else None
    return new, make_report(new.round, updates, p, w, by_id, evaluation)
