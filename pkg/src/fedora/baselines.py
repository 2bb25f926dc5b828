"""Comparison algorithms: naive FedAvg federations and non-federated TD3-BC.

The federated baselines run plain TD3-BC on every client and average with
dataset-size weights. Fed-A averages actors only (critics stay local and persist
between rounds), Fed-AC averages both, and Fed-AC-Prox adds a FedProx penalty on
both networks' parameters.
"""
from __future__ import annotations

import math
from dataclasses import replace
from typing import Callable, Sequence

import numpy as np

from .client import (
    ClientState,
    TD3BCConfig,
    estimate_policy_value,
    local_updates,
    train_client,
)
from .data import OfflineDataset, concat_datasets
from .nn import ParamVector
from .server import (
    RoundReport,
    ServerState,
    fedavg_weights,
    federate_actor,
    federate_critic,
    make_report,
    sample_clients,
)

BASELINE_KINDS = ("fed_a", "fed_ac", "fed_ac_prox", "centralized", "individual")

OnRound = Callable[[RoundReport], None]
Evaluator = Callable[[ParamVector, int], "tuple[float, float]"]


def _fedavg_rounds(server: ServerState, clients: Sequence[ClientState], rounds: int,
                   cfg: TD3BCConfig, rng: np.random.Generator, fraction: float,
                   with_critic: bool, evaluator: Evaluator | None,
                   on_round: OnRound | None) -> tuple[ServerState, list[RoundReport]]:
    by_id = {c.client_id: c for c in clients}
    actor, critics = server.fed_actor, server.fed_critics
    history = []
    for t in range(server.round, server.round + rounds):
        ids = sample_clients(sorted(by_id), fraction, rng)
        updates = [
            train_client(by_id[i], actor, critics if with_critic else None, cfg,
                         broadcast_critics=with_critic)
            for i in ids
        ]
        w = fedavg_weights([u.size for u in updates])
        actor = federate_actor([u.actor for u in updates], w)
        if with_critic:
            critics = federate_critic([u.critics for u in updates], w)
        evaluation = evaluator(actor, t + 1) if evaluator is not None else None
        report = make_report(t + 1, updates, w, w, by_id, evaluation)
        history.append(report)
        if on_round is not None:
            on_round(report)
    return ServerState(actor, critics, server.round + rounds, server.beta), history


def _plain(cfg: TD3BCConfig, mu: float = 0.0) -> TD3BCConfig:
    return replace(cfg, optimism=False, prox_coeff=0.0, decay_enabled=False, param_prox_mu=mu)


def run_fed_a(server, clients, rounds, cfg, rng, fraction=1.0, evaluator=None, on_round=None):
    """FedAvg over actors only."""
    return _fedavg_rounds(server, clients, rounds, _plain(cfg), rng, fraction, False, evaluator, on_round)


def run_fed_ac(server, clients, rounds, cfg, rng, fraction=1.0, evaluator=None, on_round=None):
    """FedAvg over actors and critics."""
    return _fedavg_rounds(server, clients, rounds, _plain(cfg), rng, fraction, True, evaluator, on_round)


def run_fed_ac_prox(server, clients, rounds, cfg, rng, mu=0.01, fraction=1.0, evaluator=None,
                    on_round=None):
    if mu < 0:
        raise ValueError("mu must be non-negative")
    return _fedavg_rounds(server, clients, rounds, _plain(cfg, mu), rng, fraction, True,
                          evaluator, on_round)


def train_centralized(datasets: Sequence[OfflineDataset], steps: int, cfg: TD3BCConfig,
                      actor: ParamVector, critics, rng: np.random.Generator,
                      evaluator: Evaluator | None = None, eval_every: int | None = None,
                      on_round: OnRound | None = None) -> tuple[ParamVector, list[RoundReport]]:
    """Plain TD3-BC on the union of all datasets.

    With ``eval_every`` set, training runs in chunks of that many steps and each
    chunk produces a report, so the output lines up with federated rounds.
    """
    if not datasets:
        raise ValueError("need at least one dataset")
    if steps < 1:
        raise ValueError("steps must be >= 1")
    pooled = concat_datasets(datasets) if len(datasets) > 1 else datasets[0]
    cfg = _plain(cfg)
    client = ClientState.create(0, pooled, actor, critics, cfg, rng, label="pooled")
    chunk = eval_every or steps
    history = []
    done, r = 0, 0
    while done < steps:
        n = min(chunk, steps - done)
        local_updates(client, n, cfg)
        done += n
        r += 1
        J = estimate_policy_value(client.actor, client.critics, pooled.states)
        evaluation = evaluator(client.actor, r) if evaluator is not None else (math.nan, math.nan)
        report = RoundReport(r, [0], [J], [math.nan], [1.0], [1.0], [len(pooled)], [1.0],
                             evaluation[0], evaluation[1], ["pooled"])
        history.append(report)
        if on_round is not None:
            on_round(report)
    return client.actor, history


def train_individual(dataset: OfflineDataset, steps: int, cfg: TD3BCConfig, actor: ParamVector,
                     critics, rng: np.random.Generator, evaluator: Evaluator | None = None,
                     eval_every: int | None = None, on_round: OnRound | None = None):
    """Plain TD3-BC on a single client's data."""
    return train_centralized([dataset], steps, cfg, actor, critics, rng, evaluator, eval_every, on_round)
