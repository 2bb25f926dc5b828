"""Local offline actor-critic training for one client.

The client runs TD3-BC (twin critics, target critics, delayed actor updates, target
policy smoothing) with three federation hooks, each switchable from
:class:`TD3BCConfig`:

* optimistic bootstrapping: the Bellman target takes the larger of the local
  target-critic value and the federated critic value;
* a proximal term pulling the local actor's actions towards the federated actor's;
* a persistent coefficient ``local_coeff`` on the TD3-BC part of the actor loss,
  shrunk by ``decay`` whenever the federated policy looks at least as good as the
  freshly trained local one.

With optimism off, ``prox_coeff = 0`` and decay off the update is plain TD3-BC.
``param_prox_mu`` adds a FedProx penalty ``mu/2 * ||theta - theta_broadcast||^2``
to every local loss; it is only used by the Fed-AC-Prox baseline.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import NamedTuple, Sequence

import numpy as np

from .data import Batch, OfflineDataset, sample_minibatch
from .nn import (
    AdamState,
    NetworkSpec,
    NumericError,
    ParamVector,
    adam_step,
    forward_cached,
    init_params,
    mlp_backward,
    mlp_forward,
)


@dataclass(frozen=True)
class TD3BCConfig:
    gamma: float = 0.99
    lambda_bc: float = 1.0
    # TD3-BC's lambda = alpha / mean|Q|; off unless asked for
    normalize_q: bool = False
    alpha: float = 2.5
    prox_coeff: float = 1.0
    policy_delay: int = 2
    policy_noise: float = 0.2
    noise_clip: float = 0.5
    tau: float = 0.005
    local_steps: int = 380
    batch_size: int = 256
    decay: float = 0.995
    decay_enabled: bool = True
    optimism: bool = True
    param_prox_mu: float = 0.0
    actor_lr: float = 3e-4
    critic_lr: float = 3e-4
    max_action: float = 1.0

    def __post_init__(self):
        if not 0.0 < self.gamma < 1.0:
            raise ValueError("gamma must lie in (0, 1)")
        if not 0.0 < self.decay <= 1.0:
            raise ValueError("decay must lie in (0, 1]")
        if self.local_steps < 1:
            raise ValueError("local_steps must be >= 1")
        if self.batch_size < 1 or self.policy_delay < 1:
            raise ValueError("batch_size and policy_delay must be >= 1")
        if self.prox_coeff < 0 or self.param_prox_mu < 0:
            raise ValueError("proximal coefficients must be non-negative")
        if not 0.0 <= self.tau <= 1.0:
            raise ValueError("tau must lie in [0, 1]")

    @classmethod
    def plain(cls, **kw) -> "TD3BCConfig":
        """TD3-BC with every federation hook switched off."""
        base = dict(optimism=False, prox_coeff=0.0, decay_enabled=False, param_prox_mu=0.0)
        base.update(kw)
        return cls(**base)


def actor_spec_for(obs_dim: int, act_dim: int, hidden=(256, 256), max_action=1.0) -> NetworkSpec:
    return NetworkSpec(obs_dim, act_dim, tuple(hidden), "tanh", max_action)


def critic_spec_for(obs_dim: int, act_dim: int, hidden=(256, 256)) -> NetworkSpec:
    return NetworkSpec(obs_dim + act_dim, 1, tuple(hidden), "linear")


@dataclass
class ClientState:
    client_id: int
    dataset: OfflineDataset
    actor: ParamVector
    critics: list[ParamVector]
    critic_targets: list[ParamVector]
    actor_opt: AdamState
    critic_opts: list[AdamState]
    rng: np.random.Generator = field(repr=False)
    local_coeff: float = 1.0
    label: str = ""

    @classmethod
    def create(cls, client_id: int, dataset: OfflineDataset, actor: ParamVector,
               critics: Sequence[ParamVector], cfg: TD3BCConfig, rng: np.random.Generator,
               label: str | None = None) -> "ClientState":
        critics = list(critics)
        if len(critics) != 2 or critics[0].spec != critics[1].spec:
            raise ValueError("a client needs two critics sharing one spec")
        return cls(
            client_id, dataset, actor, critics, list(critics),
            AdamState.zeros(actor.spec.n_params, learning_rate=cfg.actor_lr),
            [AdamState.zeros(c.spec.n_params, learning_rate=cfg.critic_lr) for c in critics],
            rng, 1.0, dataset.provenance if label is None else label,
        )


class ClientUpdate(NamedTuple):
    client_id: int
    actor: ParamVector
    critics: tuple[ParamVector, ParamVector]
    J: float
    J_fed: float
    size: int
    local_coeff: float


def init_networks(actor_spec: NetworkSpec, critic_spec: NetworkSpec, rng: np.random.Generator):
    """Fresh actor and critic pair, drawn in that order."""
    actor = init_params(actor_spec, rng)
    critics = (init_params(critic_spec, rng), init_params(critic_spec, rng))
    return actor, critics


# losses -----------------------------------------------------------------------


def optimistic_target(q_local, q_fed, enabled: bool = True):
    return np.maximum(q_local, q_fed) if enabled else q_local


def min_q(critics: Sequence[ParamVector], sa: np.ndarray) -> np.ndarray:
    return np.minimum(mlp_forward(critics[0], sa), mlp_forward(critics[1], sa))


def proximal_penalty(params: ParamVector, anchor: ParamVector, mu: float) -> tuple[float, np.ndarray]:
    """``mu/2 * ||params - anchor||^2`` and its gradient."""
    diff = params.values - anchor.values
    return 0.5 * mu * float(diff @ diff), mu * diff


def smoothed_next_actions(actor: ParamVector, next_states: np.ndarray, cfg: TD3BCConfig,
                          rng: np.random.Generator) -> np.ndarray:
    noise = np.clip(rng.normal(0.0, cfg.policy_noise, size=(len(next_states), actor.spec.output_dim)),
                    -cfg.noise_clip, cfg.noise_clip)
    return np.clip(mlp_forward(actor, next_states) + noise, -cfg.max_action, cfg.max_action)


def bellman_target(batch: Batch, next_actions: np.ndarray, target_critics, fed_critics,
                   cfg: TD3BCConfig) -> np.ndarray:
    """``r + gamma (1 - done) max(min_j Qtarget_j, min_j Qfed_j)`` at ``(s', a')``, shape (B, 1)."""
    sa_next = np.concatenate([batch.next_states, next_actions], axis=1)
    q_next = min_q(target_critics, sa_next)
    if cfg.optimism and fed_critics is not None:
        q_next = optimistic_target(q_next, min_q(fed_critics, sa_next))
    return batch.rewards + cfg.gamma * (1.0 - batch.dones) * q_next


def critic_loss_and_grad(critic: ParamVector, sa: np.ndarray, y: np.ndarray,
                         anchor: ParamVector | None = None, mu: float = 0.0):
    """Mean squared Bellman error of one critic, plus the optional FedProx term."""
    cache = forward_cached(critic, sa)
    err = cache.output - y
    loss = float(np.mean(err * err))
    grad, _ = mlp_backward(critic, sa, 2.0 * err / len(err), cache=cache)
    if anchor is not None and mu > 0.0:
        pen, pgrad = proximal_penalty(critic, anchor, mu)
        loss += pen
        grad = grad + pgrad
    return loss, grad


def actor_loss_and_grad(actor: ParamVector, critic: ParamVector, batch: Batch,
                        fed_actor: ParamVector | None, local_coeff: float, cfg: TD3BCConfig,
                        anchor: ParamVector | None = None):
    """Actor objective and its gradient.

    ``local_coeff * mean(-lam * Q1(s, pi(s)) + mse(pi(s), a))
    + prox_coeff * mse(pi(s), pi_fed(s)) [+ mu/2 ||theta - anchor||^2]``,
    where ``mse`` averages over batch and action dimensions.
    """
    s, a = batch.states, batch.actions
    n, act_dim = a.shape
    acache = forward_cached(actor, s)
    pi = acache.output
    sa = np.concatenate([s, pi], axis=1)
    qcache = forward_cached(critic, sa)
    q = qcache.output
    lam = cfg.alpha / max(float(np.mean(np.abs(q))), 1e-8) if cfg.normalize_q else cfg.lambda_bc
    bc = pi - a
    loss = local_coeff * (-lam * float(np.mean(q)) + float(np.mean(bc * bc)))
    _, dsa = mlp_backward(critic, sa, np.full((n, 1), -local_coeff * lam / n),
                          cache=qcache, param_grads=False)
    dpi = dsa[:, s.shape[1]:] + local_coeff * 2.0 * bc / (n * act_dim)
    if fed_actor is not None and cfg.prox_coeff > 0.0:
        prox = pi - mlp_forward(fed_actor, s)
        loss += cfg.prox_coeff * float(np.mean(prox * prox))
        dpi = dpi + cfg.prox_coeff * 2.0 * prox / (n * act_dim)
    grad, _ = mlp_backward(actor, s, dpi, cache=acache)
    if anchor is not None and cfg.param_prox_mu > 0.0:
        pen, pgrad = proximal_penalty(actor, anchor, cfg.param_prox_mu)
        loss += pen
        grad = grad + pgrad
    return loss, grad


# updates ----------------------------------------------------------------------


class Anchors(NamedTuple):
    actor: ParamVector
    critics: tuple[ParamVector, ParamVector]


def _polyak(target: ParamVector, source: ParamVector, tau: float) -> ParamVector:
    return target.with_values(tau * source.values + (1.0 - tau) * target.values)


def critic_update(client: ClientState, batch: Batch, fed_critics, cfg: TD3BCConfig,
                  anchors: Anchors | None = None) -> None:
    """One Adam step on both local critics, then a polyak step on their targets."""
    a_next = smoothed_next_actions(client.actor, batch.next_states, cfg, client.rng)
    y = bellman_target(batch, a_next, client.critic_targets, fed_critics, cfg)
    sa = np.concatenate([batch.states, batch.actions], axis=1)
    mu = cfg.param_prox_mu if anchors is not None else 0.0
    for j in range(2):
        anchor = anchors.critics[j] if anchors is not None else None
        loss, grad = critic_loss_and_grad(client.critics[j], sa, y, anchor, mu)
        if not math.isfinite(loss):
            raise NumericError(f"client {client.client_id}: non-finite critic loss")
        client.critics[j], client.critic_opts[j] = adam_step(client.critic_opts[j], client.critics[j], grad)
    client.critic_targets = [_polyak(t, c, cfg.tau) for t, c in zip(client.critic_targets, client.critics)]


def actor_update(client: ClientState, batch: Batch, fed_actor: ParamVector | None,
                 cfg: TD3BCConfig, anchors: Anchors | None = None) -> None:
    loss, grad = actor_loss_and_grad(
        client.actor, client.critics[0], batch, fed_actor, client.local_coeff, cfg,
        anchors.actor if anchors is not None else None,
    )
    if not math.isfinite(loss):
        raise NumericError(f"client {client.client_id}: non-finite actor loss")
    client.actor, client.actor_opt = adam_step(client.actor_opt, client.actor, grad)


def local_updates(client: ClientState, steps: int, cfg: TD3BCConfig,
                  fed_actor: ParamVector | None = None, fed_critics=None,
                  anchors: Anchors | None = None) -> None:
    """``steps`` critic updates with an actor update after every ``policy_delay``-th.

    Random draws per step: minibatch indices, then target smoothing noise.
    """
    for k in range(steps):
        batch = sample_minibatch(client.dataset, cfg.batch_size, client.rng)
        critic_update(client, batch, fed_critics, cfg, anchors)
        if (k + 1) % cfg.policy_delay == 0:
            actor_update(client, batch, fed_actor, cfg, anchors)


def estimate_policy_value(actor: ParamVector, critics: Sequence[ParamVector], states) -> float:
    """Mean over every dataset state of ``min_j Q_j(s, actor(s))``."""
    states = states.states if isinstance(states, OfflineDataset) else np.asarray(states)
    if len(states) == 0:
        raise ValueError("cannot estimate a policy value on an empty dataset")
    pi = mlp_forward(actor, states)
    return float(np.mean(min_q(critics, np.concatenate([states, pi], axis=1))))


def maybe_decay(client: ClientState, J_fed: float, J_local: float, delta: float) -> bool:
    """Shrink ``local_coeff`` by ``delta`` when ``J_fed >= J_local``; report whether it did."""
    if J_fed >= J_local:
        client.local_coeff *= delta
        return True
    return False


def train_client(client: ClientState, fed_actor: ParamVector, fed_critics, cfg: TD3BCConfig,
                 broadcast_critics: bool = True) -> ClientUpdate:
    """One federation round on this client.

    The client adopts the broadcast actor (and, with ``broadcast_critics``, the
    broadcast critics as both critics and targets), trains for ``cfg.local_steps``,
    then scores itself and the broadcast models on its whole dataset.
    ``fed_critics=None`` means there is no federated critic (actor-only federation).
    """
    client.actor = fed_actor
    if broadcast_critics:
        if fed_critics is None:
            raise ValueError("broadcast_critics requires federated critics")
        client.critics = list(fed_critics)
        client.critic_targets = list(fed_critics)
    anchors = None
    if cfg.param_prox_mu > 0.0:
        anchors = Anchors(fed_actor, tuple(client.critics))
    local_updates(
        client, cfg.local_steps, cfg,
        fed_actor=fed_actor if cfg.prox_coeff > 0.0 else None,
        fed_critics=fed_critics if cfg.optimism else None,
        anchors=anchors,
    )
    states = client.dataset.states
    J = estimate_policy_value(client.actor, client.critics, states)
    J_fed = estimate_policy_value(fed_actor, fed_critics, states) if fed_critics is not None else math.nan
    if cfg.decay_enabled and fed_critics is not None:
        maybe_decay(client, J_fed, J, cfg.decay)
    return ClientUpdate(client.client_id, client.actor, tuple(client.critics), J, J_fed,
                        len(client.dataset), client.local_coeff)
