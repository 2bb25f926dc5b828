"""Offline datasets: scripted behavior policies, rollout generation, sampling, files.

Actions are stored in policy space, ``[-1, 1]^2``; see :func:`fedora.env.action_from_unit`.
Only terminal events (goal, collision, boundary) set ``done``; timeouts truncate
an episode without marking the last transition terminal.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass
from typing import Iterator, NamedTuple

import numpy as np

from .env import (
    Action,
    NavEnv,
    Observation,
    WorldConfig,
    action_from_unit,
    action_to_unit,
)

LEVELS = ("expert", "medium", "novice", "random")
ACT_DIM = 2


class DatasetParseError(ValueError):
    pass


class Transition(NamedTuple):
    s: np.ndarray
    a: np.ndarray
    r: float
    s_next: np.ndarray
    done: bool


class Batch(NamedTuple):
    states: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray       # (B, 1)
    next_states: np.ndarray
    dones: np.ndarray         # (B, 1), 0.0 or 1.0


@dataclass(frozen=True, eq=False)
class OfflineDataset:
    states: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    next_states: np.ndarray
    dones: np.ndarray
    provenance: str = ""

    def __post_init__(self):
        arrs = {}
        for name in ("states", "actions", "rewards", "next_states", "dones"):
            a = np.array(getattr(self, name), dtype=np.float64)
            a.setflags(write=False)
            arrs[name] = a
            object.__setattr__(self, name, a)
        n = len(arrs["rewards"])
        if arrs["states"].ndim != 2 or arrs["actions"].ndim != 2:
            raise ValueError("states and actions must be 2-D")
        if any(len(a) != n for a in arrs.values()):
            raise ValueError("all dataset columns must have the same length")
        if arrs["next_states"].shape != arrs["states"].shape:
            raise ValueError("next_states must match states in shape")
        if not np.all(np.isfinite(arrs["rewards"])):
            raise ValueError("rewards must be finite")

    @property
    def obs_dim(self) -> int:
        return self.states.shape[1]

    @property
    def act_dim(self) -> int:
        return self.actions.shape[1]

    def __len__(self) -> int:
        return len(self.rewards)

    def __getitem__(self, i: int) -> Transition:
        return Transition(self.states[i], self.actions[i], float(self.rewards[i]),
                          self.next_states[i], bool(self.dones[i]))

    def __iter__(self) -> Iterator[Transition]:
        return (self[i] for i in range(len(self)))

    def __eq__(self, other):
        if not isinstance(other, OfflineDataset):
            return NotImplemented
        return self.provenance == other.provenance and all(
            np.array_equal(getattr(self, k), getattr(other, k))
            for k in ("states", "actions", "rewards", "next_states", "dones")
        )

    def take(self, idx) -> Batch:
        return Batch(self.states[idx], self.actions[idx], self.rewards[idx, None],
                     self.next_states[idx], self.dones[idx, None])

    @classmethod
    def from_transitions(cls, transitions, provenance: str = "") -> "OfflineDataset":
        transitions = list(transitions)
        if not transitions:
            raise ValueError("need at least one transition")
        return cls(
            np.stack([t.s for t in transitions]),
            np.stack([t.a for t in transitions]),
            np.array([t.r for t in transitions]),
            np.stack([t.s_next for t in transitions]),
            np.array([float(t.done) for t in transitions]),
            provenance,
        )


def concat_datasets(datasets, provenance: str = "pooled") -> OfflineDataset:
    datasets = list(datasets)
    if not datasets:
        raise ValueError("need at least one dataset")
    return OfflineDataset(
        *(np.concatenate([getattr(d, k) for d in datasets])
          for k in ("states", "actions", "rewards", "next_states", "dones")),
        provenance=provenance,
    )


def sample_minibatch(dataset: OfflineDataset, batch_size: int, rng: np.random.Generator) -> Batch:
    """Uniform draw with replacement."""
    if batch_size < 1:
        raise ValueError(f"batch_size must be >= 1, got {batch_size}")
    if len(dataset) == 0:
        raise ValueError("cannot sample from an empty dataset")
    return dataset.take(rng.integers(0, len(dataset), size=batch_size))


# scripted behavior policies ---------------------------------------------------


@dataclass(frozen=True)
class ScriptedPolicy:
    level: str
    turn_gain: float = 2.0
    avoid_gain: float = 0.0
    omega_noise: float = 0.0   # std, as a fraction of omega_max
    v_noise: float = 0.0       # std, as a fraction of v_max
    # 0 steers away from the nearest beam; +1 / -1 always detours left / right
    side: int = 0
    # beams within this angle of the heading count as "ahead"
    sector: float = math.pi / 3

    def __post_init__(self):
        if self.level not in LEVELS:
            raise ValueError(f"level must be one of {LEVELS}, got {self.level!r}")

    @classmethod
    def make(cls, level: str) -> "ScriptedPolicy":
        return cls(level, **BEHAVIOR_PRESETS[level])


BEHAVIOR_PRESETS = {
    "expert": dict(turn_gain=2.0, avoid_gain=2.5),
    "medium": dict(turn_gain=2.0, avoid_gain=2.0, omega_noise=0.3, v_noise=0.1, side=-1),
    "novice": dict(turn_gain=2.0, avoid_gain=0.0, omega_noise=0.05),
    "random": dict(),
}


def avoidance_bias(lidar: np.ndarray, sector: float, side: int = 0) -> float:
    """Signed steering away from the nearest obstacle ahead, in [-1, 1].

    Magnitude is (max - nearest)/max for the closest beam inside the sector;
    positive means turn left.
    """
    n = len(lidar)
    rel = np.array([math.remainder(2.0 * math.pi * k / n, 2.0 * math.pi) for k in range(n)])
    ahead = np.abs(rel) <= sector + 1e-12
    if not ahead.any():
        return 0.0
    idx = np.flatnonzero(ahead)
    k = idx[np.argmin(lidar[idx])]
    push = 1.0 - float(lidar[k])
    if push <= 0.0:
        return 0.0
    if side:
        return math.copysign(push, side)
    if abs(rel[k]) > 1e-12:
        side = -math.copysign(1.0, rel[k])
    else:
        left = lidar[(rel > 0) & ahead].sum()
        right = lidar[(rel < 0) & ahead].sum()
        side = 1.0 if left >= right else -1.0
    return side * push


def scripted_action(policy: ScriptedPolicy, obs: Observation, world: WorldConfig,
                    rng: np.random.Generator) -> Action:
    if policy.level == "random":
        return Action(rng.uniform(0.0, world.v_max), rng.uniform(-world.omega_max, world.omega_max))
    omega = policy.turn_gain * obs.heading_error
    if policy.avoid_gain:
        omega += policy.avoid_gain * avoidance_bias(obs.lidar, policy.sector, policy.side)
    v = world.v_max
    if policy.omega_noise:
        omega += rng.normal(0.0, policy.omega_noise * world.omega_max)
    if policy.v_noise:
        v += rng.normal(0.0, policy.v_noise * world.v_max)
    return Action(min(max(v, 0.0), world.v_max),
                  min(max(omega, -world.omega_max), world.omega_max))


def generate_dataset(world: WorldConfig, policy: ScriptedPolicy, n: int,
                     rng: np.random.Generator) -> OfflineDataset:
    """Roll out consecutive episodes until exactly ``n`` transitions are stored.

    The environment is stepped with the *stored* (policy-space) action, so replaying
    a dataset through the simulator reproduces its rewards bit for bit.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    env = NavEnv(world)
    S = np.empty((n, world.obs_dim))
    A = np.empty((n, ACT_DIM))
    R = np.empty(n)
    S2 = np.empty((n, world.obs_dim))
    D = np.empty(n)
    obs = env.reset(rng)
    for i in range(n):
        a = action_to_unit(scripted_action(policy, obs, world, rng), world)
        res = env.step(action_from_unit(a, world))
        S[i], A[i], R[i], S2[i] = obs.vector(), a, res.reward, res.obs.vector()
        D[i] = float(res.done and res.event != "timeout")
        obs = env.reset(rng) if res.done else res.obs
    return OfflineDataset(S, A, R, S2, D, provenance=policy.level)


# files --------------------------------------------------------------------------


def _fmt(x: float) -> str:
    return format(float(x), ".17g")


def save_dataset(dataset: OfflineDataset, path) -> None:
    header = {"obs_dim": dataset.obs_dim, "act_dim": dataset.act_dim,
              "count": len(dataset), "provenance": dataset.provenance}
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        f.write(json.dumps(header, sort_keys=True) + "\n")
        for i in range(len(dataset)):
            row = [*dataset.states[i], *dataset.actions[i], dataset.rewards[i],
                   *dataset.next_states[i]]
            f.write("[" + ",".join(map(_fmt, row)) + f",{int(dataset.dones[i])}]\n")


def load_dataset(path) -> OfflineDataset:
    with open(path, encoding="utf-8") as f:
        lines = f.read().splitlines()
    if not lines:
        raise DatasetParseError("line 1: missing header")
    try:
        header = json.loads(lines[0])
        obs_dim, act_dim, count = (int(header[k]) for k in ("obs_dim", "act_dim", "count"))
        provenance = str(header.get("provenance", ""))
    except (ValueError, KeyError, TypeError) as e:
        raise DatasetParseError(f"line 1: malformed header ({e})") from None
    rows = [ln for ln in lines[1:]]
    if len(rows) != count:
        raise DatasetParseError(f"line 1: header count {count} but file has {len(rows)} rows")
    width = 2 * obs_dim + act_dim + 2
    data = np.empty((count, width))
    for k, ln in enumerate(rows):
        lineno = k + 2
        try:
            vals = json.loads(ln)
        except ValueError:
            raise DatasetParseError(f"line {lineno}: not a JSON array") from None
        if not isinstance(vals, list) or len(vals) != width:
            raise DatasetParseError(f"line {lineno}: expected {width} numbers")
        if vals[-1] not in (0, 1):
            raise DatasetParseError(f"line {lineno}: done flag must be 0 or 1")
        try:
            data[k] = vals
        except (TypeError, ValueError):
            raise DatasetParseError(f"line {lineno}: non-numeric entry") from None
    o, a = obs_dim, act_dim
    return OfflineDataset(
        data[:, :o], data[:, o:o + a], data[:, o + a], data[:, o + a + 1:2 * o + a + 1],
        data[:, -1], provenance,
    )
