"""Experiment configuration, orchestration and metrics output.

A run is fully determined by ``(config, seed)``. Random streams are derived from
the seed by fixed keys so that evaluation never perturbs training:

====================  ===========================
``[seed, 0, client]``  dataset generation
``[seed, 1]``          network initialization
``[seed, 2, client]``  client minibatches and noise
``[seed, 3]``          client sampling
``[seed, 4, round]``   online evaluation
``[seed, 5]``          ``fedora eval`` command
====================  ===========================
"""
from __future__ import annotations

import csv
import dataclasses
import io
import math
import types
import typing
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np
import yaml

from . import baselines
from .client import (
    ClientState,
    TD3BCConfig,
    actor_spec_for,
    critic_spec_for,
    init_networks,
    local_updates,
)
from .data import ACT_DIM, LEVELS, OfflineDataset, ScriptedPolicy, generate_dataset
from .env import Pose, WorldConfig
from .evaluation import evaluate_policy
from .nn import save_params
from .server import FederationConfig, RoundReport, ServerState, run_round

ALGORITHMS = ("fedora", "fed-a", "fed-ac", "fed-ac-prox", "centralized", "individual")


class ConfigValidationError(ValueError):
    pass


@dataclass(frozen=True)
class ClientsConfig:
    count: int = 20
    dataset_size: int = 2000
    # behavior level -> number of clients
    mix: dict = field(default_factory=lambda: {"expert": 10, "medium": 10})

    def levels(self) -> list[str]:
        return [lvl for lvl, n in self.mix.items() for _ in range(n)]


@dataclass(frozen=True)
class NetworkConfig:
    hidden_dims: tuple[int, ...] = (256, 256)


@dataclass(frozen=True)
class FederationSettings:
    rounds: int = 100
    epochs: int = 5
    # overrides epochs * ceil(dataset_size / batch_size) when set
    local_steps: int | None = None
    fraction: float = 0.4
    beta: float = 0.1
    fedprox_mu: float = 0.01


@dataclass(frozen=True)
class ExperimentConfig:
    algorithm: str = "fedora"
    seeds: tuple[int, ...] = (0, 1, 2, 3)
    out_dir: str = "runs/default"
    eval_episodes: int = 10
    world: WorldConfig = field(default_factory=WorldConfig)
    clients: ClientsConfig = field(default_factory=ClientsConfig)
    network: NetworkConfig = field(default_factory=NetworkConfig)
    td3bc: TD3BCConfig = field(default_factory=TD3BCConfig)
    federation: FederationSettings = field(default_factory=FederationSettings)

    def local_steps(self) -> int:
        f = self.federation
        if f.local_steps is not None:
            return f.local_steps
        return f.epochs * math.ceil(self.clients.dataset_size / self.td3bc.batch_size)

    def td3bc_for_run(self) -> TD3BCConfig:
        return dataclasses.replace(self.td3bc, local_steps=self.local_steps())


# config parsing -------------------------------------------------------------------


def _convert(value: Any, tp: Any, path: str) -> Any:
    origin = typing.get_origin(tp)
    args = typing.get_args(tp)
    if origin in (typing.Union, types.UnionType):
        if value is None and type(None) in args:
            return None
        inner = [a for a in args if a is not type(None)]
        return _convert(value, inner[0], path)
    if dataclasses.is_dataclass(tp):
        if isinstance(value, (list, tuple)) and tp is Pose:
            value = dict(zip(("x", "y", "theta"), value))
        if not isinstance(value, dict):
            raise ConfigValidationError(f"{path}: expected a mapping")
        return _build(tp, value, path)
    if tp is bool:
        if not isinstance(value, bool):
            raise ConfigValidationError(f"{path}: expected true/false, got {value!r}")
        return value
    if tp is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigValidationError(f"{path}: expected an integer, got {value!r}")
        return value
    if tp is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigValidationError(f"{path}: expected a number, got {value!r}")
        return float(value)
    if tp is str:
        if not isinstance(value, str):
            raise ConfigValidationError(f"{path}: expected a string, got {value!r}")
        return value
    if origin is tuple or origin is list:
        if not isinstance(value, (list, tuple)):
            raise ConfigValidationError(f"{path}: expected a list")
        item = args[0] if args else Any
        return tuple(_convert(v, item, f"{path}[{i}]") for i, v in enumerate(value))
    if tp is dict or origin is dict:
        if not isinstance(value, dict):
            raise ConfigValidationError(f"{path}: expected a mapping")
        return {str(k): _convert(v, int, f"{path}.{k}") for k, v in value.items()}
    return value


def _build(cls, data: dict, path: str):
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    for key in data:
        if key not in names:
            raise ConfigValidationError(f"{path}.{key}: unknown key" if path else f"{key}: unknown key")
    kwargs = {k: _convert(v, hints[k], f"{path}.{k}" if path else k) for k, v in data.items()}
    try:
        return cls(**kwargs)
    except (ValueError, TypeError) as e:
        raise ConfigValidationError(f"{path or 'config'}: {e}") from None


def _validate(cfg: ExperimentConfig) -> ExperimentConfig:
    c, f = cfg.clients, cfg.federation
    if cfg.algorithm not in ALGORITHMS:
        raise ConfigValidationError(f"algorithm: must be one of {ALGORITHMS}")
    checks = [
        ("clients.count", c.count), ("clients.dataset_size", c.dataset_size),
        ("federation.rounds", f.rounds), ("federation.epochs", f.epochs),
        ("eval_episodes", cfg.eval_episodes),
    ]
    if f.local_steps is not None:
        checks.append(("federation.local_steps", f.local_steps))
    for key, val in checks:
        if val < 1:
            raise ConfigValidationError(f"{key}: must be a positive integer, got {val}")
    for lvl, n in c.mix.items():
        if lvl not in LEVELS:
            raise ConfigValidationError(f"clients.mix.{lvl}: unknown behavior level")
        if n < 0:
            raise ConfigValidationError(f"clients.mix.{lvl}: must be non-negative")
    if sum(c.mix.values()) != c.count:
        raise ConfigValidationError(
            f"clients.mix: counts sum to {sum(c.mix.values())}, expected clients.count = {c.count}")
    if not 0.0 < f.fraction <= 1.0:
        raise ConfigValidationError("federation.fraction: must lie in (0, 1]")
    if f.beta < 0 or f.fedprox_mu < 0:
        raise ConfigValidationError("federation.beta and federation.fedprox_mu must be non-negative")
    if not cfg.seeds:
        raise ConfigValidationError("seeds: need at least one seed")
    if not cfg.network.hidden_dims or min(cfg.network.hidden_dims) < 1:
        raise ConfigValidationError("network.hidden_dims: need positive layer widths")
    return cfg


def config_from_dict(data: dict | None) -> ExperimentConfig:
    return _validate(_build(ExperimentConfig, data or {}, ""))


def load_config(path) -> ExperimentConfig:
    with open(path, encoding="utf-8") as f:
        data = yaml.safe_load(f)
    if data is not None and not isinstance(data, dict):
        raise ConfigValidationError("config root must be a mapping")
    return config_from_dict(data)


def config_to_dict(cfg: ExperimentConfig) -> dict:
    def plain(x):
        if isinstance(x, dict):
            return {k: plain(v) for k, v in x.items()}
        if isinstance(x, (list, tuple)):
            return [plain(v) for v in x]
        return x
    return plain(dataclasses.asdict(cfg))


def save_config(cfg: ExperimentConfig, path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        yaml.safe_dump(config_to_dict(cfg), f, sort_keys=False)


# experiment -------------------------------------------------------------------------


def client_datasets(cfg: ExperimentConfig, seed: int) -> list[OfflineDataset]:
    return [
        generate_dataset(cfg.world, ScriptedPolicy.make(lvl), cfg.clients.dataset_size,
                         np.random.default_rng([seed, 0, cid]))
        for cid, lvl in enumerate(cfg.clients.levels())
    ]


def make_evaluator(cfg: ExperimentConfig, seed: int):
    def evaluate(actor, round_idx):
        return evaluate_policy(actor, cfg.world, cfg.eval_episodes,
                               np.random.default_rng([seed, 4, round_idx]))
    return evaluate


def _specs(cfg: ExperimentConfig):
    obs_dim = cfg.world.obs_dim
    hidden = cfg.network.hidden_dims
    return (actor_spec_for(obs_dim, ACT_DIM, hidden, cfg.td3bc.max_action),
            critic_spec_for(obs_dim, ACT_DIM, hidden))


METRIC_COLUMNS = (
    ["algo", "seed", "round", "eval_mean", "eval_std", "n_sampled"]
    + [f"weight_{lvl}" for lvl in LEVELS]
    + [f"decay_{lvl}" for lvl in LEVELS]
    + ["decay_all"]
)
CLIENT_COLUMNS = ["algo", "seed", "round", "client_id", "label", "sampled", "J", "J_fed",
                  "priority", "weight", "decay"]


def fmt(x) -> str:
    if isinstance(x, (bool, np.bool_)):
        return str(int(x))
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    if isinstance(x, (float, np.floating)):
        return format(float(x), ".17g")
    return str(x)


def _group_mean(values, labels, lvl) -> float:
    sel = [v for v, l in zip(values, labels) if l == lvl]
    return float(np.mean(sel)) if sel else math.nan


def metrics_row(algo: str, seed: int, report: RoundReport, clients) -> list:
    row = [algo, seed, report.round, report.eval_mean, report.eval_std, len(report.client_ids)]
    row += [_group_mean(report.weights, report.labels, lvl) for lvl in LEVELS]
    row += [_group_mean(report.local_coeffs, report.labels, lvl) for lvl in LEVELS]
    row.append(float(np.mean([c.local_coeff for c in clients])) if clients else 1.0)
    return row


def client_rows(algo: str, seed: int, report: RoundReport, clients) -> list[list]:
    idx = {cid: k for k, cid in enumerate(report.client_ids)}
    rows = []
    for c in clients:
        k = idx.get(c.client_id)
        if k is None:
            rows.append([algo, seed, report.round, c.client_id, c.label, 0,
                         math.nan, math.nan, math.nan, math.nan, c.local_coeff])
        else:
            rows.append([algo, seed, report.round, c.client_id, c.label, 1, report.J[k],
                         report.J_fed[k], report.priorities[k], report.weights[k], c.local_coeff])
    return rows


class _CsvSink:
    def __init__(self, path: Path, columns):
        self.f = open(path, "w", encoding="utf-8", newline="")
        self.w = csv.writer(self.f, lineterminator="\n")
        self.w.writerow(columns)

    def write(self, row):
        self.w.writerow([fmt(x) for x in row])
        self.f.flush()

    def close(self, status: str):
        self.f.write(f"# status: {status}\n")
        self.f.close()


def run_seed(cfg: ExperimentConfig, seed: int, out_dir: Path) -> Path:
    """Run ``cfg.algorithm`` for one seed; returns the metrics file path."""
    algo = cfg.algorithm
    out_dir.mkdir(parents=True, exist_ok=True)
    metrics_path = out_dir / f"metrics_{algo}_seed{seed}.csv"
    metrics = _CsvSink(metrics_path, METRIC_COLUMNS)
    per_client = _CsvSink(out_dir / f"clients_{algo}_seed{seed}.csv", CLIENT_COLUMNS)
    try:
        actor = _run(cfg, seed, algo, metrics, per_client)
        save_params(actor, out_dir / f"actor_{algo}_seed{seed}.bin")
    except BaseException as e:
        metrics.close(f"incomplete ({type(e).__name__})")
        per_client.close(f"incomplete ({type(e).__name__})")
        raise
    metrics.close("complete")
    per_client.close("complete")
    return metrics_path


def _run(cfg: ExperimentConfig, seed: int, algo: str, metrics: _CsvSink, per_client: _CsvSink):
    td3 = cfg.td3bc_for_run()
    fcfg = cfg.federation
    datasets = client_datasets(cfg, seed)
    actor_spec, critic_spec = _specs(cfg)
    actor0, critics0 = init_networks(actor_spec, critic_spec, np.random.default_rng([seed, 1]))
    evaluator = make_evaluator(cfg, seed)

    if algo in ("centralized", "individual"):
        return _run_standalone(cfg, seed, algo, datasets, td3, actor0, critics0, evaluator, metrics)

    clients = [
        ClientState.create(cid, ds, actor0, critics0, td3, np.random.default_rng([seed, 2, cid]))
        for cid, ds in enumerate(datasets)
    ]

    def on_round(report: RoundReport):
        metrics.write(metrics_row(algo, seed, report, clients))
        for row in client_rows(algo, seed, report, clients):
            per_client.write(row)

    server = ServerState(actor0, critics0, 0, fcfg.beta)
    rng = np.random.default_rng([seed, 3])
    if algo == "fedora":
        fed = FederationConfig(fcfg.fraction, "priority", True)
        for _ in range(fcfg.rounds):
            server, report = run_round(server, clients, td3, fed, rng, evaluator)
            on_round(report)
    elif algo == "fed-a":
        server, _ = baselines.run_fed_a(server, clients, fcfg.rounds, td3, rng, fcfg.fraction,
                                        evaluator, on_round)
    elif algo == "fed-ac":
        server, _ = baselines.run_fed_ac(server, clients, fcfg.rounds, td3, rng, fcfg.fraction,
                                         evaluator, on_round)
    elif algo == "fed-ac-prox":
        server, _ = baselines.run_fed_ac_prox(server, clients, fcfg.rounds, td3, rng,
                                              fcfg.fedprox_mu, fcfg.fraction, evaluator, on_round)
    else:
        raise ValueError(f"unknown algorithm {algo!r}")
    return server.fed_actor


def _run_standalone(cfg, seed, algo, datasets, td3, actor0, critics0, evaluator, metrics):
    K, rounds = td3.local_steps, cfg.federation.rounds
    if algo == "centralized":
        def on_round(report):
            metrics.write(metrics_row(algo, seed, report, []))
        actor, _ = baselines.train_centralized(
            datasets, rounds * K, td3, actor0, critics0, np.random.default_rng([seed, 2, 0]),
            evaluator, K, on_round)
        return actor

    plain = dataclasses.replace(td3, optimism=False, prox_coeff=0.0, decay_enabled=False,
                                param_prox_mu=0.0)
    clients = [
        ClientState.create(cid, ds, actor0, critics0, plain, np.random.default_rng([seed, 2, cid]))
        for cid, ds in enumerate(datasets)
    ]
    for r in range(1, rounds + 1):
        scores = []
        for c in clients:
            local_updates(c, K, plain)
            scores.append(evaluator(c.actor, r)[0])
        report = RoundReport(r, [], [], [], [], [], [], [], float(np.mean(scores)),
                             float(np.std(scores)), [])
        metrics.write(metrics_row(algo, seed, report, []))
    best = int(np.argmax(scores))
    return clients[best].actor


def run_experiment(cfg: ExperimentConfig, out_dir=None) -> list[Path]:
    out = Path(out_dir if out_dir is not None else cfg.out_dir)
    return [run_seed(cfg, seed, out) for seed in cfg.seeds]


# metrics files and plots ---------------------------------------------------------------


def read_metrics(path) -> tuple[list[str], list[dict]]:
    with open(path, encoding="utf-8") as f:
        lines = [ln for ln in f.read().splitlines() if ln and not ln.startswith("#")]
    reader = csv.reader(io.StringIO("\n".join(lines)))
    header = next(reader)
    rows = []
    for rec in reader:
        row = {}
        for k, v in zip(header, rec):
            if k in ("algo", "label"):
                row[k] = v
            elif k in ("seed", "round", "client_id", "sampled", "n_sampled"):
                row[k] = int(v)
            else:
                row[k] = float(v)
        rows.append(row)
    return header, rows


def file_status(path) -> str | None:
    """Trailing status of a metrics file; None if the file is missing or was cut off."""
    if not Path(path).exists():
        return None
    with open(path, encoding="utf-8") as f:
        lines = f.read().splitlines()
    if lines and lines[-1].startswith("# status: "):
        return lines[-1][len("# status: "):]
    return None


def aggregate_curves(paths) -> dict[str, dict[str, np.ndarray]]:
    """Per algorithm: rounds, mean and (population) std of ``eval_mean`` across files."""
    paths = list(paths)
    if not paths:
        raise ValueError("need at least one metrics file")
    per_algo: dict[str, list[dict[int, float]]] = {}
    header0 = None
    for p in paths:
        header, rows = read_metrics(p)
        if header0 is None:
            header0 = header
        elif header != header0:
            raise ValueError(f"{p}: metrics schema differs from {paths[0]}")
        if "eval_mean" not in header or "algo" not in header:
            raise ValueError(f"{p}: not a metrics file")
        algo = rows[0]["algo"] if rows else Path(p).stem
        per_algo.setdefault(algo, []).append({r["round"]: r["eval_mean"] for r in rows})
    out = {}
    for algo, runs in per_algo.items():
        rounds = sorted(set.intersection(*(set(r) for r in runs)))
        vals = np.array([[run[t] for t in rounds] for run in runs])
        out[algo] = {"round": np.array(rounds), "mean": vals.mean(axis=0), "std": vals.std(axis=0)}
    return out


def emit_plot(paths, out_path) -> dict[str, dict[str, np.ndarray]]:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    curves = aggregate_curves(paths)
    with matplotlib.rc_context({"svg.hashsalt": "fedora", "svg.fonttype": "none"}):
        fig, ax = plt.subplots(figsize=(6, 4))
        for algo, c in curves.items():
            ax.plot(c["round"], c["mean"], label=algo)
            ax.fill_between(c["round"], c["mean"] - c["std"], c["mean"] + c["std"], alpha=0.2)
        ax.set_xlabel("round")
        ax.set_ylabel("episode return of federated policy")
        ax.legend()
        fig.tight_layout()
        fig.savefig(out_path, format="svg", metadata={"Date": None})
        plt.close(fig)
    return curves
