"""Experiment harness: config ingestion, drivers, and metrics files.

A run executes one experiment over the product of a parameter sweep and
a seed list, then writes three files into the output directory:

* ``metrics.csv``, long format with header
  ``sweep_<key>,...,seed,step,metric,value`` (sweep keys sorted
  lexicographically). Two runs of the same resolved config produce
  byte-identical files.
* ``summary.json`` mapping each sweep point to per-metric mean and
  percentile-bootstrap interval over seeds (of each seed's final value).
* ``config.resolved.json`` capturing every default so the exact run can
  be reproduced by loading it back.

Planner policies can carry exact zeros, so divergence metrics floor the
compared policy at ``POLICY_FLOOR`` and renormalize before taking logs.
"""

from __future__ import annotations

import csv
import dataclasses
import json
import os
from dataclasses import dataclass, field, replace
from itertools import product

import numpy as np

from . import rng as rng_mod
from .errors import ConfigError, ContractError
from .mdp import TabularMdp, builtin_mdp, mdp_from_dict
from .oracle import soft_value_iteration
from .planner import PlannerConfig, run_planner
from .training import LossConfig, Model, TrainConfig, train

EXPERIMENTS = ("path_degeneracy", "oracle_convergence", "train", "ablation")
POLICY_FLOOR = 1e-6

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_RUNTIME = 3


def kl_to_reference(reference, policy, floor: float = POLICY_FLOOR) -> float:
    """``KL(reference || policy)`` with the policy floored and renormalized."""
    reference = np.asarray(reference, dtype=float)
    smoothed = np.maximum(np.asarray(policy, dtype=float), floor)
    smoothed = smoothed / smoothed.sum()
    support = reference > 0
    return float(
        np.sum(reference[support] * (np.log(reference[support]) - np.log(smoothed[support])))
    )


def bootstrap_ci(samples, level: float, resamples: int, rng: np.random.Generator):
    """Percentile bootstrap interval for the mean of ``samples``.

    ``level`` is the two-sided coverage; at 0 the interval collapses to
    the bootstrap median. Deterministic for a fixed generator.
    """
    samples = np.asarray(samples, dtype=float)
    if samples.size < 2:
        raise ContractError("bootstrap_ci needs at least 2 samples")
    if not 0.0 <= level < 1.0:
        raise ContractError(f"level must lie in [0, 1), got {level}")
    idx = rng.integers(0, samples.size, size=(resamples, samples.size))
    means = samples[idx].mean(axis=1)
    if level == 0.0:
        med = float(np.median(means))
        return med, med
    lo = float(np.percentile(means, 100.0 * (1.0 - level) / 2.0))
    hi = float(np.percentile(means, 100.0 * (1.0 + level) / 2.0))
    return lo, hi


@dataclass(frozen=True)
class ExperimentConfig:
    experiment: str
    env: dict
    planner: PlannerConfig
    loss: LossConfig = field(default_factory=LossConfig)
    iterations: int = 100
    horizon: int = 16
    s0: int = 0
    buffer_capacity: int = 2048
    batch_size: int = 64
    updates_per_iteration: int = 16
    eval_horizon: int = 0
    seeds: tuple = (0,)
    sweep: dict = field(default_factory=dict)
    output_dir: str = "out"

    def __post_init__(self):
        if self.experiment not in EXPERIMENTS:
            raise ConfigError(
                f"experiment: must be one of {EXPERIMENTS}, got {self.experiment!r}"
            )
        if not self.seeds:
            raise ConfigError("seeds: must list at least one seed")
        for key, values in self.sweep.items():
            self._resolve_sweep_key(key)
            if not isinstance(values, (list, tuple)) or not values:
                raise ConfigError(f"sweep.{key}: must be a non-empty list of values")

    def _resolve_sweep_key(self, key: str):
        head, _, tail = key.partition(".")
        if head in ("planner", "loss") and tail:
            target = self.planner if head == "planner" else self.loss
            if tail in {f.name for f in dataclasses.fields(target)}:
                return
        elif not tail and head in _SWEEPABLE_TOP:
            return
        raise ConfigError(f"sweep.{key}: does not name a configurable field")


_SWEEPABLE_TOP = {
    "iterations",
    "horizon",
    "s0",
    "buffer_capacity",
    "batch_size",
    "updates_per_iteration",
    "eval_horizon",
}

_TOP_KEYS = {
    "experiment",
    "env",
    "planner",
    "loss",
    "seeds",
    "sweep",
    "output_dir",
} | _SWEEPABLE_TOP


def _dataclass_from_dict(cls, data: dict, path: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: must be an object")
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(data) - names
    if unknown:
        raise ConfigError(f"{path}.{sorted(unknown)[0]}: unknown field")
    try:
        return cls(**data)
    except (ContractError, TypeError) as exc:
        raise ConfigError(f"{path}: {exc}") from exc


def config_from_dict(data: dict, source: str = "<config>") -> ExperimentConfig:
    if not isinstance(data, dict):
        raise ConfigError(f"{source}: config must be an object")
    unknown = set(data) - _TOP_KEYS
    if unknown:
        raise ConfigError(f"{source}: unknown key {sorted(unknown)[0]!r}")
    for key in ("experiment", "env", "planner"):
        if key not in data:
            raise ConfigError(f"{source}: missing key {key!r}")
    planner = _dataclass_from_dict(PlannerConfig, data["planner"], f"{source}: planner")
    loss = _dataclass_from_dict(LossConfig, data.get("loss", {}), f"{source}: loss")
    seeds = data.get("seeds", [0])
    if isinstance(seeds, int):
        seeds = list(range(seeds))
    if not isinstance(seeds, list) or not all(isinstance(s, int) for s in seeds):
        raise ConfigError(f"{source}: seeds: must be an integer count or list of integers")
    env = data["env"]
    if not isinstance(env, dict):
        raise ConfigError(f"{source}: env: must be an object")
    try:
        return ExperimentConfig(
            experiment=data["experiment"],
            env=env,
            planner=planner,
            loss=loss,
            iterations=int(data.get("iterations", 100)),
            horizon=int(data.get("horizon", 16)),
            s0=int(data.get("s0", 0)),
            buffer_capacity=int(data.get("buffer_capacity", 2048)),
            batch_size=int(data.get("batch_size", 64)),
            updates_per_iteration=int(data.get("updates_per_iteration", 16)),
            eval_horizon=int(data.get("eval_horizon", 0)),
            seeds=tuple(seeds),
            sweep=dict(data.get("sweep", {})),
            output_dir=str(data.get("output_dir", "out")),
        )
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{source}: {exc}") from exc


def load_config(path) -> ExperimentConfig:
    with open(path) as handle:
        try:
            data = json.load(handle)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}:{exc.lineno}: {exc.msg}") from exc
    return config_from_dict(data, source=str(path))


def config_to_dict(config: ExperimentConfig) -> dict:
    return {
        "experiment": config.experiment,
        "env": config.env,
        "planner": dataclasses.asdict(config.planner),
        "loss": dataclasses.asdict(config.loss),
        "iterations": config.iterations,
        "horizon": config.horizon,
        "s0": config.s0,
        "buffer_capacity": config.buffer_capacity,
        "batch_size": config.batch_size,
        "updates_per_iteration": config.updates_per_iteration,
        "eval_horizon": config.eval_horizon,
        "seeds": list(config.seeds),
        "sweep": config.sweep,
        "output_dir": config.output_dir,
    }


def make_env(env: dict, source: str = "<config>") -> TabularMdp:
    """Build the experiment environment: a named builtin or inline tensors."""
    if "name" in env:
        params = {k: v for k, v in env.items() if k != "name"}
        return builtin_mdp(env["name"], **params)
    return mdp_from_dict(env, source=f"{source}: env")


def set_by_path(data: dict, dotted: str, value, source: str = "<config>") -> None:
    """Assign ``value`` at a dotted key path inside a nested config dict.

    Missing intermediate sections are created; the final key is still
    validated by the config loader.
    """
    parts = dotted.split(".")
    node = data
    for part in parts[:-1]:
        if part not in node:
            node[part] = {}
        if not isinstance(node[part], dict):
            raise ConfigError(f"{source}: --set {dotted}: {part!r} is not a section")
        node = node[part]
    node[parts[-1]] = value


def _apply_sweep_point(config: ExperimentConfig, point: dict) -> ExperimentConfig:
    planner_updates = {}
    loss_updates = {}
    top_updates = {}
    for key, value in point.items():
        head, _, tail = key.partition(".")
        if head == "planner":
            planner_updates[tail] = value
        elif head == "loss":
            loss_updates[tail] = value
        else:
            top_updates[head] = value
    out = config
    if planner_updates:
        out = replace(out, planner=replace(out.planner, **planner_updates))
    if loss_updates:
        out = replace(out, loss=replace(out.loss, **loss_updates))
    if top_updates:
        out = replace(out, **top_updates)
    return out


def _drive(config: ExperimentConfig, mdp: TabularMdp, seed: int):
    """Run one (sweep point, seed) cell; yields (step, metric, value)."""
    planner = config.planner
    if config.experiment == "path_degeneracy":
        model = Model.zeros(mdp.n_states, mdp.n_actions)
        reference = soft_value_iteration(
            mdp, model.policy(), planner.depth, planner.temperature
        ).posterior_policy[config.s0]
        out = run_planner(mdp, config.s0, model, planner, seed)
        return [(0, "kl_root", kl_to_reference(reference, out.root_policy))]
    if config.experiment == "oracle_convergence":
        model = Model.zeros(mdp.n_states, mdp.n_actions)
        reference = soft_value_iteration(
            mdp, model.policy(), planner.depth, planner.temperature
        ).posterior_policy[config.s0]
        out = run_planner(mdp, config.s0, model, planner, seed)
        tv = 0.5 * float(np.abs(out.root_policy - reference).sum())
        return [(0, "tv_root", tv)]
    train_config = TrainConfig(
        planner=planner,
        loss=config.loss,
        horizon=config.horizon,
        s0=config.s0,
        buffer_capacity=config.buffer_capacity,
        batch_size=config.batch_size,
        updates_per_iteration=config.updates_per_iteration,
        eval_horizon=config.eval_horizon,
    )
    result = train(mdp, train_config, config.iterations, seed)
    if config.experiment == "ablation":
        window = min(10, config.iterations)
        return [
            (0, "final_greedy_return", float(result.greedy_returns[-window:].mean())),
            (0, "final_policy_return", float(result.policy_returns[-window:].mean())),
        ]
    rows = []
    for n in range(config.iterations):
        rows.append((n, "greedy_return", float(result.greedy_returns[n])))
        rows.append((n, "policy_return", float(result.policy_returns[n])))
    return rows


def _sweep_points(config: ExperimentConfig):
    keys = sorted(config.sweep)
    if not keys:
        return [{}]
    return [dict(zip(keys, combo)) for combo in product(*(config.sweep[k] for k in keys))]


def run(config: ExperimentConfig, force: bool = False) -> int:
    """Execute the experiment and write metrics, summary, and resolved
    config into ``config.output_dir``. Refuses to overwrite existing
    results unless ``force``."""
    os.makedirs(config.output_dir, exist_ok=True)
    metrics_path = os.path.join(config.output_dir, "metrics.csv")
    summary_path = os.path.join(config.output_dir, "summary.json")
    for path in (metrics_path, summary_path):
        if os.path.exists(path) and not force:
            raise ConfigError(f"{path}: already exists; pass --force to overwrite")
    resolved = config_to_dict(config)
    with open(os.path.join(config.output_dir, "config.resolved.json"), "w") as handle:
        json.dump(resolved, handle, indent=2, sort_keys=True)

    sweep_keys = sorted(config.sweep)
    rows = []  # (sweep values..., seed, step, metric, value)
    finals = {}  # (point key, metric) -> per-seed final values
    for point in _sweep_points(config):
        cell_config = _apply_sweep_point(config, point)
        mdp = make_env(cell_config.env)
        point_label = ",".join(f"{k}={point[k]}" for k in sweep_keys) or "all"
        for seed in config.seeds:
            last = {}
            for step_idx, metric, value in _drive(cell_config, mdp, seed):
                rows.append(
                    tuple(point.get(k) for k in sweep_keys)
                    + (seed, step_idx, metric, value)
                )
                last[metric] = value
            for metric, value in last.items():
                finals.setdefault((point_label, metric), []).append(value)

    with open(metrics_path, "w", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow([f"sweep_{k}" for k in sweep_keys] + ["seed", "step", "metric", "value"])
        for row in rows:
            writer.writerow([_fmt(v) for v in row])

    summary = {}
    for (label, metric), values in sorted(finals.items()):
        arr = np.asarray(values, dtype=float)
        if arr.size >= 2:
            lo, hi = bootstrap_ci(arr, 0.99, 2000, rng_mod.stream(0, len(values)))
        else:
            lo = hi = float(arr[0])
        summary.setdefault(label, {})[metric] = {
            "mean": float(arr.mean()),
            "lo": lo,
            "hi": hi,
        }
    with open(summary_path, "w") as handle:
        json.dump(summary, handle, indent=2, sort_keys=True)
    return EXIT_OK


def _fmt(value) -> str:
    if isinstance(value, float):
        return repr(value)
    return str(value)
