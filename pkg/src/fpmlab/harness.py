"""Experiment orchestration: run configuration, policy evaluation,
metrics CSV, figure emission, and pass/fail verdicts.

Five experiments are supported: reward-compare (mutual vs summed reward
shaping), moe (mixture of cluster experts vs a single expert),
distill-sweep (diffusion vs behavior-cloning students across demo
budgets), robustness-grid (observation noise x success-threshold scale),
and scale-sweep (one-stage PPO across task-set sizes).

Each experiment writes, under <out_dir>/<name>/: the resolved config
(config.json), a long-format metrics CSV (metrics.csv), one or more SVG
figures, and a verdict JSON restating the predicate it checked. Reruns
with the same config produce byte-identical CSVs.
"""

from __future__ import annotations

import csv
import dataclasses
import io
import json
import math
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from . import clustering as cl
from . import datasets as ds
from . import diffusion as df
from . import plots
from . import ppo as ppo_mod
from . import worldmodel as wm
from .errors import ConfigurationError, DomainError
from .ppo import GaussianPolicy, PpoConfig
from .rewards import RewardMode, RewardWeights, Thresholds
from .tensorcore import RngStream

EXPERIMENTS = ("reward-compare", "moe", "distill-sweep", "robustness-grid",
               "scale-sweep")

CSV_COLUMNS = ("experiment", "condition", "seed", "env_steps", "success_rate",
               "episode_count", "mean_episode_length", "wall_clock")


# ---------------------------------------------------------------------------
# Configuration


@dataclass(frozen=True)
class ClusterConfig:
    k: int = 4
    n_points: int = 64
    latent_dim: int = 8
    ae_epochs: int = 200
    ae_step_size: float = 1e-3


@dataclass(frozen=True)
class DataConfig:
    demos_per_goal: int = 5
    split_ratio: float = 0.7
    t_p: int = 4
    t_o: int = 2
    t_a: int = 1
    max_retries: int = 5


@dataclass(frozen=True)
class DiffusionConfig:
    T: int = 50
    epochs: int = 60
    batch_size: int = 64
    step_size: float = 1e-3
    hidden: tuple[int, ...] = (256, 256)
    forward: str = "ddpm"


@dataclass(frozen=True)
class RunConfig:
    env: wm.EnvConfig = field(default_factory=wm.EnvConfig)
    weights: RewardWeights = field(default_factory=RewardWeights)
    ppo: PpoConfig = field(default_factory=PpoConfig)
    cluster: ClusterConfig = field(default_factory=ClusterConfig)
    data: DataConfig = field(default_factory=DataConfig)
    diffusion: DiffusionConfig = field(default_factory=DiffusionConfig)
    reward_mode: str = "mutual"
    n_tasks: int = 16
    task_seed: int = 101
    seeds: tuple[int, ...] = (1, 2, 3)
    episodes_per_task: int = 4
    distill_levels: tuple[int, ...] = (1, 5, 25)
    noise_levels: tuple[tuple[float, float], ...] = (
        (0.0, 0.0), (0.02, 0.035), (0.05, 0.0875))
    threshold_scales: tuple[float, ...] = (1.0, 1.5, 2.0)
    scale_sizes: tuple[int, ...] = (1, 16, 64)
    workers: int = 0  # 0 = one worker per available core
    out_dir: str = "out"


def config_to_dict(config: RunConfig) -> dict:
    return dataclasses.asdict(config)


_NESTED = {
    "env": wm.EnvConfig, "weights": RewardWeights, "ppo": PpoConfig,
    "cluster": ClusterConfig, "data": DataConfig, "diffusion": DiffusionConfig,
}
_ENV_NESTED = {"thresholds": Thresholds, "noise": wm.NoiseConfig}


def _coerce_tuples(cls, kwargs):
    for f in dataclasses.fields(cls):
        if f.name in kwargs and isinstance(kwargs[f.name], list):
            v = kwargs[f.name]
            kwargs[f.name] = tuple(tuple(x) if isinstance(x, list) else x
                                   for x in v)
    return kwargs


def config_from_dict(data: dict) -> RunConfig:
    """Inverse of config_to_dict; unknown keys raise ConfigurationError."""
    top = {f.name for f in dataclasses.fields(RunConfig)}
    kwargs = {}
    for key, value in data.items():
        if key not in top:
            raise ConfigurationError(
                f"unknown config key '{key}'; valid keys: " + ", ".join(sorted(top)))
        if key in _NESTED:
            sub_cls = _NESTED[key]
            sub_fields = {f.name for f in dataclasses.fields(sub_cls)}
            sub_kwargs = {}
            for sk, sv in value.items():
                if sk not in sub_fields:
                    raise ConfigurationError(
                        f"unknown config key '{key}.{sk}'; valid keys: "
                        + ", ".join(f"{key}.{n}" for n in sorted(sub_fields)))
                if key == "env" and sk in _ENV_NESTED:
                    sv = _ENV_NESTED[sk](**sv)
                sub_kwargs[sk] = sv
            kwargs[key] = sub_cls(**_coerce_tuples(sub_cls, sub_kwargs))
        else:
            kwargs[key] = value
    return RunConfig(**_coerce_tuples(RunConfig, kwargs))


def apply_overrides(data: dict, overrides) -> dict:
    """Apply `--set dotted.key=value` pairs onto a config dict. Values are
    parsed as JSON when possible, otherwise kept as strings."""
    for item in overrides:
        if "=" not in item:
            raise ConfigurationError(f"override '{item}' is not key=value")
        key, _, raw = item.partition("=")
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        node = data
        parts = key.split(".")
        for part in parts[:-1]:
            if part not in node or not isinstance(node[part], dict):
                raise ConfigurationError(
                    f"unknown config key '{key}'; valid keys at this level: "
                    + ", ".join(sorted(node)))
            node = node[part]
        if parts[-1] not in node:
            raise ConfigurationError(
                f"unknown config key '{key}'; valid keys at this level: "
                + ", ".join(sorted(node)))
        node[parts[-1]] = value
    return data


def load_config(path: str | None, overrides=()) -> RunConfig:
    if path is not None:
        if not os.path.exists(path):
            raise ConfigurationError(f"config file not found: {path}")
        with open(path) as f:
            data = json.load(f)
    else:
        data = config_to_dict(RunConfig())
    data = apply_overrides(data, overrides)
    return config_from_dict(data)


# ---------------------------------------------------------------------------
# Evaluation


@dataclass
class MetricsRow:
    experiment: str
    condition: str
    seed: int
    success_rate: float
    episode_count: int
    mean_episode_length: float
    wall_clock: float = 0.0
    env_steps: int | None = None

    def csv_values(self):
        # wall_clock is intentionally left blank: reruns of the same
        # config must produce byte-identical CSVs.
        return (self.experiment, self.condition, str(self.seed),
                "" if self.env_steps is None else str(self.env_steps),
                f"{self.success_rate:.6f}", str(self.episode_count),
                f"{self.mean_episode_length:.4f}", "")


class RandomPolicy:
    """Uniform actions within env bounds; baseline for sanity checks."""

    def __init__(self, env_config: wm.EnvConfig):
        self.scale = ppo_mod.action_scale(env_config)

    def act(self, rng: RngStream) -> np.ndarray:
        return rng.uniform(-1.0, 1.0, size=len(self.scale)) * self.scale


def _rollout(policy, task: wm.Task, env_cfg: wm.EnvConfig, rng: RngStream):
    """One evaluation episode; returns (success, length). The policy kind
    determines its observation channel; observation noise (env_cfg.noise)
    affects student policies only."""
    state = wm.reset(env_cfg, task.shape, task.goal, rng)
    obs_rng = rng.split(7)
    sample_rng = rng.split(8)
    a_scale = ppo_mod.action_scale(env_cfg)
    is_student = isinstance(policy, (df.DiffusionPolicy, df.BcPolicy))
    if isinstance(policy, GaussianPolicy) or hasattr(policy, "policy_for"):
        if hasattr(policy, "policy_for"):
            policy = policy.policy_for(task)
        o_scale = ppo_mod.observation_scale("teacher", env_cfg)
    history = []
    for step_i in range(env_cfg.max_steps):
        if isinstance(policy, GaussianPolicy):
            obs = wm.observe_teacher(state, task.goal, task.shape)
            action = np.clip(policy.mean(obs * o_scale) * a_scale,
                             -a_scale, a_scale)
        elif is_student:
            history.append(wm.observe_student(state, task.goal, env_cfg.noise,
                                              obs_rng))
            if isinstance(policy, df.DiffusionPolicy):
                action = df.act(policy, history, sample_rng, env_cfg)[0]
            else:
                action = df.bc_act(policy, history, env_cfg)[0]
        elif isinstance(policy, wm.ScriptedRollPolicy):
            action = policy.act(state, task.goal, task.shape)
        elif isinstance(policy, RandomPolicy):
            action = policy.act(sample_rng)
        else:
            raise DomainError(f"unsupported policy type {type(policy).__name__}")
        res = wm.step(state, action, task.shape, task.goal, env_cfg)
        state = res.next_state
        if res.done:
            return res.success, step_i + 1
    return False, env_cfg.max_steps


def evaluate(policy, task_list, episodes_per_task: int,
             noise_config: wm.NoiseConfig, thresholds: Thresholds, seed: int,
             env_config: wm.EnvConfig | None = None, experiment: str = "",
             condition: str = "") -> MetricsRow:
    """Deterministic success-rate estimate. episodes_per_task is raised if
    needed so the total episode count is at least 64."""
    if not task_list:
        raise DomainError("task list is empty")
    env_config = env_config or wm.EnvConfig()
    env_cfg = replace(env_config, thresholds=thresholds, noise=noise_config)
    per_task = max(episodes_per_task, math.ceil(64 / len(task_list)))
    root = RngStream(seed)
    t0 = time.time()
    succ, lengths = 0, []
    for task in task_list:
        task_rng = root.split(task.goal_id)
        for ep in range(per_task):
            ok, length = _rollout(policy, task, env_cfg, task_rng.split(ep))
            succ += ok
            lengths.append(length)
    n = len(task_list) * per_task
    return MetricsRow(experiment, condition, seed, succ / n, n,
                      float(np.mean(lengths)), time.time() - t0)


# ---------------------------------------------------------------------------
# CSV / artifact plumbing


def write_metrics_csv(rows, path) -> None:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CSV_COLUMNS)
    for row in rows:
        writer.writerow(row.csv_values())
    with open(path, "w", newline="") as f:
        f.write(buf.getvalue())


def read_metrics_csv(path) -> list[dict]:
    with open(path, newline="") as f:
        return list(csv.DictReader(f))


def _write_artifacts(out_dir, config: RunConfig, rows, verdict: dict) -> None:
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "config.json"), "w") as f:
        json.dump(config_to_dict(config), f, indent=1, sort_keys=True)
    write_metrics_csv(rows, os.path.join(out_dir, "metrics.csv"))
    with open(os.path.join(out_dir, "verdict.json"), "w") as f:
        json.dump(verdict, f, indent=1, sort_keys=True)


def _fan_out(fn, jobs: dict, workers: int) -> dict:
    """Run fn(**kwargs) for each keyed job, in worker processes when
    workers != 1; results merged by sorted key, so the outcome does not
    depend on scheduling."""
    if workers == 0:
        workers = os.cpu_count() or 1
    workers = min(workers, len(jobs)) or 1
    keys = sorted(jobs)
    if workers == 1:
        return {k: fn(**jobs[k]) for k in keys}
    with ProcessPoolExecutor(max_workers=workers) as pool:
        futures = {k: pool.submit(fn, **jobs[k]) for k in keys}
        return {k: futures[k].result() for k in keys}


def _majority(flags) -> bool:
    flags = list(flags)
    return sum(flags) * 3 >= len(flags) * 2


# ---------------------------------------------------------------------------
# Experiment workers (top level: must be picklable)


def _train_and_eval_teacher(config_dict: dict, tasks_seed_n: tuple,
                            reward_mode: str, seed: int):
    """Train one teacher on a generated task set; returns (final metrics
    tuple, learning-curve rows)."""
    config = config_from_dict(config_dict)
    task_seed, n_tasks = tasks_seed_n
    tasks = wm.generate_task_set(n_tasks, task_seed, config=config.env)
    mode = RewardMode(reward_mode)
    policy, curve = ppo_mod.train_teacher(tasks, mode, config.ppo, config.env,
                                          seed=seed, weights=config.weights)
    row = evaluate(policy, tasks, config.episodes_per_task, wm.NoiseConfig(),
                   config.env.thresholds, seed=seed * 7 + 1,
                   env_config=config.env)
    eval_points = [(it, steps, s) for it, steps, s, *_ in curve]
    return (row.success_rate, row.episode_count, row.mean_episode_length,
            eval_points)


def _moe_worker(config_dict: dict, seed: int):
    """Train the k-expert mixture and the single expert at equal
    per-expert budget; returns both success rates."""
    config = config_from_dict(config_dict)
    tasks = wm.generate_task_set(config.n_tasks, config.task_seed,
                                 config=config.env)
    ae, _ = cl.train_autoencoder([t.shape for t in tasks],
                                 epochs=config.cluster.ae_epochs,
                                 seed=seed,
                                 n_points=config.cluster.n_points,
                                 latent_dim=config.cluster.latent_dim)
    model = cl.cluster_tasks(tasks, ae, config.cluster.k, seed=seed)
    registry = cl.train_experts(tasks, model, ae, config.ppo, config.env,
                                seed=seed)
    single, _ = ppo_mod.train_teacher(tasks, RewardMode.MUTUAL, config.ppo,
                                      config.env, seed=seed,
                                      weights=config.weights)
    kw = dict(episodes_per_task=config.episodes_per_task,
              noise_config=wm.NoiseConfig(), thresholds=config.env.thresholds,
              seed=seed * 7 + 1, env_config=config.env)
    moe_row = evaluate(registry, tasks, **kw)
    single_row = evaluate(single, tasks, **kw)
    return (moe_row.success_rate, single_row.success_rate,
            moe_row.episode_count)


def _distill_worker(config_dict: dict, seed: int):
    """Teacher -> demos at each budget -> diffusion and BC students.
    Returns (teacher rate, {level: (diffusion rate, bc rate)}, episodes)."""
    config = config_from_dict(config_dict)
    tasks = wm.generate_task_set(config.n_tasks, config.task_seed,
                                 config=config.env)
    teacher, _ = ppo_mod.train_teacher(tasks, RewardMode.MUTUAL, config.ppo,
                                       config.env, seed=seed,
                                       weights=config.weights)
    kw = dict(episodes_per_task=config.episodes_per_task,
              noise_config=wm.NoiseConfig(), thresholds=config.env.thresholds,
              seed=seed * 7 + 1, env_config=config.env)
    teacher_row = evaluate(teacher, tasks, **kw)
    out = {}
    for level in config.distill_levels:
        demos, _ = ds.collect_demos(teacher, tasks, level, config.env,
                                    seed=seed * 31 + level,
                                    max_retries=config.data.max_retries)
        samples = ds.window_all(demos, config.data.t_p, config.data.t_o)
        dpol, _ = df.train_diffusion(samples, epochs=config.diffusion.epochs,
                                     seed=seed, T=config.diffusion.T,
                                     t_a=config.data.t_a,
                                     batch_size=config.diffusion.batch_size,
                                     step_size=config.diffusion.step_size,
                                     hidden=tuple(config.diffusion.hidden),
                                     forward=config.diffusion.forward)
        bpol, _ = df.bc_train(samples, epochs=config.diffusion.epochs,
                              seed=seed,
                              batch_size=config.diffusion.batch_size,
                              step_size=config.diffusion.step_size,
                              hidden=tuple(config.diffusion.hidden),
                              t_a=config.data.t_a)
        drow = evaluate(dpol, tasks, **kw)
        brow = evaluate(bpol, tasks, **kw)
        out[level] = (drow.success_rate, brow.success_rate)
    return teacher_row.success_rate, out, teacher_row.episode_count


def _grid_cell_worker(config_dict: dict, bundle_dir: str, task_args: tuple,
                      noise: tuple, scale: float, seed: int):
    config = config_from_dict(config_dict)
    n_tasks, task_seed = task_args
    tasks = wm.generate_task_set(n_tasks, task_seed, config=config.env)
    policy = df.load_policy_bundle(bundle_dir)
    row = evaluate(policy, tasks, config.episodes_per_task,
                   wm.NoiseConfig(noise[0], noise[1]),
                   config.env.thresholds.scaled(scale), seed=seed,
                   env_config=config.env)
    return row.success_rate, row.episode_count, row.mean_episode_length


# ---------------------------------------------------------------------------
# Experiments


def _exp_reward_compare(config: RunConfig, out_dir: str, log) -> dict:
    jobs = {(mode, seed): dict(config_dict=config_to_dict(config),
                               tasks_seed_n=(config.task_seed, config.n_tasks),
                               reward_mode=mode, seed=seed)
            for mode in ("mutual", "sum") for seed in config.seeds}
    results = _fan_out(_train_and_eval_teacher, jobs, config.workers)
    rows, series, finals = [], [], {}
    for (mode, seed), (rate, n_eps, mean_len, curve) in sorted(results.items()):
        finals[(mode, seed)] = rate
        rows.append(MetricsRow("reward-compare", mode, seed, rate, n_eps,
                               mean_len))
        for it, steps, s in curve:
            rows.append(MetricsRow("reward-compare", f"{mode}-curve", seed, s,
                                   n_eps, 0.0, env_steps=steps))
        series.append((f"{mode} seed {seed}", [c[1] for c in curve],
                       [c[2] for c in curve]))
        if log:
            log(f"reward-compare {mode} seed {seed}: {rate:.3f}")
    ok_flags = [finals[("mutual", s)] >= 0.70 and finals[("sum", s)] <= 0.20
                for s in config.seeds]
    verdict = {
        "predicate": ("mutual eval success >= 0.70 and sum <= 0.20 on >= 2/3 "
                      "seeds at equal budget"),
        "inputs": {f"{m}/seed{s}": finals[(m, s)]
                   for m in ("mutual", "sum") for s in config.seeds},
        "pass": _majority(ok_flags),
    }
    plots.line_plot(series, os.path.join(out_dir, "curves.svg"),
                    "Mutual vs summed reward shaping", "env steps",
                    "eval success rate", ylim=(0, 1.05))
    _write_artifacts(out_dir, config, rows, verdict)
    return verdict


def _exp_moe(config: RunConfig, out_dir: str, log) -> dict:
    jobs = {seed: dict(config_dict=config_to_dict(config), seed=seed)
            for seed in config.seeds}
    results = _fan_out(_moe_worker, jobs, config.workers)
    rows, gains = [], []
    for seed in config.seeds:
        moe, single, n_eps = results[seed]
        rows.append(MetricsRow("moe", "mixture", seed, moe, n_eps, 0.0))
        rows.append(MetricsRow("moe", "single", seed, single, n_eps, 0.0))
        gains.append(moe - single)
        if log:
            log(f"moe seed {seed}: mixture {moe:.3f} single {single:.3f}")
    verdict = {
        "predicate": "mixture success >= single-expert success + 0.05 on >= 2/3 seeds",
        "inputs": {f"seed{s}": {"mixture": results[s][0], "single": results[s][1]}
                   for s in config.seeds},
        "pass": _majority(g >= 0.05 for g in gains),
    }
    plots.bar_plot([f"seed {s}" for s in config.seeds],
                   [("mixture", [results[s][0] for s in config.seeds]),
                    ("single", [results[s][1] for s in config.seeds])],
                   os.path.join(out_dir, "moe.svg"),
                   "Mixture of experts vs single expert", "success rate")
    _write_artifacts(out_dir, config, rows, verdict)
    return verdict


def _exp_distill_sweep(config: RunConfig, out_dir: str, log) -> dict:
    jobs = {seed: dict(config_dict=config_to_dict(config), seed=seed)
            for seed in config.seeds}
    results = _fan_out(_distill_worker, jobs, config.workers)
    rows, per_seed_ok = [], []
    levels = list(config.distill_levels)
    for seed in config.seeds:
        teacher, by_level, n_eps = results[seed]
        rows.append(MetricsRow("distill-sweep", "teacher", seed, teacher,
                               n_eps, 0.0))
        gaps = {}
        for level in levels:
            drate, brate = by_level[level]
            rows.append(MetricsRow("distill-sweep", f"diffusion@{level}", seed,
                                   drate, n_eps, 0.0))
            rows.append(MetricsRow("distill-sweep", f"bc@{level}", seed,
                                   brate, n_eps, 0.0))
            gaps[level] = drate - brate
        dominance = all(gaps[lv] >= 0.0 for lv in levels)
        gap_largest_low = gaps[levels[0]] >= max(gaps[lv] for lv in levels[1:])
        near_teacher = by_level[levels[-1]][0] >= 0.9 * teacher
        per_seed_ok.append((dominance and gap_largest_low, near_teacher))
        if log:
            log(f"distill seed {seed}: teacher {teacher:.3f} "
                + " ".join(f"d@{lv}={by_level[lv][0]:.3f} b@{lv}={by_level[lv][1]:.3f}"
                           for lv in levels))
    verdict = {
        "predicate": ("diffusion >= BC at every demo level with the largest "
                      "gap at the lowest level on >= 2/3 seeds; diffusion at "
                      "the highest level >= 0.9 x teacher on >= 2/3 seeds"),
        "inputs": {f"seed{s}": {"teacher": results[s][0],
                                "levels": {str(lv): list(results[s][1][lv])
                                           for lv in levels}}
                   for s in config.seeds},
        "pass": (_majority(ok for ok, _ in per_seed_ok)
                 and _majority(nt for _, nt in per_seed_ok)),
    }
    series = []
    for kind, idx in (("diffusion", 0), ("bc", 1)):
        for seed in config.seeds:
            series.append((f"{kind} seed {seed}", levels,
                           [results[seed][1][lv][idx] for lv in levels]))
    plots.line_plot(series, os.path.join(out_dir, "distill.svg"),
                    "Student success vs demonstrations per goal",
                    "demonstrations per goal", "success rate", ylim=(0, 1.05))
    _write_artifacts(out_dir, config, rows, verdict)
    return verdict


def _exp_robustness_grid(config: RunConfig, out_dir: str, log,
                         student_bundle: str | None = None) -> dict:
    seed = config.seeds[0]
    if student_bundle is None:
        # Train the pipeline once: teacher -> demos -> diffusion student.
        tasks = wm.generate_task_set(config.n_tasks, config.task_seed,
                                     config=config.env)
        teacher, _ = ppo_mod.train_teacher(tasks, RewardMode.MUTUAL,
                                           config.ppo, config.env, seed=seed,
                                           weights=config.weights)
        demos, _ = ds.collect_demos(teacher, tasks, config.data.demos_per_goal,
                                    config.env, seed=seed * 31,
                                    max_retries=config.data.max_retries)
        samples = ds.window_all(demos, config.data.t_p, config.data.t_o)
        student, _ = df.train_diffusion(
            samples, epochs=config.diffusion.epochs, seed=seed,
            T=config.diffusion.T, t_a=config.data.t_a,
            batch_size=config.diffusion.batch_size,
            step_size=config.diffusion.step_size,
            hidden=tuple(config.diffusion.hidden),
            forward=config.diffusion.forward)
        student_bundle = os.path.join(out_dir, "student")
        df.save_policy_bundle(student, student_bundle)
    jobs = {}
    for ni, noise in enumerate(config.noise_levels):
        for scale in config.threshold_scales:
            jobs[(ni, scale)] = dict(
                config_dict=config_to_dict(config), bundle_dir=student_bundle,
                task_args=(config.n_tasks, config.task_seed),
                noise=tuple(noise), scale=scale, seed=seed * 7 + 1)
    results = _fan_out(_grid_cell_worker, jobs, config.workers)
    rows, grid = [], np.zeros((len(config.noise_levels),
                               len(config.threshold_scales)))
    for (ni, scale), (rate, n_eps, mean_len) in sorted(results.items()):
        si = config.threshold_scales.index(scale)
        grid[ni, si] = rate
        noise = config.noise_levels[ni]
        rows.append(MetricsRow(
            "robustness-grid",
            f"noise_pos={noise[0]};noise_ori={noise[1]};scale={scale}",
            seed, rate, n_eps, mean_len))
        if log:
            log(f"grid noise={noise} scale={scale}: {rate:.3f}")
    mono_noise = all(grid[i + 1, j] <= grid[i, j] + 1e-12
                     for i in range(grid.shape[0] - 1)
                     for j in range(grid.shape[1]))
    mono_scale = all(grid[i, j] <= grid[i, j + 1] + 1e-12
                     for i in range(grid.shape[0])
                     for j in range(grid.shape[1] - 1))
    verdict = {
        "predicate": ("success monotone non-increasing in observation noise "
                      "at fixed threshold scale and monotone non-decreasing "
                      "in threshold scale at fixed noise"),
        "inputs": {"grid_rows_noise_cols_scale": grid.tolist(),
                   "noise_levels": [list(n) for n in config.noise_levels],
                   "threshold_scales": list(config.threshold_scales)},
        "pass": bool(mono_noise and mono_scale),
    }
    plots.heatmap(grid,
                  [f"{n[0]:g}/{n[1]:g}" for n in config.noise_levels],
                  [f"{s:g}x" for s in config.threshold_scales],
                  os.path.join(out_dir, "grid.svg"),
                  "Student success: noise vs threshold scale",
                  "threshold scale", "noise (pos/ori)")
    _write_artifacts(out_dir, config, rows, verdict)
    return verdict


def _exp_scale_sweep(config: RunConfig, out_dir: str, log) -> dict:
    jobs = {(n, seed): dict(config_dict=config_to_dict(config),
                            tasks_seed_n=(config.task_seed, n),
                            reward_mode="mutual", seed=seed)
            for n in config.scale_sizes for seed in config.seeds}
    results = _fan_out(_train_and_eval_teacher, jobs, config.workers)
    rows, per_seed_ok = [], []
    for seed in config.seeds:
        rates = {n: results[(n, seed)][0] for n in config.scale_sizes}
        for n in config.scale_sizes:
            rate, n_eps, mean_len, _ = results[(n, seed)]
            rows.append(MetricsRow("scale-sweep", f"tasks={n}", seed, rate,
                                   n_eps, mean_len))
        smallest = config.scale_sizes[0]
        per_seed_ok.append(rates[smallest] >= 0.95 and all(
            rates[n] < rates[smallest] for n in config.scale_sizes[1:]))
        if log:
            log(f"scale seed {seed}: " + " ".join(
                f"{n}->{rates[n]:.3f}" for n in config.scale_sizes))
    verdict = {
        "predicate": ("success >= 0.95 at the smallest task count and "
                      "strictly lower at every larger count, on >= 2/3 seeds"),
        "inputs": {f"seed{s}": {str(n): results[(n, s)][0]
                                for n in config.scale_sizes}
                   for s in config.seeds},
        "pass": _majority(per_seed_ok),
    }
    series = [(f"seed {s}", list(config.scale_sizes),
               [results[(n, s)][0] for n in config.scale_sizes])
              for s in config.seeds]
    plots.line_plot(series, os.path.join(out_dir, "scale.svg"),
                    "One-stage PPO vs task-set size", "tasks in suite",
                    "success rate", ylim=(0, 1.05))
    _write_artifacts(out_dir, config, rows, verdict)
    return verdict


_RUNNERS = {
    "reward-compare": _exp_reward_compare,
    "moe": _exp_moe,
    "distill-sweep": _exp_distill_sweep,
    "robustness-grid": _exp_robustness_grid,
    "scale-sweep": _exp_scale_sweep,
}


def run_experiment(name: str, config: RunConfig, log=None, **kwargs) -> dict:
    """Run one named experiment; returns the verdict dict and writes
    config.json, metrics.csv, figures, and verdict.json under
    <out_dir>/<name>/."""
    if name not in _RUNNERS:
        raise ConfigurationError(
            f"unknown experiment '{name}'; valid: {', '.join(EXPERIMENTS)}")
    out_dir = os.path.join(config.out_dir, name)
    os.makedirs(out_dir, exist_ok=True)
    return _RUNNERS[name](config, out_dir, log, **kwargs)
