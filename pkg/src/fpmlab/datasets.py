"""Demonstration collection, sliding-window samples, task splits, and
binary dataset persistence.

Stored trajectories carry only the student view: noiseless student
observations and applied (post-clip) actions in raw env units. Teacher
privileged fields are never persisted.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass, field

import numpy as np

from . import ppo as ppo_mod
from . import worldmodel as wm
from .errors import FormatError, ShapeError
from .tensorcore import RngStream

DATASET_MAGIC = b"FPMDS1"


@dataclass
class Trajectory:
    goal_id: int
    observations: np.ndarray  # (L, obs_dim) noiseless student view
    actions: np.ndarray       # (L, act_dim) applied post-clip actions
    success: bool
    cluster_id: int = -1
    init_state: wm.EnvState | None = None  # recorded reset, for replay audits

    @property
    def length(self) -> int:
        return self.observations.shape[0]


@dataclass
class WindowSample:
    obs_window: np.ndarray     # (T_o, obs_dim), front-padded
    action_window: np.ndarray  # (T_p, act_dim)


@dataclass
class SplitSpec:
    train_ids: list[int]
    test_ids: list[int]
    ratio: float = 0.7
    train: list = field(default_factory=list)    # Task objects
    holdout: list = field(default_factory=list)  # Task objects


def split_tasks(task_set, ratio: float = 0.7, seed: int = 0) -> SplitSpec:
    """Stratified split: shuffle within each shape family, cut at the
    ratio. A family with a single goal goes to train."""
    if not task_set:
        raise ValueError("task set is empty")
    rng = RngStream(seed)
    families: dict[int, list[int]] = {}
    for t in task_set:
        families.setdefault(t.shape.family, []).append(t.goal_id)
    train, test = [], []
    for fam in sorted(families):
        ids = sorted(families[fam])
        order = rng.split(fam).permutation(len(ids))
        shuffled = [ids[i] for i in order]
        if len(shuffled) < 2:
            train.extend(shuffled)
            continue
        n_train = int(round(ratio * len(shuffled)))
        n_train = min(max(n_train, 1), len(shuffled) - 1)
        train.extend(shuffled[:n_train])
        test.extend(shuffled[n_train:])
    train, test = sorted(train), sorted(test)
    by_id = {t.goal_id: t for t in task_set}
    return SplitSpec(train, test, ratio,
                     [by_id[i] for i in train], [by_id[i] for i in test])


def collect_demos(policy_or_registry, task_list, demos_per_goal: int,
                  env_config: wm.EnvConfig, seed: int,
                  max_retries: int = 5, log=None):
    """Roll out the deterministic (mean) teacher per task, keep successful
    episodes only, retrying up to ``max_retries`` extra resets per demo.
    Returns (trajectories, per-goal yield dict)."""
    a_scale = ppo_mod.action_scale(env_config)
    o_scale = None  # set per policy kind below
    root = RngStream(seed)
    trajectories = []
    yields = {}
    for ti, task in enumerate(task_list):
        if hasattr(policy_or_registry, "policy_for"):
            policy = policy_or_registry.policy_for(task)
            cid = policy_or_registry.route(task)
        else:
            policy = policy_or_registry
            cid = -1
        scripted = hasattr(policy, "act") and not hasattr(policy, "mean")
        o_scale = ppo_mod.observation_scale("teacher", env_config)
        task_rng = root.split(task.goal_id)
        got = 0
        attempts = 0
        budget = demos_per_goal * (1 + max_retries)
        while got < demos_per_goal and attempts < budget:
            rng = task_rng.split(attempts)
            attempts += 1
            state = wm.reset(env_config, task.shape, task.goal, rng)
            init_state = state
            obs_rows, act_rows = [], []
            success = False
            for _ in range(env_config.max_steps):
                if scripted:
                    action = policy.act(state, task.goal, task.shape)
                else:
                    teacher_obs = wm.observe_teacher(state, task.goal, task.shape)
                    action = policy.mean(teacher_obs * o_scale) * a_scale
                res = wm.step(state, action, task.shape, task.goal, env_config)
                obs_rows.append(wm.observe_student(state, task.goal, wm.NoiseConfig()))
                act_rows.append(res.next_state.prev_action.copy())
                state = res.next_state
                if res.done:
                    success = res.success
                    break
            if success:
                trajectories.append(Trajectory(
                    task.goal_id, np.asarray(obs_rows), np.asarray(act_rows),
                    True, cid, init_state))
                got += 1
        yields[task.goal_id] = got
        if got == 0 and log:
            log(f"goal {task.goal_id}: no successful demo in {attempts} attempts, excluded")
    return trajectories, yields


def replay_reset(trajectory: Trajectory, task, env_config: wm.EnvConfig):
    """Initial env state a recorded trajectory started from, for open-loop
    replay audits."""
    if trajectory.init_state is None:
        raise ValueError("trajectory carries no recorded initial state")
    return trajectory.init_state


def window(trajectory: Trajectory, t_p: int, t_o: int) -> list[WindowSample]:
    """max(0, L - T_p + 1) samples; window j covers actions [j, j+T_p) and
    observations [j-T_o+1, j], front-padded by repeating the first
    observation."""
    if t_p < 1 or t_o < 1:
        raise ValueError("horizons must be >= 1")
    L = trajectory.length
    samples = []
    for j in range(L - t_p + 1):
        idx = np.clip(np.arange(j - t_o + 1, j + 1), 0, L - 1)
        samples.append(WindowSample(trajectory.observations[idx].copy(),
                                    trajectory.actions[j:j + t_p].copy()))
    return samples


def window_all(trajectories, t_p: int, t_o: int) -> list[WindowSample]:
    out = []
    for tr in trajectories:
        out.extend(window(tr, t_p, t_o))
    return out


def save_dataset(samples, path, t_o: int | None = None, t_p: int | None = None):
    """Binary format: magic, dims header, sample count, sha256 content
    hash, then packed little-endian f64 records (obs window || action
    window). Bit-exact round trip."""
    samples = list(samples)
    if samples:
        t_o_eff, obs_dim = samples[0].obs_window.shape
        t_p_eff, act_dim = samples[0].action_window.shape
        for s in samples:
            if s.obs_window.shape != (t_o_eff, obs_dim) or \
               s.action_window.shape != (t_p_eff, act_dim):
                raise ShapeError("inconsistent window shapes in dataset")
    else:
        t_o_eff, t_p_eff, obs_dim, act_dim = t_o or 1, t_p or 1, 0, 0
    payload = b"".join(
        s.obs_window.astype("<f8").tobytes() + s.action_window.astype("<f8").tobytes()
        for s in samples)
    digest = hashlib.sha256(payload).digest()
    with open(path, "wb") as f:
        f.write(DATASET_MAGIC)
        f.write(struct.pack("<IIIIQ", obs_dim, act_dim, t_o_eff, t_p_eff, len(samples)))
        f.write(digest)
        f.write(payload)


def load_dataset(path) -> list[WindowSample]:
    with open(path, "rb") as f:
        data = f.read()
    if data[:6] != DATASET_MAGIC:
        raise FormatError(f"bad dataset magic in {path}")
    try:
        obs_dim, act_dim, t_o, t_p, count = struct.unpack_from("<IIIIQ", data, 6)
    except struct.error as exc:
        raise FormatError(f"truncated dataset header in {path}") from exc
    off = 6 + 24
    digest = data[off:off + 32]
    off += 32
    rec = 8 * (t_o * obs_dim + t_p * act_dim)
    payload = data[off:]
    if len(digest) != 32 or len(payload) != rec * count:
        raise FormatError(f"truncated dataset payload in {path}")
    if hashlib.sha256(payload).digest() != digest:
        raise FormatError(f"dataset content hash mismatch in {path}")
    samples = []
    for i in range(count):
        chunk = np.frombuffer(payload, dtype="<f8",
                              count=t_o * obs_dim + t_p * act_dim,
                              offset=i * rec)
        samples.append(WindowSample(
            chunk[:t_o * obs_dim].reshape(t_o, obs_dim).copy(),
            chunk[t_o * obs_dim:].reshape(t_p, act_dim).copy()))
    return samples
