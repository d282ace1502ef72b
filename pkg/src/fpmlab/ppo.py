"""Clipped-surrogate PPO with generalized advantage estimation.

Trains Gaussian teacher policies on privileged observations (or one-stage
policies on student observations) against either reward mode. Rollouts
run E independent environment copies in lockstep with batched network
forwards; every random draw comes from a per-env split stream, so results
are bit-reproducible and independent of iteration order.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import worldmodel as wm
from .errors import NumericError
from .rewards import RewardMode, RewardWeights, total_reward
from .tensorcore import (AdamHyper, AdamState, Mlp, RngStream, adam_step,
                         mlp_backward, mlp_forward, mlp_init)

LOG_2PI = math.log(2.0 * math.pi)


def action_scale(env_config: wm.EnvConfig) -> np.ndarray:
    """PPO policies act in normalized units (~[-1, 1] per dim); the runner
    multiplies by the per-component env bounds before application."""
    m = env_config.n_fingers
    return np.array([env_config.max_base_step, env_config.max_base_step]
                    + [env_config.max_joint_step] * m)


def observation_scale(observe: str, env_config: wm.EnvConfig) -> np.ndarray:
    """Fixed diagonal input scaling so positions, deltas, and distances all
    land at O(1) for the tanh nets. Purely a network input transform; the
    worldmodel observation contracts stay in raw units."""
    m = env_config.n_fingers
    if observe == "teacher":
        return np.array(
            [0.2, 0.5] + [1.0] * m          # x_h, z_h, Jf
            + [10.0] * (2 + m)              # prev applied action
            + [0.2, 1.0, 1.0]               # x_o, cos/sin theta_o
            + [0.5, 0.5]                    # relative pose
            + [1.0, 1.0]                    # R, c
            + [1.0] * 4 + [1.0] * m         # goal
            + [0.5, 0.5, 1.0])              # distances
    return np.array([0.2, 0.5] + [1.0] * m + [0.5, 0.5, 1.0, 1.0]
                    + [1.0] * 4 + [1.0] * m)


@dataclass
class PpoConfig:
    gamma: float = 0.99
    lam: float = 0.95
    clip: float = 0.2
    epochs: int = 4
    minibatches: int = 4
    entropy_coef: float = 0.003
    value_coef: float = 0.5
    step_size: float = 3e-4
    n_envs: int = 16
    horizon: int = 256
    total_steps: int = 500_000
    hidden: tuple[int, ...] = (64, 64)
    activation: str = "tanh"
    log_std_init: float = -0.5
    log_std_min: float = -5.0
    log_std_max: float = 1.0
    eval_every: int = 10
    eval_episodes: int = 64
    anneal: bool = False  # linearly decay step size and entropy bonus to 0
    # Training-time reward multiplier. The optimal policy is unchanged
    # (advantages are normalized), but the critic regresses targets of
    # order 1 instead of order w_succ, which it can fit quickly.
    reward_scale: float = 1.0
    # Divide rewards by the running std of the discounted return
    # (VecNormalize convention). Tames the large terminal bonus relative
    # to the per-step shaping so the critic tracks both regimes.
    normalize_rewards: bool = False


@dataclass
class GaussianPolicy:
    mean_net: Mlp
    log_std: np.ndarray

    @property
    def obs_dim(self) -> int:
        return self.mean_net.layer_sizes[0]

    @property
    def act_dim(self) -> int:
        return self.mean_net.layer_sizes[-1]

    def mean(self, obs) -> np.ndarray:
        return mlp_forward(self.mean_net, obs)

    def copy(self) -> "GaussianPolicy":
        return GaussianPolicy(
            Mlp(list(self.mean_net.layer_sizes), self.mean_net.activation,
                self.mean_net.weights.copy()),
            self.log_std.copy())


def make_policy(obs_dim: int, act_dim: int, config: PpoConfig, seed) -> GaussianPolicy:
    net = mlp_init([obs_dim, *config.hidden, act_dim], config.activation, seed)
    # shrink the output layer so the initial mean action is near zero
    n_last = (net.layer_sizes[-2] + 1) * net.layer_sizes[-1]
    net.weights[-n_last:] *= 0.01
    return GaussianPolicy(net, np.full(act_dim, config.log_std_init))


def make_value(obs_dim: int, config: PpoConfig, seed) -> Mlp:
    return mlp_init([obs_dim, *config.hidden, 1], config.activation, seed)


def log_prob(policy: GaussianPolicy, obs_mean: np.ndarray, actions: np.ndarray) -> np.ndarray:
    """Diagonal-Gaussian log density at ``actions`` given precomputed means."""
    std = np.exp(policy.log_std)
    z = (actions - obs_mean) / std
    return -0.5 * np.sum(z * z, axis=-1) - np.sum(policy.log_std) - 0.5 * policy.act_dim * LOG_2PI


def sample_action(policy: GaussianPolicy, obs, rng: RngStream):
    """Draw an unclipped Gaussian action; the env clips on application."""
    mean = policy.mean(np.asarray(obs, dtype=np.float64))
    if not np.all(np.isfinite(mean)):
        raise NumericError("policy mean is non-finite")
    noise = rng.normal(size=policy.act_dim)
    action = mean + np.exp(policy.log_std) * noise
    return action, float(log_prob(policy, mean, action))


@dataclass
class RolloutBuffer:
    """Per-step records over E envs x T steps (time-major arrays)."""
    obs: np.ndarray        # (T, E, obs_dim)
    actions: np.ndarray    # (T, E, act_dim)
    log_probs: np.ndarray  # (T, E)
    rewards: np.ndarray    # (T, E)
    values: np.ndarray     # (T, E)
    dones: np.ndarray      # (T, E) treated as float 0/1
    bootstrap_values: np.ndarray  # (E,) value of the state after the last step

    @classmethod
    def allocate(cls, T: int, E: int, obs_dim: int, act_dim: int) -> "RolloutBuffer":
        return cls(obs=np.zeros((T, E, obs_dim)),
                   actions=np.zeros((T, E, act_dim)),
                   log_probs=np.zeros((T, E)),
                   rewards=np.zeros((T, E)),
                   values=np.zeros((T, E)),
                   dones=np.zeros((T, E)),
                   bootstrap_values=np.zeros(E))


def compute_gae(buffer: RolloutBuffer, gamma: float, lam: float):
    """delta_t = r_t + gamma V(s_{t+1}) (1-done) - V(s_t);
    A_t = delta_t + gamma lam (1-done) A_{t+1}; returns = A + V.

    Advantages are returned raw; ppo_update normalizes per iteration.
    """
    T, E = buffer.rewards.shape
    adv = np.zeros((T, E))
    next_values = np.vstack([buffer.values[1:], buffer.bootstrap_values[None, :]])
    not_done = 1.0 - buffer.dones
    last = np.zeros(E)
    for t in range(T - 1, -1, -1):
        delta = buffer.rewards[t] + gamma * next_values[t] * not_done[t] - buffer.values[t]
        last = delta + gamma * lam * not_done[t] * last
        adv[t] = last
    return adv, adv + buffer.values


def _policy_params(policy: GaussianPolicy) -> np.ndarray:
    return np.concatenate([policy.mean_net.weights, policy.log_std])


def _set_policy_params(policy: GaussianPolicy, params: np.ndarray, config: PpoConfig):
    n = policy.mean_net.weights.size
    policy.mean_net.weights = params[:n].copy()
    policy.log_std = np.clip(params[n:], config.log_std_min, config.log_std_max)


def surrogate_and_grads(policy: GaussianPolicy, obs, actions, logp_old, adv,
                        config: PpoConfig):
    """Clipped-surrogate objective (with entropy bonus) and its exact
    gradient w.r.t. the flat policy parameter vector. Loss is minimized."""
    mean = mlp_forward(policy.mean_net, obs)
    std = np.exp(policy.log_std)
    z = (actions - mean) / std
    logp = -0.5 * np.sum(z * z, axis=1) - np.sum(policy.log_std) \
        - 0.5 * policy.act_dim * LOG_2PI
    ratio = np.exp(logp - logp_old)
    n = obs.shape[0]
    surr1 = ratio * adv
    surr2 = np.clip(ratio, 1.0 - config.clip, 1.0 + config.clip) * adv
    entropy = float(np.sum(policy.log_std) + 0.5 * policy.act_dim * (1.0 + LOG_2PI))
    loss = -float(np.mean(np.minimum(surr1, surr2))) - config.entropy_coef * entropy

    active = (surr1 <= surr2).astype(np.float64)  # unclipped branch in the min
    dloss_dlogp = -(adv * ratio * active) / n
    gout_mean = dloss_dlogp[:, None] * (z / std)
    pgrad_mean, _ = mlp_backward(policy.mean_net, obs, gout_mean)
    grad_log_std = np.sum(dloss_dlogp[:, None] * (z * z - 1.0), axis=0) \
        - config.entropy_coef
    grad = np.concatenate([pgrad_mean, grad_log_std])

    clip_frac = float(np.mean(np.abs(ratio - 1.0) > config.clip))
    approx_kl = float(np.mean(logp_old - logp))
    return loss, grad, {"entropy": entropy, "clip_fraction": clip_frac,
                        "approx_kl": approx_kl}


def value_loss_and_grads(value_net: Mlp, obs, returns, coef: float):
    v = mlp_forward(value_net, obs)[:, 0]
    err = v - returns
    loss = 0.5 * coef * float(np.mean(err * err))
    gout = (coef * err / obs.shape[0])[:, None]
    grad, _ = mlp_backward(value_net, obs, gout)
    return loss, grad


def ppo_update(policy: GaussianPolicy, value_net: Mlp, buffer: RolloutBuffer,
               config: PpoConfig, rng: RngStream,
               policy_opt: AdamState, value_opt: AdamState):
    """Epochs x minibatches of clipped-surrogate + value regression."""
    T, E = buffer.rewards.shape
    n = T * E
    obs = buffer.obs.reshape(n, -1)
    actions = buffer.actions.reshape(n, -1)
    logp_old = buffer.log_probs.reshape(n)
    adv, returns = compute_gae(buffer, config.gamma, config.lam)
    adv = adv.reshape(n)
    returns = returns.reshape(n)
    adv = (adv - adv.mean()) / (adv.std() + 1e-8)

    hyper = AdamHyper(step_size=config.step_size)
    stats = {"policy_loss": 0.0, "value_loss": 0.0, "entropy": 0.0,
             "clip_fraction": 0.0, "approx_kl": 0.0}
    count = 0
    for _ in range(config.epochs):
        order = rng.permutation(n)
        for mb in np.array_split(order, config.minibatches):
            ploss, pgrad, info = surrogate_and_grads(
                policy, obs[mb], actions[mb], logp_old[mb], adv[mb], config)
            vloss, vgrad = value_loss_and_grads(value_net, obs[mb], returns[mb],
                                                config.value_coef)
            if not (np.isfinite(ploss) and np.isfinite(vloss)):
                raise NumericError("non-finite PPO loss")
            params, policy_opt = adam_step(_policy_params(policy), pgrad, policy_opt, hyper)
            _set_policy_params(policy, params, config)
            value_net.weights, value_opt = adam_step(value_net.weights, vgrad,
                                                     value_opt, hyper)
            stats["policy_loss"] += ploss
            stats["value_loss"] += vloss
            stats["entropy"] += info["entropy"]
            stats["clip_fraction"] += info["clip_fraction"]
            stats["approx_kl"] += info["approx_kl"]
            count += 1
    for k in stats:
        stats[k] /= count
    return stats, policy_opt, value_opt


# ---------------------------------------------------------------------------
# Environment runner


class VecRunner:
    """E independent env copies stepped in lockstep. Each env owns a split
    RNG chain (resets, task draws, action noise), so the merged rollout is
    deterministic and independent of env ordering."""

    def __init__(self, tasks, env_config: wm.EnvConfig, seed_stream: RngStream,
                 observe: str = "teacher", reward_mode: RewardMode = RewardMode.MUTUAL,
                 weights: RewardWeights | None = None,
                 noise: wm.NoiseConfig | None = None, n_envs: int = 16):
        self.tasks = list(tasks)
        self.cfg = env_config
        self.observe = observe
        self.reward_mode = reward_mode
        self.weights = weights or RewardWeights()
        self.noise = noise or wm.NoiseConfig()
        self.n_envs = n_envs
        self.action_scale = action_scale(env_config)
        self.obs_scale = observation_scale(observe, env_config)
        self.env_streams = [seed_stream.split(i) for i in range(n_envs)]
        self.episode_counters = [0] * n_envs
        self.states = [None] * n_envs
        self.cur_tasks = [None] * n_envs
        self.obs_rngs = [None] * n_envs
        for i in range(n_envs):
            self._reset_env(i)

    def _reset_env(self, i: int):
        ep_stream = self.env_streams[i].split(self.episode_counters[i])
        self.episode_counters[i] += 1
        idx = int(ep_stream.integers(0, len(self.tasks)))
        task = self.tasks[idx]
        self.cur_tasks[i] = task
        self.states[i] = wm.reset(self.cfg, task.shape, task.goal, ep_stream)
        self.obs_rngs[i] = ep_stream.split(1 << 20)

    def _observe(self, i: int) -> np.ndarray:
        s, t = self.states[i], self.cur_tasks[i]
        if self.observe == "teacher":
            return wm.observe_teacher(s, t.goal, t.shape)
        return wm.observe_student(s, t.goal, self.noise, self.obs_rngs[i])

    def obs_matrix(self) -> np.ndarray:
        return np.stack([self._observe(i) for i in range(self.n_envs)]) * self.obs_scale

    def step_all(self, actions: np.ndarray):
        """Apply one normalized action per env; auto-reset finished envs.
        Returns (rewards, dones, reasons)."""
        rewards = np.zeros(self.n_envs)
        dones = np.zeros(self.n_envs)
        reasons = []
        scaled = actions * self.action_scale
        for i in range(self.n_envs):
            t = self.cur_tasks[i]
            res = wm.step(self.states[i], scaled[i], t.shape, t.goal, self.cfg)
            base = res.next_state.prev_action[:2]
            rewards[i] = total_reward(self.reward_mode, res.distances, base,
                                      res.success, self.cfg.thresholds, self.weights)
            reasons.append(res.reason)
            if res.done:
                dones[i] = 1.0
                self._reset_env(i)
            else:
                self.states[i] = res.next_state
        return rewards, dones, reasons


class ReturnNormalizer:
    """Running normalizer for rewards (VecNormalize convention): tracks a
    per-env discounted return and the running variance of that return;
    rewards are divided by the return's standard deviation. State persists
    across rollouts so the scale estimate keeps improving."""

    def __init__(self, n_envs: int, gamma: float, clip: float = 10.0):
        self.gamma = gamma
        self.clip = clip
        self.ret = np.zeros(n_envs)
        self.count = 0
        self.mean = 0.0
        self.m2 = 0.0

    def __call__(self, rewards: np.ndarray, dones: np.ndarray) -> np.ndarray:
        self.ret = self.ret * self.gamma + rewards
        batch = self.ret
        # Chan et al. parallel variance update with the incoming batch
        b_n = batch.size
        b_mean = float(batch.mean())
        b_m2 = float(((batch - b_mean) ** 2).sum())
        delta = b_mean - self.mean
        total = self.count + b_n
        self.mean += delta * b_n / total
        self.m2 += b_m2 + delta * delta * self.count * b_n / total
        self.count = total
        var = self.m2 / self.count if self.count > 1 else 1.0
        self.ret = self.ret * (1.0 - dones)
        return np.clip(rewards / np.sqrt(var + 1e-8), -self.clip, self.clip)


def collect_rollout(policy: GaussianPolicy, value_net: Mlp, runner: VecRunner,
                    config: PpoConfig, normalizer: ReturnNormalizer | None = None
                    ) -> RolloutBuffer:
    T, E = config.horizon, runner.n_envs
    do, da = policy.obs_dim, policy.act_dim
    buf = RolloutBuffer(
        obs=np.zeros((T, E, do)), actions=np.zeros((T, E, da)),
        log_probs=np.zeros((T, E)), rewards=np.zeros((T, E)),
        values=np.zeros((T, E)), dones=np.zeros((T, E)),
        bootstrap_values=np.zeros(E))
    std = np.exp(policy.log_std)
    for t in range(T):
        obs = runner.obs_matrix()
        mean = mlp_forward(policy.mean_net, obs)
        if not np.all(np.isfinite(mean)):
            raise NumericError("policy mean is non-finite during rollout")
        noise = np.stack([runner.obs_rngs[i].normal(size=da) for i in range(E)])
        actions = mean + std * noise
        buf.obs[t] = obs
        buf.actions[t] = actions
        buf.log_probs[t] = log_prob(policy, mean, actions)
        buf.values[t] = mlp_forward(value_net, obs)[:, 0]
        rewards, buf.dones[t], _ = runner.step_all(actions)
        rewards = rewards * config.reward_scale
        if normalizer is not None:
            rewards = normalizer(rewards, buf.dones[t])
        buf.rewards[t] = rewards
    buf.bootstrap_values = mlp_forward(value_net, runner.obs_matrix())[:, 0]
    return buf


def evaluate_policy(policy: GaussianPolicy, tasks, env_config: wm.EnvConfig,
                    seed: int, episodes: int = 64, observe: str = "teacher",
                    noise: wm.NoiseConfig | None = None) -> float:
    """Deterministic (policy-mean) success rate over a fixed episode grid,
    tasks cycled round-robin, all episodes stepped in lockstep."""
    noise = noise or wm.NoiseConfig()
    a_scale = action_scale(env_config)
    o_scale = observation_scale(observe, env_config)
    root = RngStream(seed)
    eps = []
    for e in range(episodes):
        task = tasks[e % len(tasks)]
        rng = root.split(e)
        state = wm.reset(env_config, task.shape, task.goal, rng)
        eps.append({"task": task, "state": state, "rng": rng.split(1 << 20),
                    "done": False, "success": False})
    for _ in range(env_config.max_steps):
        live = [ep for ep in eps if not ep["done"]]
        if not live:
            break
        if observe == "teacher":
            obs = np.stack([wm.observe_teacher(ep["state"], ep["task"].goal,
                                               ep["task"].shape) for ep in live])
        else:
            obs = np.stack([wm.observe_student(ep["state"], ep["task"].goal,
                                               noise, ep["rng"]) for ep in live])
        actions = mlp_forward(policy.mean_net, obs * o_scale) * a_scale
        for ep, a in zip(live, actions):
            res = wm.step(ep["state"], a, ep["task"].shape, ep["task"].goal, env_config)
            ep["state"] = res.next_state
            if res.done:
                ep["done"] = True
                ep["success"] = res.success
    return float(np.mean([ep["success"] for ep in eps]))


def train_teacher(task_set, reward_mode: RewardMode, ppo_config: PpoConfig,
                  env_config: wm.EnvConfig, seed: int,
                  observe: str = "teacher",
                  weights: RewardWeights | None = None):
    """Full PPO training loop. Returns (best-eval policy, learning curve);
    curve rows: (iteration, env_steps, eval_success_rate, policy_loss,
    value_loss, entropy, clip_fraction)."""
    if not task_set:
        raise ValueError("task set is empty")
    root = RngStream(seed)
    if observe == "teacher":
        obs_dim = wm.teacher_obs_dim(env_config.n_fingers)
    else:
        obs_dim = wm.student_obs_dim(env_config.n_fingers)
    act_dim = env_config.action_dim
    policy = make_policy(obs_dim, act_dim, ppo_config, root.split(0))
    value_net = make_value(obs_dim, ppo_config, root.split(1))
    runner = VecRunner(task_set, env_config, root.split(2), observe=observe,
                       reward_mode=reward_mode, weights=weights,
                       n_envs=ppo_config.n_envs)
    update_rng = root.split(3)
    eval_seed = root.split(4).seed

    policy_opt = AdamState.zeros(_policy_params(policy).size)
    value_opt = AdamState.zeros(value_net.weights.size)

    steps_per_iter = ppo_config.n_envs * ppo_config.horizon
    n_iters = max(1, ppo_config.total_steps // steps_per_iter)
    curve = []
    best = (-1.0, policy.copy())
    for it in range(1, n_iters + 1):
        buf = collect_rollout(policy, value_net, runner, ppo_config)
        iter_config = ppo_config
        if ppo_config.anneal:
            frac = 1.0 - (it - 1) / n_iters
            iter_config = replace(ppo_config,
                                  step_size=ppo_config.step_size * frac,
                                  entropy_coef=ppo_config.entropy_coef * frac)
        stats, policy_opt, value_opt = ppo_update(
            policy, value_net, buf, iter_config, update_rng, policy_opt, value_opt)
        if it % ppo_config.eval_every == 0 or it == n_iters:
            succ = evaluate_policy(policy, task_set, env_config, eval_seed,
                                   ppo_config.eval_episodes, observe=observe)
            if succ > best[0]:
                best = (succ, policy.copy())
        else:
            succ = curve[-1][2] if curve else 0.0
        curve.append((it, it * steps_per_iter, succ, stats["policy_loss"],
                      stats["value_loss"], stats["entropy"], stats["clip_fraction"]))
    return best[1], curve
