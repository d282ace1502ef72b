"""Student policies: DDPM diffusion policy, behavior cloning, and Dagger.

The diffusion policy predicts the noise added to an action sequence of
length T_p conditioned on the last T_o student observations, then
generates actions at run time by iterative denoising; only the first
T_a actions are executed before re-planning.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field

import numpy as np

from . import datasets as ds
from . import ppo as ppo_mod
from . import worldmodel as wm
from .errors import ConfigurationError, DomainError, NumericError
from .tensorcore import (AdamHyper, AdamState, Mlp, RngStream, adam_step,
                         load_checkpoint, mlp_backward, mlp_forward, mlp_init,
                         save_checkpoint)

TIME_EMBED_DIM = 16


@dataclass(frozen=True)
class NoiseSchedule:
    betas: np.ndarray       # (T,) indexed by t-1
    alphas: np.ndarray
    alpha_bars: np.ndarray  # cumulative products

    @property
    def T(self) -> int:
        return len(self.betas)


def make_schedule(T: int = 50, beta_first: float = 0.002,
                  beta_last: float = 0.4) -> NoiseSchedule:
    # Defaults are the 1000-step linear (1e-4, 0.02) grid rescaled by
    # 1000/T so the terminal marginal is close to standard normal
    # (alpha_bar_T ~ 1e-5); without rescaling, a 50-step schedule keeps
    # alpha_bar_T ~ 0.6 and sampling from N(0, I) is badly mismatched.
    if not (0.0 < beta_first <= beta_last < 1.0) or T < 1:
        raise ConfigurationError(
            f"invalid schedule (T={T}, beta_first={beta_first}, beta_last={beta_last})")
    betas = np.linspace(beta_first, beta_last, T)
    alphas = 1.0 - betas
    return NoiseSchedule(betas, alphas, np.cumprod(alphas))


def add_noise(a0: np.ndarray, t: int, eps: np.ndarray, schedule: NoiseSchedule,
              forward: str = "ddpm") -> np.ndarray:
    """Forward noising. ddpm: sqrt(abar_t) a0 + sqrt(1-abar_t) eps;
    literal: a0 + eps (unscaled)."""
    if not (1 <= t <= schedule.T):
        raise DomainError(f"diffusion step {t} outside [1, {schedule.T}]")
    if forward == "literal":
        return a0 + eps
    abar = schedule.alpha_bars[t - 1]
    return math.sqrt(abar) * a0 + math.sqrt(1.0 - abar) * eps


def time_embedding(t, dim: int = TIME_EMBED_DIM) -> np.ndarray:
    """Sinusoidal embedding of the (integer) diffusion step."""
    t = np.atleast_1d(np.asarray(t, dtype=np.float64))
    half = dim // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half) / half)
    ang = t[:, None] * freqs[None, :]
    emb = np.concatenate([np.sin(ang), np.cos(ang)], axis=1)
    return emb[0] if emb.shape[0] == 1 and np.isscalar(t) else emb


@dataclass
class ActionNormalizer:
    """Per-dimension min/max mapping of env actions onto [-1, 1]."""
    lo: np.ndarray
    hi: np.ndarray

    @classmethod
    def fit(cls, action_windows: np.ndarray) -> "ActionNormalizer":
        flat = action_windows.reshape(-1, action_windows.shape[-1])
        lo = flat.min(axis=0)
        hi = flat.max(axis=0)
        span = hi - lo
        pad = np.where(span < 1e-9, 0.5, 0.0)  # guard constant dims
        return cls(lo - pad, hi + pad)

    def encode(self, a: np.ndarray) -> np.ndarray:
        return 2.0 * (a - self.lo) / (self.hi - self.lo) - 1.0

    def decode(self, u: np.ndarray) -> np.ndarray:
        return self.lo + (u + 1.0) * 0.5 * (self.hi - self.lo)


@dataclass
class DiffusionPolicy:
    predictor: Mlp
    schedule: NoiseSchedule
    t_p: int
    t_o: int
    t_a: int
    obs_dim: int
    act_dim: int
    normalizer: ActionNormalizer
    forward: str = "ddpm"

    def predict_noise(self, obs_flat: np.ndarray, actions_flat: np.ndarray,
                      t) -> np.ndarray:
        """Batched noise prediction; inputs are flattened windows."""
        single = obs_flat.ndim == 1
        if single:
            obs_flat = obs_flat[None]
            actions_flat = actions_flat[None]
        emb = time_embedding(np.full(obs_flat.shape[0], t, dtype=np.float64))
        x = np.concatenate([obs_flat, actions_flat, emb], axis=1)
        out = mlp_forward(self.predictor, x)
        return out[0] if single else out


def make_predictor(obs_dim: int, act_dim: int, t_o: int, t_p: int,
                   hidden=(256, 256), seed: int | RngStream = 0) -> Mlp:
    in_dim = t_o * obs_dim + t_p * act_dim + TIME_EMBED_DIM
    return mlp_init([in_dim, *hidden, t_p * act_dim], "relu", seed)


def _batch_arrays(samples):
    if len(samples) == 0:
        raise DomainError(
            "no training windows: demo collection produced zero successful "
            "episodes (the demonstrating policy never reached the goal)")
    obs = np.stack([s.obs_window for s in samples])
    act = np.stack([s.action_window for s in samples])
    return obs, act


def train_step(predictor: Mlp, obs_batch: np.ndarray, act_batch: np.ndarray,
               schedule: NoiseSchedule, rng: RngStream, opt: AdamState,
               hyper: AdamHyper, forward: str = "ddpm"):
    """One diffusion training step on normalized action windows: draw
    t ~ U{1..T} and unit noise per sample, regress predictor output onto
    the noise in MSE. Returns (loss, new optimizer state)."""
    n = obs_batch.shape[0]
    obs_flat = obs_batch.reshape(n, -1)
    act_flat = act_batch.reshape(n, -1)
    dim = act_flat.shape[1]
    ts = rng.integers(1, schedule.T + 1, n)
    eps = rng.normal(size=(n, dim))
    if forward == "literal":
        noised = act_flat + eps
    else:
        abar = schedule.alpha_bars[ts - 1][:, None]
        noised = np.sqrt(abar) * act_flat + np.sqrt(1.0 - abar) * eps
    emb = time_embedding(ts.astype(np.float64))
    x = np.concatenate([obs_flat, noised, emb], axis=1)
    pred = mlp_forward(predictor, x)
    err = pred - eps
    loss = float(np.mean(err * err))
    if not np.isfinite(loss):
        raise NumericError("diffusion training loss is non-finite")
    gout = 2.0 * err / err.size
    grad, _ = mlp_backward(predictor, x, gout)
    predictor.weights, opt = adam_step(predictor.weights, grad, opt, hyper)
    return loss, opt


def train_diffusion(samples, epochs: int = 60, seed: int = 0, T: int = 50,
                    t_a: int = 1, batch_size: int = 64, step_size: float = 1e-3,
                    hidden=(256, 256), forward: str = "ddpm",
                    log=None) -> tuple[DiffusionPolicy, list[float]]:
    """Train a diffusion policy on window samples. Returns (policy,
    per-epoch mean loss)."""
    obs, act = _batch_arrays(samples)
    n, t_o, obs_dim = obs.shape
    t_p, act_dim = act.shape[1:]
    normalizer = ActionNormalizer.fit(act)
    act_n = normalizer.encode(act)
    schedule = make_schedule(T)
    rng = RngStream(seed)
    predictor = make_predictor(obs_dim, act_dim, t_o, t_p, hidden, rng.split(0))
    opt = AdamState.zeros(predictor.weights.size)
    hyper = AdamHyper(step_size=step_size)
    batch_rng = rng.split(1)
    noise_rng = rng.split(2)
    losses = []
    for ep in range(epochs):
        order = batch_rng.permutation(n)
        ep_losses = []
        for start in range(0, n, batch_size):
            idx = order[start:start + batch_size]
            loss, opt = train_step(predictor, obs[idx], act_n[idx], schedule,
                                   noise_rng, opt, hyper, forward)
            ep_losses.append(loss)
        losses.append(float(np.mean(ep_losses)))
        if log and (ep + 1) % max(1, epochs // 5) == 0:
            log(f"diffusion epoch {ep + 1}/{epochs} loss {losses[-1]:.4f}")
    return DiffusionPolicy(predictor, schedule, t_p, t_o, t_a, obs_dim,
                           act_dim, normalizer, forward), losses


def sample_actions(policy: DiffusionPolicy, obs_window: np.ndarray,
                   rng: RngStream, predictor_override=None,
                   init: np.ndarray | None = None,
                   stochastic: bool = True) -> np.ndarray:
    """DDPM ancestral sampling of one normalized action sequence, then
    de-normalization. sigma_t = sqrt(beta_t) for t > 1, sigma_1 = 0;
    stochastic=False forces sigma_t = 0 throughout (deterministic
    reverse process)."""
    sched = policy.schedule
    dim = policy.t_p * policy.act_dim
    obs_flat = np.asarray(obs_window, dtype=np.float64).reshape(-1)
    if obs_flat.size != policy.t_o * policy.obs_dim:
        raise DomainError(f"obs window size {obs_flat.size} != "
                          f"{policy.t_o * policy.obs_dim}")
    a = rng.normal(size=dim) if init is None else np.asarray(init, dtype=np.float64).reshape(dim).copy()
    for t in range(sched.T, 0, -1):
        beta = sched.betas[t - 1]
        alpha = sched.alphas[t - 1]
        abar = sched.alpha_bars[t - 1]
        if predictor_override is not None:
            n_hat = predictor_override(obs_flat, a, t)
        else:
            n_hat = policy.predict_noise(obs_flat, a, t)
        a = (a - beta / math.sqrt(1.0 - abar) * n_hat) / math.sqrt(alpha)
        if t > 1 and stochastic:
            a = a + math.sqrt(beta) * rng.normal(size=dim)
    seq = policy.normalizer.decode(a.reshape(policy.t_p, policy.act_dim))
    return seq


def _pad_window(history, t_o: int) -> np.ndarray:
    hist = list(history)
    if not hist:
        raise DomainError("observation history is empty")
    idx = np.clip(np.arange(len(hist) - t_o, len(hist)), 0, len(hist) - 1)
    return np.stack([hist[i] for i in idx])


def act(policy: DiffusionPolicy, observation_history, rng: RngStream,
        env_config: wm.EnvConfig | None = None) -> np.ndarray:
    """Build the padded obs window, denoise a sequence, return the first
    T_a actions clipped to env bounds."""
    window = _pad_window(observation_history, policy.t_o)
    seq = sample_actions(policy, window, rng)
    out = seq[:policy.t_a]
    if env_config is not None:
        scale = ppo_mod.action_scale(env_config)
        out = np.clip(out, -scale, scale)
    return out


# ---------------------------------------------------------------------------
# Behavior cloning


@dataclass
class BcPolicy:
    net: Mlp
    t_p: int
    t_o: int
    t_a: int
    obs_dim: int
    act_dim: int
    normalizer: ActionNormalizer


def bc_train(samples, epochs: int = 60, seed: int = 0, batch_size: int = 64,
             step_size: float = 1e-3, hidden=(256, 256), t_a: int = 1,
             log=None) -> tuple[BcPolicy, list[float]]:
    """MSE regression from flattened obs windows to normalized action
    windows; same I/O contract as the diffusion policy."""
    obs, act_arr = _batch_arrays(samples)
    n, t_o, obs_dim = obs.shape
    t_p, act_dim = act_arr.shape[1:]
    normalizer = ActionNormalizer.fit(act_arr)
    act_n = normalizer.encode(act_arr).reshape(n, -1)
    obs_flat = obs.reshape(n, -1)
    rng = RngStream(seed)
    net = mlp_init([t_o * obs_dim, *hidden, t_p * act_dim], "relu", rng.split(0))
    opt = AdamState.zeros(net.weights.size)
    hyper = AdamHyper(step_size=step_size)
    batch_rng = rng.split(1)
    losses = []
    for ep in range(epochs):
        order = batch_rng.permutation(n)
        ep_losses = []
        for start in range(0, n, batch_size):
            idx = order[start:start + batch_size]
            pred = mlp_forward(net, obs_flat[idx])
            err = pred - act_n[idx]
            loss = float(np.mean(err * err))
            if not np.isfinite(loss):
                raise NumericError("BC training loss is non-finite")
            grad, _ = mlp_backward(net, obs_flat[idx], 2.0 * err / err.size)
            net.weights, opt = adam_step(net.weights, grad, opt, hyper)
            ep_losses.append(loss)
        losses.append(float(np.mean(ep_losses)))
        if log and (ep + 1) % max(1, epochs // 5) == 0:
            log(f"bc epoch {ep + 1}/{epochs} loss {losses[-1]:.4f}")
    return BcPolicy(net, t_p, t_o, t_a, obs_dim, act_dim, normalizer), losses


def bc_act(policy: BcPolicy, observation_history,
           env_config: wm.EnvConfig | None = None) -> np.ndarray:
    window = _pad_window(observation_history, policy.t_o)
    pred = mlp_forward(policy.net, window.reshape(-1))
    seq = policy.normalizer.decode(pred.reshape(policy.t_p, policy.act_dim))
    out = seq[:policy.t_a]
    if env_config is not None:
        scale = ppo_mod.action_scale(env_config)
        out = np.clip(out, -scale, scale)
    return out


# ---------------------------------------------------------------------------
# Dagger


def dagger_train(expert_router, task_list, rounds: int, episodes_per_round: int,
                 env_config: wm.EnvConfig, seed: int, t_p: int = 4, t_o: int = 2,
                 bc_epochs: int = 40, demos_per_goal: int = 1, log=None):
    """Online imitation: round 0 trains BC on expert demos; each later
    round rolls out the current student, relabels visited states with the
    expert's mean action, aggregates, and retrains from scratch.
    Returns (policy, per-round training-set success)."""
    demos, _ = ds.collect_demos(expert_router, task_list, demos_per_goal,
                                env_config, seed=seed)
    aggregate = ds.window_all(demos, t_p, t_o)
    policy, _ = bc_train(aggregate, epochs=bc_epochs, seed=seed)
    history = [_suite_success(policy, task_list, env_config, seed)]
    root = RngStream(seed).split(991)
    o_scale = ppo_mod.observation_scale("teacher", env_config)
    a_scale = ppo_mod.action_scale(env_config)
    for rnd in range(1, rounds + 1):
        new_trajs = []
        for e in range(episodes_per_round):
            task = task_list[e % len(task_list)]
            if hasattr(expert_router, "policy_for"):
                expert = expert_router.policy_for(task)
            else:
                expert = expert_router
            rng = root.split(rnd * 10007 + e)
            state = wm.reset(env_config, task.shape, task.goal, rng)
            act_rng = rng.split(1)
            obs_hist = []
            obs_rows, act_rows = [], []
            for _ in range(env_config.max_steps):
                sobs = wm.observe_student(state, task.goal, wm.NoiseConfig())
                obs_hist.append(sobs)
                if hasattr(expert, "mean"):
                    expert_action = expert.mean(
                        wm.observe_teacher(state, task.goal, task.shape)
                        * o_scale) * a_scale
                else:
                    expert_action = expert.act(state, task.goal, task.shape)
                obs_rows.append(sobs)
                act_rows.append(np.clip(expert_action, -a_scale, a_scale))
                student_action = bc_act(policy, obs_hist, env_config)[0]
                res = wm.step(state, student_action, task.shape, task.goal, env_config)
                state = res.next_state
                if res.done:
                    break
            new_trajs.append(ds.Trajectory(task.goal_id, np.asarray(obs_rows),
                                           np.asarray(act_rows), True))
        aggregate = aggregate + ds.window_all(new_trajs, t_p, t_o)
        policy, _ = bc_train(aggregate, epochs=bc_epochs, seed=seed + rnd)
        history.append(_suite_success(policy, task_list, env_config, seed))
        if log:
            log(f"dagger round {rnd}: aggregate {len(aggregate)} windows, "
                f"success {history[-1]:.3f}")
    return policy, history


def _suite_success(policy: BcPolicy, task_list, env_config: wm.EnvConfig,
                   seed: int, episodes_per_task: int = 2) -> float:
    root = RngStream(seed).split(7777)
    succ = total = 0
    for task in task_list:
        trng = root.split(task.goal_id)
        for ep in range(episodes_per_task):
            rng = trng.split(ep)
            state = wm.reset(env_config, task.shape, task.goal, rng)
            hist = []
            for _ in range(env_config.max_steps):
                hist.append(wm.observe_student(state, task.goal, wm.NoiseConfig()))
                action = bc_act(policy, hist, env_config)[0]
                res = wm.step(state, action, task.shape, task.goal, env_config)
                state = res.next_state
                if res.done:
                    succ += res.success
                    break
            total += 1
    return succ / total


# ---------------------------------------------------------------------------
# Policy bundles


def save_policy_bundle(policy, out_dir):
    os.makedirs(out_dir, exist_ok=True)
    kind = "diffusion" if isinstance(policy, DiffusionPolicy) else "bc"
    net = policy.predictor if kind == "diffusion" else policy.net
    save_checkpoint(net, os.path.join(out_dir, "policy.ckpt"))
    meta = {
        "kind": kind, "t_p": policy.t_p, "t_o": policy.t_o, "t_a": policy.t_a,
        "obs_dim": policy.obs_dim, "act_dim": policy.act_dim,
        "norm_lo": policy.normalizer.lo.tolist(),
        "norm_hi": policy.normalizer.hi.tolist(),
    }
    if kind == "diffusion":
        meta.update({"T": policy.schedule.T,
                     "beta_first": float(policy.schedule.betas[0]),
                     "beta_last": float(policy.schedule.betas[-1]),
                     "forward": policy.forward})
    with open(os.path.join(out_dir, "policy.json"), "w") as f:
        json.dump(meta, f, indent=1)


def load_policy_bundle(out_dir):
    with open(os.path.join(out_dir, "policy.json")) as f:
        meta = json.load(f)
    net = load_checkpoint(os.path.join(out_dir, "policy.ckpt"))
    norm = ActionNormalizer(np.asarray(meta["norm_lo"]), np.asarray(meta["norm_hi"]))
    if meta["kind"] == "diffusion":
        sched = make_schedule(meta["T"], meta["beta_first"], meta["beta_last"])
        return DiffusionPolicy(net, sched, meta["t_p"], meta["t_o"], meta["t_a"],
                               meta["obs_dim"], meta["act_dim"], norm, meta["forward"])
    return BcPolicy(net, meta["t_p"], meta["t_o"], meta["t_a"],
                    meta["obs_dim"], meta["act_dim"], norm)
