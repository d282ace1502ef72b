"""Mixture-of-experts stage.

Object boundaries are sampled as 2-D point sets, compressed by a
permutation-invariant autoencoder trained with Chamfer distance, and the
latent code (concatenated with the goal descriptor) is clustered with
K-Means. One teacher expert is then trained from scratch per non-empty
cluster.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np

from . import ppo as ppo_mod
from . import worldmodel as wm
from .errors import DomainError, NumericError, ShapeError
from .rewards import RewardMode
from .tensorcore import (AdamHyper, AdamState, Mlp, RngStream, adam_step,
                         load_checkpoint, mlp_backward, mlp_forward, mlp_init,
                         save_checkpoint)


def sample_boundary_points(shape: wm.ObjectShape, n: int = 64) -> np.ndarray:
    """Deterministic boundary samples p_i = r(phi_i) (cos phi_i, sin phi_i)
    at uniform angles."""
    if n < 8:
        raise DomainError(f"need at least 8 boundary points, got {n}")
    phi = 2.0 * np.pi * np.arange(n) / n
    r = shape.radius * (1.0 + shape.cam * np.cos(phi))
    return np.stack([r * np.cos(phi), r * np.sin(phi)], axis=1)


def goal_vector(goal: wm.GoalSpec) -> np.ndarray:
    return np.concatenate([[goal.dx, goal.dz, np.cos(goal.theta), np.sin(goal.theta)],
                           goal.jf])


def chamfer(a: np.ndarray, b: np.ndarray) -> float:
    """Symmetric mean squared nearest-neighbor distance between point sets."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.size == 0 or b.size == 0:
        raise DomainError("chamfer distance of an empty point set")
    d2 = np.sum((a[:, None, :] - b[None, :, :]) ** 2, axis=2)
    return float(np.mean(np.min(d2, axis=1)) + np.mean(np.min(d2, axis=0)))


@dataclass
class PointAutoencoder:
    """Per-point encoder -> coordinate-wise max pool -> latent head;
    decoder emits a fixed point set. Max pooling makes the code exactly
    permutation invariant."""
    point_net: Mlp    # 2 -> pool width
    head_net: Mlp     # pool width -> latent
    decoder: Mlp      # latent -> n_points * 2
    n_points: int

    @property
    def latent_dim(self) -> int:
        return self.head_net.layer_sizes[-1]

    def encode(self, points: np.ndarray) -> np.ndarray:
        feats = mlp_forward(self.point_net, points)
        return mlp_forward(self.head_net, feats.max(axis=0))

    def decode(self, latent: np.ndarray) -> np.ndarray:
        return mlp_forward(self.decoder, latent).reshape(self.n_points, 2)

    def params(self) -> np.ndarray:
        return np.concatenate([self.point_net.weights, self.head_net.weights,
                               self.decoder.weights])

    def set_params(self, p: np.ndarray):
        a = self.point_net.weights.size
        b = a + self.head_net.weights.size
        self.point_net.weights = p[:a].copy()
        self.head_net.weights = p[a:b].copy()
        self.decoder.weights = p[b:].copy()


def make_autoencoder(n_points: int = 64, pool_width: int = 32, latent_dim: int = 8,
                     seed: int | RngStream = 0) -> PointAutoencoder:
    rng = seed if isinstance(seed, RngStream) else RngStream(seed)
    return PointAutoencoder(
        point_net=mlp_init([2, pool_width, pool_width], "tanh", rng.split(0)),
        head_net=mlp_init([pool_width, latent_dim], "tanh", rng.split(1)),
        decoder=mlp_init([latent_dim, 64, n_points * 2], "tanh", rng.split(2)),
        n_points=n_points)


def _chamfer_and_grad(pred: np.ndarray, target: np.ndarray):
    """Chamfer cost and its gradient w.r.t. the predicted point set."""
    d2 = np.sum((pred[:, None, :] - target[None, :, :]) ** 2, axis=2)
    nn_pt = np.argmin(d2, axis=1)   # for each predicted point
    nn_tp = np.argmin(d2, axis=0)   # for each target point
    n, m = pred.shape[0], target.shape[0]
    cost = float(np.mean(d2[np.arange(n), nn_pt]) + np.mean(d2[nn_tp, np.arange(m)]))
    grad = 2.0 * (pred - target[nn_pt]) / n
    np.add.at(grad, nn_tp, 2.0 * (pred[nn_tp] - target) / m)
    return cost, grad


def reconstruction_step(ae: PointAutoencoder, points: np.ndarray):
    """Chamfer reconstruction loss and exact gradient w.r.t. all
    autoencoder parameters (max-pool routes gradient to argmax points)."""
    feats = mlp_forward(ae.point_net, points)
    pool_idx = np.argmax(feats, axis=0)
    pooled = feats[pool_idx, np.arange(feats.shape[1])]
    latent = mlp_forward(ae.head_net, pooled)
    flat = mlp_forward(ae.decoder, latent)
    pred = flat.reshape(ae.n_points, 2)

    cost, dpred = _chamfer_and_grad(pred, points)
    dec_grad, dlatent = mlp_backward(ae.decoder, latent, dpred.ravel())
    head_grad, dpooled = mlp_backward(ae.head_net, pooled, dlatent)
    dfeats = np.zeros_like(feats)
    dfeats[pool_idx, np.arange(feats.shape[1])] = dpooled
    point_grad, _ = mlp_backward(ae.point_net, points, dfeats)
    return cost, np.concatenate([point_grad, head_grad, dec_grad])


def train_autoencoder(shapes, epochs: int = 200, seed: int = 0,
                      n_points: int = 64, latent_dim: int = 8,
                      step_size: float = 3e-3):
    """Adaptive-moment descent on the mean Chamfer reconstruction loss.
    Returns (model, loss history)."""
    shapes = list(shapes)
    if len({(s.radius, s.cam) for s in shapes}) < 2:
        raise DomainError("need at least 2 distinct shapes")
    rng = RngStream(seed)
    ae = make_autoencoder(n_points, latent_dim=latent_dim, seed=rng.split(0))
    clouds = [sample_boundary_points(s, n_points) for s in shapes]
    opt = AdamState.zeros(ae.params().size)
    hyper = AdamHyper(step_size=step_size)
    history = []
    order_rng = rng.split(1)
    for _ in range(epochs):
        total = 0.0
        grad = np.zeros(ae.params().size)
        for idx in order_rng.permutation(len(clouds)):
            cost, g = reconstruction_step(ae, clouds[idx])
            total += cost
            grad += g
        loss = total / len(clouds)
        if not np.isfinite(loss):
            raise NumericError("autoencoder training diverged")
        params, opt = adam_step(ae.params(), grad / len(clouds), opt, hyper)
        ae.set_params(params)
        history.append(loss)
    return ae, history


# ---------------------------------------------------------------------------
# K-Means


@dataclass
class ClusterModel:
    centroids: np.ndarray   # (k, d) in standardized space
    mean: np.ndarray        # (d,)
    std: np.ndarray         # (d,)
    k: int = -1
    objective_trace: list = field(default_factory=list)

    def __post_init__(self):
        if self.k < 0:
            self.k = len(self.centroids)

    def standardize(self, features: np.ndarray) -> np.ndarray:
        return (features - self.mean) / self.std


def kmeans(features: np.ndarray, k: int, seed: int = 0,
           max_iters: int = 100, trace: bool = False) -> ClusterModel:
    """k-means++ init, Lloyd iterations to an assignment fixpoint.
    Features are standardized per dimension first."""
    features = np.asarray(features, dtype=np.float64)
    if k < 1:
        raise DomainError(f"k must be >= 1, got {k}")
    if features.ndim != 2 or features.shape[0] < k:
        raise DomainError(f"need at least k={k} feature rows, got {features.shape}")
    mean = features.mean(axis=0)
    std = features.std(axis=0)
    std = np.where(std < 1e-12, 1.0, std)
    x = (features - mean) / std
    rng = RngStream(seed)

    # k-means++ seeding
    n = x.shape[0]
    centroids = [x[int(rng.integers(0, n))]]
    for _ in range(1, k):
        d2 = np.min(np.sum((x[:, None, :] - np.asarray(centroids)[None]) ** 2, axis=2), axis=1)
        total = d2.sum()
        if total <= 0:
            centroids.append(x[int(rng.integers(0, n))])
            continue
        u = rng.uniform(0.0, total)
        centroids.append(x[int(np.searchsorted(np.cumsum(d2), u))])
    c = np.asarray(centroids)

    assign_prev = None
    costs = []
    for _ in range(max_iters):
        d2 = np.sum((x[:, None, :] - c[None]) ** 2, axis=2)
        labels = np.argmin(d2, axis=1)
        costs.append(float(np.sum(np.min(d2, axis=1))))
        if assign_prev is not None and np.array_equal(labels, assign_prev):
            break
        assign_prev = labels
        for j in range(k):
            members = x[labels == j]
            if len(members):
                c[j] = members.mean(axis=0)
            else:  # re-seed an empty cluster at the farthest point
                far = int(np.argmax(np.min(d2, axis=1)))
                c[j] = x[far]
    return ClusterModel(c, mean, std, k, costs if trace else [])


def kmeans_objective(model: ClusterModel, features: np.ndarray) -> float:
    x = model.standardize(np.asarray(features, dtype=np.float64))
    d2 = np.sum((x[:, None, :] - model.centroids[None]) ** 2, axis=2)
    return float(np.sum(np.min(d2, axis=1)))


def assign(model: ClusterModel, feature: np.ndarray) -> int:
    feature = np.asarray(feature, dtype=np.float64)
    if feature.shape != (model.centroids.shape[1],):
        raise ShapeError(f"feature dim {feature.shape} != centroid dim "
                         f"{model.centroids.shape[1]}")
    z = model.standardize(feature)
    d2 = np.sum((model.centroids - z) ** 2, axis=1)
    return int(np.argmin(d2))  # argmin ties break to the lowest index


def task_feature(task: wm.Task, ae: PointAutoencoder) -> np.ndarray:
    """Latent shape code concatenated with the goal descriptor."""
    latent = ae.encode(sample_boundary_points(task.shape, ae.n_points))
    return np.concatenate([latent, goal_vector(task.goal)])


def cluster_tasks(tasks, ae: PointAutoencoder, k: int, seed: int = 0) -> ClusterModel:
    feats = np.stack([task_feature(t, ae) for t in tasks])
    return kmeans(feats, k, seed)


def save_cluster_model(model: ClusterModel, path):
    with open(path, "w") as f:
        json.dump({"k": model.k,
                   "centroids": model.centroids.tolist(),
                   "mean": model.mean.tolist(),
                   "std": model.std.tolist()}, f)


def load_cluster_model(path) -> ClusterModel:
    with open(path) as f:
        d = json.load(f)
    return ClusterModel(np.asarray(d["centroids"]), np.asarray(d["mean"]),
                        np.asarray(d["std"]), d["k"])


# ---------------------------------------------------------------------------
# Expert registry


@dataclass
class ExpertRegistry:
    """cluster id -> (policy, training stats); routing via the cluster
    model fitted on the same task space."""
    model: ClusterModel
    autoencoder: PointAutoencoder
    experts: dict[int, ppo_mod.GaussianPolicy]
    stats: dict[int, dict]

    def route(self, task: wm.Task) -> int:
        return assign(self.model, task_feature(task, self.autoencoder))

    def policy_for(self, task: wm.Task) -> ppo_mod.GaussianPolicy:
        cid = self.route(task)
        if cid not in self.experts:
            raise DomainError(f"no expert for cluster {cid}")
        return self.experts[cid]


def train_experts(task_set, model: ClusterModel, ae: PointAutoencoder,
                  ppo_config: ppo_mod.PpoConfig, env_config: wm.EnvConfig,
                  seed: int, reward_mode: RewardMode = RewardMode.MUTUAL,
                  log=None) -> ExpertRegistry:
    """Partition the task set by cluster and train one expert from scratch
    per non-empty cluster (mutual reward), each with a distinct seed."""
    groups: dict[int, list] = {}
    for t in task_set:
        cid = assign(model, task_feature(t, ae))
        groups.setdefault(cid, []).append(t)
    experts = {}
    stats = {}
    for cid in sorted(groups):
        tasks = groups[cid]
        if not tasks:
            continue
        policy, curve = ppo_mod.train_teacher(
            tasks, reward_mode, ppo_config, env_config, seed=seed * 1000 + cid)
        experts[cid] = policy
        stats[cid] = {"n_tasks": len(tasks), "final_success": curve[-1][2],
                      "best_success": max(r[2] for r in curve)}
        if log:
            log(f"cluster {cid}: {len(tasks)} tasks, success {stats[cid]['best_success']:.3f}")
    return ExpertRegistry(model, ae, experts, stats)


def save_registry(registry: ExpertRegistry, out_dir):
    """Cluster model JSON + per-expert checkpoints + manifest."""
    os.makedirs(out_dir, exist_ok=True)
    save_cluster_model(registry.model, os.path.join(out_dir, "cluster_model.json"))
    manifest = {"clusters": {}}
    for cid, policy in registry.experts.items():
        path = f"expert_{cid}.ckpt"
        save_checkpoint(policy.mean_net, os.path.join(out_dir, path))
        manifest["clusters"][str(cid)] = {
            "checkpoint": path,
            "log_std": policy.log_std.tolist(),
            "stats": registry.stats.get(cid, {}),
        }
    ae = registry.autoencoder
    save_checkpoint(ae.point_net, os.path.join(out_dir, "ae_point.ckpt"))
    save_checkpoint(ae.head_net, os.path.join(out_dir, "ae_head.ckpt"))
    save_checkpoint(ae.decoder, os.path.join(out_dir, "ae_decoder.ckpt"))
    manifest["n_points"] = ae.n_points
    with open(os.path.join(out_dir, "registry.json"), "w") as f:
        json.dump(manifest, f, indent=1)


def load_registry(out_dir) -> ExpertRegistry:
    with open(os.path.join(out_dir, "registry.json")) as f:
        manifest = json.load(f)
    model = load_cluster_model(os.path.join(out_dir, "cluster_model.json"))
    ae = PointAutoencoder(
        point_net=load_checkpoint(os.path.join(out_dir, "ae_point.ckpt")),
        head_net=load_checkpoint(os.path.join(out_dir, "ae_head.ckpt")),
        decoder=load_checkpoint(os.path.join(out_dir, "ae_decoder.ckpt")),
        n_points=manifest["n_points"])
    experts = {}
    stats = {}
    for cid_s, entry in manifest["clusters"].items():
        cid = int(cid_s)
        net = load_checkpoint(os.path.join(out_dir, entry["checkpoint"]))
        experts[cid] = ppo_mod.GaussianPolicy(net, np.asarray(entry["log_std"]))
        stats[cid] = entry.get("stats", {})
    return ExpertRegistry(model, ae, experts, stats)
