"""Command-line interface.

Exit codes: 0 success, 1 domain/runtime error, 2 usage error. All
randomness flows from --seed (or the seeds in the config file).
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys

import numpy as np

from . import clustering as cl
from . import datasets as ds
from . import diffusion as df
from . import harness
from . import ppo as ppo_mod
from . import worldmodel as wm
from .errors import ConfigurationError, FpmError
from .rewards import RewardMode, Thresholds
from .tensorcore import load_checkpoint, save_checkpoint


def _add_common(p):
    p.add_argument("--config", default=None, help="JSON run-config file")
    p.add_argument("--set", dest="overrides", action="append", default=[],
                   metavar="KEY=VALUE", help="override a config key (dotted)")
    p.add_argument("--seed", type=int, default=None,
                   help="override the first config seed")
    p.add_argument("--out", default=None, help="override output directory")


def _resolve(args) -> harness.RunConfig:
    config = harness.load_config(args.config, args.overrides)
    if args.seed is not None:
        config = dataclasses.replace(
            config, seeds=(args.seed,) + tuple(config.seeds[1:]))
    if getattr(args, "out", None):
        config = dataclasses.replace(config, out_dir=args.out)
    return config


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fpmlab",
        description="Functional pre-grasp manipulation lab: teacher RL, "
                    "expert clustering, diffusion-policy distillation, and "
                    "experiment reproduction on a planar rolling environment.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-tasks", help="generate a task suite JSON")
    _add_common(p)
    p.add_argument("--n", type=int, default=16)
    p.add_argument("--path", required=True)

    p = sub.add_parser("split", help="split a task suite into train/holdout")
    _add_common(p)
    p.add_argument("--tasks", required=True)
    p.add_argument("--ratio", type=float, default=0.7)
    p.add_argument("--train-out", required=True)
    p.add_argument("--holdout-out", required=True)

    p = sub.add_parser("train-teacher", help="train a PPO teacher")
    _add_common(p)
    p.add_argument("--tasks", required=True)
    p.add_argument("--reward-mode", choices=["mutual", "sum"], default="mutual")
    p.add_argument("--ckpt", required=True, help="output checkpoint path")

    p = sub.add_parser("cluster", help="fit shape autoencoder and k-means")
    _add_common(p)
    p.add_argument("--tasks", required=True)
    p.add_argument("--model-out", required=True,
                   help="output directory for cluster model + autoencoder")

    p = sub.add_parser("train-experts",
                       help="train one PPO expert per task cluster")
    _add_common(p)
    p.add_argument("--tasks", required=True)
    p.add_argument("--registry-out", required=True)

    p = sub.add_parser("collect", help="collect teacher demonstrations")
    _add_common(p)
    p.add_argument("--tasks", required=True)
    p.add_argument("--ckpt", help="teacher checkpoint (single expert)")
    p.add_argument("--registry", help="expert registry directory")
    p.add_argument("--demos", type=int, default=5, help="demos per goal")
    p.add_argument("--dataset-out", required=True)

    p = sub.add_parser("train-student",
                       help="train a diffusion or BC student on a dataset")
    _add_common(p)
    p.add_argument("--dataset", required=True)
    p.add_argument("--kind", choices=["diffusion", "bc"], default="diffusion")
    p.add_argument("--bundle-out", required=True)

    p = sub.add_parser("eval", help="evaluate a policy on a task suite")
    _add_common(p)
    p.add_argument("--tasks", help="task suite (default: generated suite)")
    p.add_argument("--policy", help="student policy bundle directory")
    p.add_argument("--ckpt", help="teacher checkpoint")
    p.add_argument("--registry", help="expert registry directory")
    p.add_argument("--oracle", action="store_true",
                   help="evaluate the scripted oracle policy")
    p.add_argument("--noise-pos", type=float, default=0.0)
    p.add_argument("--noise-ori", type=float, default=0.0)
    p.add_argument("--thresh-scale", type=float, default=1.0)
    p.add_argument("--episodes", type=int, default=4,
                   help="episodes per task (total is raised to >= 64)")

    p = sub.add_parser("exp", help="run a named experiment end to end")
    _add_common(p)
    p.add_argument("name", choices=list(harness.EXPERIMENTS))
    p.add_argument("--student-bundle", default=None,
                   help="pre-trained student for robustness-grid")

    p = sub.add_parser("plot", help="re-render figures from a metrics CSV")
    _add_common(p)
    p.add_argument("--csv", required=True)
    p.add_argument("--svg-out", required=True)
    return parser


def _load_tasks(path, config):
    if path is None:
        return wm.generate_task_set(config.n_tasks, config.task_seed,
                                    config=config.env)
    if not os.path.exists(path):
        raise ConfigurationError(f"task file not found: {path}")
    return wm.load_task_set(path)


def _load_policy(args, config):
    if getattr(args, "oracle", False):
        return wm.ScriptedRollPolicy(config.env)
    if getattr(args, "policy", None):
        return df.load_policy_bundle(args.policy)
    if getattr(args, "registry", None):
        return cl.load_registry(args.registry)
    if getattr(args, "ckpt", None):
        net = load_checkpoint(args.ckpt)
        std_path = args.ckpt + ".logstd.json"
        if os.path.exists(std_path):
            with open(std_path) as f:
                log_std = np.asarray(json.load(f))
        else:
            log_std = np.full(config.env.action_dim, config.ppo.log_std_init)
        return ppo_mod.GaussianPolicy(net, log_std)
    raise ConfigurationError(
        "no policy given: use --policy, --ckpt, --registry, or --oracle")


def _save_teacher(policy, path):
    save_checkpoint(policy.mean_net, path)
    with open(path + ".logstd.json", "w") as f:
        json.dump(policy.log_std.tolist(), f)


def _cmd_gen_tasks(args, config):
    tasks = wm.generate_task_set(args.n, config.task_seed, config=config.env)
    wm.save_task_set(tasks, args.path)
    print(f"wrote {len(tasks)} tasks to {args.path}")


def _cmd_split(args, config):
    tasks = _load_tasks(args.tasks, config)
    spec = ds.split_tasks(tasks, ratio=args.ratio, seed=config.seeds[0])
    wm.save_task_set(spec.train, args.train_out)
    wm.save_task_set(spec.holdout, args.holdout_out)
    print(f"train {len(spec.train)} holdout {len(spec.holdout)}")


def _cmd_train_teacher(args, config):
    tasks = _load_tasks(args.tasks, config)
    policy, curve = ppo_mod.train_teacher(
        tasks, RewardMode(args.reward_mode), config.ppo, config.env,
        seed=config.seeds[0], weights=config.weights)
    _save_teacher(policy, args.ckpt)
    print(f"final eval success {curve[-1][2]:.3f}; checkpoint {args.ckpt}")


def _cmd_cluster(args, config):
    tasks = _load_tasks(args.tasks, config)
    ae, losses = cl.train_autoencoder(
        [t.shape for t in tasks], epochs=config.cluster.ae_epochs,
        seed=config.seeds[0], n_points=config.cluster.n_points,
        latent_dim=config.cluster.latent_dim)
    model = cl.cluster_tasks(tasks, ae, config.cluster.k, seed=config.seeds[0])
    registry = cl.ExpertRegistry(model, ae, {}, {})
    cl.save_registry(registry, args.model_out)
    counts = {}
    for t in tasks:
        cid = cl.assign(model, cl.task_feature(t, ae))
        counts[cid] = counts.get(cid, 0) + 1
    print(f"autoencoder loss {losses[-1]:.5f}; cluster sizes "
          + " ".join(f"{c}:{n}" for c, n in sorted(counts.items())))


def _cmd_train_experts(args, config):
    tasks = _load_tasks(args.tasks, config)
    ae, _ = cl.train_autoencoder(
        [t.shape for t in tasks], epochs=config.cluster.ae_epochs,
        seed=config.seeds[0], n_points=config.cluster.n_points,
        latent_dim=config.cluster.latent_dim)
    model = cl.cluster_tasks(tasks, ae, config.cluster.k, seed=config.seeds[0])
    registry = cl.train_experts(tasks, model, ae, config.ppo, config.env,
                                seed=config.seeds[0], log=print)
    cl.save_registry(registry, args.registry_out)
    print(f"registry written to {args.registry_out}")


def _cmd_collect(args, config):
    tasks = _load_tasks(args.tasks, config)
    policy = _load_policy(args, config)
    demos, yields = ds.collect_demos(policy, tasks, args.demos, config.env,
                                     seed=config.seeds[0],
                                     max_retries=config.data.max_retries)
    samples = ds.window_all(demos, config.data.t_p, config.data.t_o)
    ds.save_dataset(samples, args.dataset_out, t_o=config.data.t_o,
                    t_p=config.data.t_p)
    total = sum(yields.values())
    print(f"collected {total} demos ({len(samples)} windows) "
          f"-> {args.dataset_out}")


def _cmd_train_student(args, config):
    samples = ds.load_dataset(args.dataset)
    if args.kind == "diffusion":
        policy, losses = df.train_diffusion(
            samples, epochs=config.diffusion.epochs, seed=config.seeds[0],
            T=config.diffusion.T, t_a=config.data.t_a,
            batch_size=config.diffusion.batch_size,
            step_size=config.diffusion.step_size,
            hidden=tuple(config.diffusion.hidden),
            forward=config.diffusion.forward)
    else:
        policy, losses = df.bc_train(
            samples, epochs=config.diffusion.epochs, seed=config.seeds[0],
            batch_size=config.diffusion.batch_size,
            step_size=config.diffusion.step_size,
            hidden=tuple(config.diffusion.hidden), t_a=config.data.t_a)
    df.save_policy_bundle(policy, args.bundle_out)
    print(f"{args.kind} student trained (loss {losses[-1]:.5f}) "
          f"-> {args.bundle_out}")


def _cmd_eval(args, config):
    tasks = _load_tasks(args.tasks, config)
    policy = _load_policy(args, config)
    row = harness.evaluate(
        policy, tasks, args.episodes,
        wm.NoiseConfig(args.noise_pos, args.noise_ori),
        config.env.thresholds.scaled(args.thresh_scale),
        seed=config.seeds[0], env_config=config.env)
    print(f"success_rate {row.success_rate:.4f} episodes {row.episode_count} "
          f"mean_length {row.mean_episode_length:.1f}")


def _cmd_exp(args, config):
    kwargs = {}
    if args.name == "robustness-grid" and args.student_bundle:
        kwargs["student_bundle"] = args.student_bundle
    verdict = harness.run_experiment(args.name, config, log=print, **kwargs)
    print(f"verdict: {'PASS' if verdict['pass'] else 'FAIL'} "
          f"({verdict['predicate']})")


def _cmd_plot(args, config):
    from . import plots
    rows = harness.read_metrics_csv(args.csv)
    by_cond = {}
    for r in rows:
        if not r["env_steps"]:
            continue
        key = f"{r['condition']} seed {r['seed']}"
        by_cond.setdefault(key, []).append(
            (int(r["env_steps"]), float(r["success_rate"])))
    if by_cond:
        series = [(k, [p[0] for p in sorted(v)], [p[1] for p in sorted(v)])
                  for k, v in sorted(by_cond.items())]
        plots.line_plot(series, args.svg_out, "Learning curves", "env steps",
                        "success rate", ylim=(0, 1.05))
    else:
        groups = {}
        for r in rows:
            groups.setdefault(r["condition"], []).append(
                float(r["success_rate"]))
        labels = sorted(groups)
        plots.bar_plot(labels, [("success", [float(np.mean(groups[c]))
                                             for c in labels])],
                       args.svg_out, "Success by condition", "success rate")
    print(f"wrote {args.svg_out}")


_COMMANDS = {
    "gen-tasks": _cmd_gen_tasks,
    "split": _cmd_split,
    "train-teacher": _cmd_train_teacher,
    "cluster": _cmd_cluster,
    "train-experts": _cmd_train_experts,
    "collect": _cmd_collect,
    "train-student": _cmd_train_student,
    "eval": _cmd_eval,
    "exp": _cmd_exp,
    "plot": _cmd_plot,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return 2 if e.code not in (0, None) else 0
    try:
        config = _resolve(args)
        _COMMANDS[args.command](args, config)
        return 0
    except ConfigurationError as e:
        print(f"usage error: {e}", file=sys.stderr)
        return 2
    except FpmError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
