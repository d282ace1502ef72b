"""Run harness: config round trips and overrides, evaluation oracles,
CSV byte-determinism, fan-out equivalence, CLI exit codes."""

import json
import os

import numpy as np
import pytest

from fpmlab import cli
from fpmlab import harness as hn
from fpmlab import worldmodel as wm
from fpmlab.errors import ConfigurationError, DomainError
from fpmlab.rewards import Thresholds

CFG = wm.EnvConfig()


class TestConfig:
    def test_round_trip(self):
        c = hn.RunConfig()
        back = hn.config_from_dict(json.loads(json.dumps(hn.config_to_dict(c))))
        assert back == c

    def test_round_trip_non_default(self):
        c = hn.RunConfig(reward_mode="sum", seeds=(7, 8),
                         noise_levels=((0.0, 0.0), (0.1, 0.2)))
        back = hn.config_from_dict(json.loads(json.dumps(hn.config_to_dict(c))))
        assert back == c

    def test_override_top_level(self):
        data = hn.apply_overrides(hn.config_to_dict(hn.RunConfig()),
                                  ["reward_mode=\"sum\"", "n_tasks=4"])
        c = hn.config_from_dict(data)
        assert c.reward_mode == "sum" and c.n_tasks == 4

    def test_override_nested(self):
        data = hn.apply_overrides(hn.config_to_dict(hn.RunConfig()),
                                  ["ppo.total_steps=1234",
                                   "env.thresholds.pos=0.07"])
        c = hn.config_from_dict(data)
        assert c.ppo.total_steps == 1234
        assert c.env.thresholds.pos == 0.07

    def test_override_unknown_key_lists_valid(self):
        with pytest.raises(ConfigurationError) as e:
            hn.apply_overrides(hn.config_to_dict(hn.RunConfig()),
                               ["ppo.bogus=1"])
        assert "valid keys" in str(e.value)

    def test_override_not_key_value(self):
        with pytest.raises(ConfigurationError):
            hn.apply_overrides({}, ["nonsense"])

    def test_unknown_top_key(self):
        data = hn.config_to_dict(hn.RunConfig())
        data["mystery"] = 1
        with pytest.raises(ConfigurationError) as e:
            hn.config_from_dict(data)
        assert "mystery" in str(e.value)

    def test_load_config_missing_file(self, tmp_path):
        missing = str(tmp_path / "nope.json")
        with pytest.raises(ConfigurationError) as e:
            hn.load_config(missing)
        assert missing in str(e.value)


class TestEvaluate:
    def test_oracle_solves_suite(self):
        tasks = wm.generate_task_set(4, seed=51)
        row = hn.evaluate(wm.ScriptedRollPolicy(CFG), tasks, 2,
                          wm.NoiseConfig(), CFG.thresholds, seed=0)
        assert row.success_rate == 1.0

    def test_random_policy_near_zero(self):
        tasks = wm.generate_task_set(4, seed=51)
        row = hn.evaluate(hn.RandomPolicy(CFG), tasks, 2, wm.NoiseConfig(),
                          CFG.thresholds, seed=0)
        assert row.success_rate <= 0.05

    def test_total_episodes_at_least_64(self):
        tasks = wm.generate_task_set(3, seed=51)
        row = hn.evaluate(wm.ScriptedRollPolicy(CFG), tasks, 1,
                          wm.NoiseConfig(), CFG.thresholds, seed=0)
        assert row.episode_count >= 64
        assert row.episode_count % len(tasks) == 0

    def test_deterministic_given_seed(self):
        tasks = wm.generate_task_set(2, seed=51)
        a = hn.evaluate(wm.ScriptedRollPolicy(CFG), tasks, 2,
                        wm.NoiseConfig(0.02, 0.03), CFG.thresholds, seed=3)
        b = hn.evaluate(wm.ScriptedRollPolicy(CFG), tasks, 2,
                        wm.NoiseConfig(0.02, 0.03), CFG.thresholds, seed=3)
        assert a.success_rate == b.success_rate
        assert a.mean_episode_length == b.mean_episode_length

    def test_threshold_scaling_monotone(self):
        # the oracle stops inside the default thresholds but not inside
        # arbitrarily tight ones; widening can never lower success
        tasks = wm.generate_task_set(4, seed=51)
        rates = []
        for s in (0.05, 1.0, 2.0):
            row = hn.evaluate(wm.ScriptedRollPolicy(CFG), tasks, 2,
                              wm.NoiseConfig(), CFG.thresholds.scaled(s),
                              seed=0)
            rates.append(row.success_rate)
        assert rates[0] <= rates[1] <= rates[2]
        assert rates[1] == 1.0

    def test_empty_task_list(self):
        with pytest.raises(DomainError):
            hn.evaluate(hn.RandomPolicy(CFG), [], 1, wm.NoiseConfig(),
                        CFG.thresholds, seed=0)


class TestCsv:
    def make_rows(self):
        return [hn.MetricsRow("exp", "cond-a", 1, 0.5, 64, 120.25, 3.7),
                hn.MetricsRow("exp", "cond-b", 2, 0.75, 64, 80.0, 1.2,
                              env_steps=4096)]

    def test_schema(self, tmp_path):
        path = tmp_path / "m.csv"
        hn.write_metrics_csv(self.make_rows(), path)
        back = hn.read_metrics_csv(path)
        assert tuple(back[0].keys()) == hn.CSV_COLUMNS
        assert back[0]["success_rate"] == "0.500000"
        assert back[0]["env_steps"] == ""
        assert back[1]["env_steps"] == "4096"

    def test_wall_clock_blank(self, tmp_path):
        path = tmp_path / "m.csv"
        hn.write_metrics_csv(self.make_rows(), path)
        for r in hn.read_metrics_csv(path):
            assert r["wall_clock"] == ""

    def test_byte_identical_rewrite(self, tmp_path):
        p1, p2 = tmp_path / "a.csv", tmp_path / "b.csv"
        rows1 = self.make_rows()
        rows2 = self.make_rows()
        rows2[0].wall_clock = 99.9  # timing differences must not leak
        hn.write_metrics_csv(rows1, p1)
        hn.write_metrics_csv(rows2, p2)
        assert p1.read_bytes() == p2.read_bytes()


def _square(x):
    return x * x


class TestFanOut:
    def test_serial_parallel_equal(self):
        jobs = {f"j{i}": {"x": i} for i in range(5)}
        assert hn._fan_out(_square, dict(jobs), workers=1) == \
            hn._fan_out(_square, dict(jobs), workers=2)

    def test_result_keyed_and_sorted(self):
        jobs = {"b": {"x": 2}, "a": {"x": 3}}
        out = hn._fan_out(_square, jobs, workers=1)
        assert out == {"a": 9, "b": 4}


class TestMajority:
    def test_two_of_three(self):
        assert hn._majority([True, True, False])

    def test_one_of_three(self):
        assert not hn._majority([True, False, False])

    def test_all(self):
        assert hn._majority([True, True, True])


class TestCli:
    def test_missing_config_exit_2(self, tmp_path, capsys):
        rc = cli.main(["eval", "--oracle", "--config",
                       str(tmp_path / "absent.json")])
        assert rc == 2
        assert "absent.json" in capsys.readouterr().err

    def test_unknown_override_exit_2(self, capsys):
        rc = cli.main(["eval", "--oracle", "--set", "ppo.bogus=1"])
        assert rc == 2
        assert "valid keys" in capsys.readouterr().err

    def test_no_policy_exit_2(self):
        assert cli.main(["eval", "--set", "n_tasks=2"]) == 2

    def test_bad_subcommand_exit_2(self):
        assert cli.main(["frobnicate"]) == 2

    def test_gen_split_eval_pipeline(self, tmp_path, capsys):
        tasks = str(tmp_path / "tasks.json")
        assert cli.main(["gen-tasks", "--n", "6", "--path", tasks]) == 0
        train, hold = str(tmp_path / "train.json"), str(tmp_path / "hold.json")
        assert cli.main(["split", "--tasks", tasks, "--train-out", train,
                         "--holdout-out", hold]) == 0
        assert os.path.exists(train) and os.path.exists(hold)
        rc = cli.main(["eval", "--oracle", "--tasks", tasks,
                       "--episodes", "1"])
        assert rc == 0
        assert "success_rate 1.0000" in capsys.readouterr().out

    def test_plot_from_csv(self, tmp_path):
        csv_path = tmp_path / "m.csv"
        hn.write_metrics_csv(
            [hn.MetricsRow("e", "c", 1, 0.5, 64, 100.0)], csv_path)
        svg = tmp_path / "fig.svg"
        assert cli.main(["plot", "--csv", str(csv_path),
                         "--svg-out", str(svg)]) == 0
        assert svg.read_text().lstrip().startswith("<?xml")


@pytest.fixture(scope="module")
def tiny_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("exp")
    overrides = [
        "n_tasks=2", "seeds=[1]", "episodes_per_task=1",
        "ppo.total_steps=512", "ppo.n_envs=2", "ppo.horizon=64",
        "ppo.hidden=[16,16]", "ppo.eval_episodes=4", "ppo.eval_every=1",
        f"out_dir=\"{out}\"", "workers=1",
    ]
    config = hn.load_config(None, overrides)
    verdict = hn.run_experiment("reward-compare", config)
    return out / "reward-compare", verdict


class TestExperimentArtifacts:
    def test_artifacts_written(self, tiny_run):
        out, _ = tiny_run
        for name in ("config.json", "metrics.csv", "verdict.json",
                     "curves.svg"):
            assert (out / name).exists(), name

    def test_verdict_shape(self, tiny_run):
        _, verdict = tiny_run
        assert set(verdict) >= {"predicate", "inputs", "pass"}
        assert isinstance(verdict["pass"], bool)

    def test_rows_cover_both_conditions(self, tiny_run):
        out, _ = tiny_run
        conds = {r["condition"] for r in hn.read_metrics_csv(out / "metrics.csv")}
        assert {"mutual", "sum"} <= conds

    def test_rerun_byte_identical_csv(self, tiny_run, tmp_path):
        out, _ = tiny_run
        config = hn.config_from_dict(
            json.load(open(out / "config.json")))
        config = hn.config_from_dict(
            {**hn.config_to_dict(config), "out_dir": str(tmp_path)})
        hn.run_experiment("reward-compare", config)
        assert (out / "metrics.csv").read_bytes() == \
            (tmp_path / "reward-compare" / "metrics.csv").read_bytes()
