import json
import os
from pathlib import Path

import numpy as np
import pytest

from llql import cli, core, experiments, reports
from llql.cli import ConfigError, build_config, main, parse_config_file
from llql.experiments import EvalReport, EvalRow, compute_aggregates, evaluate, goal_from_dict
from llql.envs import MountainCar


def rows_fixture():
    return [
        EvalRow(seed=1, steps=90, success=True, vel_error=0.002, s_out=0, cum_reward=91.0),
        EvalRow(seed=2, steps=120, success=True, vel_error=0.004, s_out=3, cum_reward=88.5),
        EvalRow(seed=3, steps=1000, success=False, vel_error=None, s_out=7, cum_reward=-55.0),
    ]


def report_fixture():
    return EvalReport(rows_fixture(), MountainCar().spec.to_dict(), {"method": "llql"})


# ---------------------------------------------------------------------------
# Metrics
# ---------------------------------------------------------------------------


def test_aggregates_recomputable_from_rows():
    rows = rows_fixture()
    agg = compute_aggregates(rows)
    assert agg["runs"] == 3
    assert agg["success"] == 2
    assert abs(agg["mean_steps"] - np.mean([90, 120, 1000])) < 1e-12
    assert abs(agg["std_steps"] - np.std([90, 120, 1000])) < 1e-12
    assert abs(agg["mean_vel_error"] - 0.003) < 1e-12  # over measured rows only
    assert abs(agg["mean_s_out"] - np.mean([0, 3, 7])) < 1e-12
    assert abs(agg["mean_reward"] - np.mean([91.0, 88.5, -55.0])) < 1e-12


def test_evaluate_metrics_on_scripted_policy():
    env = MountainCar(horizon=50)

    def factory(seed):
        return lambda x: np.array([1.0])

    rows = evaluate(
        env, factory, runs=3, seed0=123, hazard_index=1, hazard_limit=0.002,
        vel_index=1, vel_target=0.0, vel_mode="at_goal",
    )
    assert len(rows) == 3
    for row in rows:
        assert row.steps == 50 and not row.success
        assert row.s_out > 0  # full throttle exceeds the tiny hazard limit
        assert row.vel_error is None  # never reached the goal
        assert row.cum_reward == pytest.approx(-0.1 * 50)


def test_evaluate_active_mean_velocity_error():
    env = MountainCar(horizon=10)

    def factory(seed):
        return lambda x: np.array([0.0])

    rows = evaluate(
        env, factory, runs=1, seed0=5, vel_index=1, vel_target=0.0,
        vel_mode="active_mean", vel_active=lambda x, k: True,
    )
    assert rows[0].vel_error is not None
    assert rows[0].vel_error > 0


def test_evaluate_zero_runs_gives_empty_report():
    env = MountainCar(horizon=10)
    rows = evaluate(env, lambda seed: (lambda x: np.array([0.0])), runs=0)
    assert rows == []
    agg = compute_aggregates(rows)
    assert agg["runs"] == 0 and agg["success"] == 0


# ---------------------------------------------------------------------------
# Report emission
# ---------------------------------------------------------------------------


def test_report_csv_shape(tmp_path):
    report = EvalReport(rows_fixture()[:1], MountainCar().spec.to_dict(), {})
    reports.write_report_csv(report, tmp_path / "r.csv")
    lines = (tmp_path / "r.csv").read_text().splitlines()
    assert len(lines) == 2
    assert lines[0] == "seed,steps,success,vel_error,s_out,cum_reward"


def test_report_formats_agree_and_are_byte_stable(tmp_path):
    report = report_fixture()
    paths = reports.emit_report(report, tmp_path, basename="report")
    first = [p.read_bytes() for p in paths]
    paths2 = reports.emit_report(report, tmp_path, basename="report")
    assert [p.read_bytes() for p in paths2] == first

    data = json.loads((tmp_path / "report.json").read_text())
    csv_rows = (tmp_path / "report.csv").read_text().splitlines()[1:]
    assert len(data["rows"]) == len(csv_rows)
    for row, line in zip(data["rows"], csv_rows):
        cells = line.split(",")
        assert int(cells[0]) == row["seed"]
        assert float(cells[5]) == row["cum_reward"]
    assert data["aggregates"] == compute_aggregates(report.rows)


def test_empty_report_emits_header_only(tmp_path):
    report = EvalReport([], MountainCar().spec.to_dict(), {})
    reports.write_report_csv(report, tmp_path / "r.csv")
    assert (tmp_path / "r.csv").read_text().splitlines() == [
        "seed,steps,success,vel_error,s_out,cum_reward"
    ]


def synthetic_logs(n, final_rewards):
    logs = []
    for i in range(n):
        rows = [
            core.EpisodeStats(e + 1, float(r), 100, 0.1, 0.2, 0.5, -1)
            for e, r in enumerate([0.0, final_rewards[i]])
        ]
        logs.append(rows)
    return logs


def test_top_k_selection_and_tie_break():
    finals = [5.0, 9.0, 9.0, 1.0, 7.0, 9.0]
    logs = synthetic_logs(6, finals)
    chosen = reports.top_k_logs(logs, 3)
    assert chosen == [1, 2, 5]  # ties break toward lower index


def test_curves_use_top_five_of_twenty(tmp_path):
    finals = list(range(20))
    logs = synthetic_logs(20, [float(f) for f in finals])
    reports.write_curves({"llql": logs}, tmp_path / "curves.csv")
    lines = (tmp_path / "curves.csv").read_text().splitlines()
    assert lines[0] == "episode,mean_reward,std_reward,method"
    last = lines[-1].split(",")
    # top five finals are 15..19, mean 17
    assert float(last[1]) == pytest.approx(17.0)
    assert last[3] == "llql"


def test_sweep_table_roundtrip(tmp_path):
    rows = [
        {"value": 0.07, "mean_steps": 90.0, "std_steps": 2.0, "success": 10, "runs": 10},
        {"value": 0.03, "mean_steps": 140.0, "std_steps": 9.0, "success": 10, "runs": 10},
    ]
    reports.write_sweep(rows, tmp_path / "sweep.csv")
    lines = (tmp_path / "sweep.csv").read_text().splitlines()
    assert len(lines) == 3
    assert lines[1].startswith("0.07,90.0,2.0,10,10")


def test_write_sweep_empty(tmp_path):
    reports.write_sweep([], tmp_path / "sweep.csv")
    assert (tmp_path / "sweep.csv").read_text() == "value,mean_steps,std_steps,success,runs\n"


# ---------------------------------------------------------------------------
# Experiment plumbing
# ---------------------------------------------------------------------------


def test_goal_from_dict_variants():
    assert goal_from_dict(None) is None
    g = goal_from_dict({"kind": "mc_trajectory", "v_d": 0.02})
    assert g.active(np.array([0.1, 0.0]), 0)
    assert not g.active(np.array([-0.1, 0.0]), 0)
    c = goal_from_dict({"kind": "mc_constraint", "bound": 0.03, "margin": 0.03})
    assert c.bound == 0.03
    p = goal_from_dict({"kind": "pendulum_constraint"})
    assert p.state_index == 2
    with pytest.raises(ValueError):
        goal_from_dict({"kind": "nope"})


def tiny_train_config(**kw):
    defaults = dict(episodes=1, hidden_sizes=(8, 8), normalizer_samples=10,
                    short_batch=4, long_batch=4)
    defaults.update(kw)
    return core.TrainConfig(**defaults)


def test_train_llql_batch_caches(tmp_path):
    cfg = tiny_train_config()
    runs = experiments.train_llql_batch(
        "mountain_car", cfg, [0, 1], tmp_path, workers=1, horizon=10
    )
    assert len(runs) == 2
    mtimes = [Path(r.model_path).stat().st_mtime_ns for r in runs]
    runs2 = experiments.train_llql_batch(
        "mountain_car", cfg, [0, 1], tmp_path, workers=1, horizon=10
    )
    assert [Path(r.model_path).stat().st_mtime_ns for r in runs2] == mtimes  # cache hit
    assert runs2[0].final_reward == runs[0].final_reward


def test_top_k_runs_tie_break():
    runs = [
        experiments.TrainedRun(seed=3, model_path="a", final_reward=5.0, log=[]),
        experiments.TrainedRun(seed=1, model_path="b", final_reward=5.0, log=[]),
        experiments.TrainedRun(seed=2, model_path="c", final_reward=9.0, log=[]),
    ]
    top = experiments.top_k_runs(runs, 2)
    assert [r.seed for r in top] == [2, 1]


def test_run_experiment_llql_and_dim_check(tmp_path):
    cfg = tiny_train_config()
    runs = experiments.train_llql_batch(
        "mountain_car", cfg, [0], tmp_path, workers=1, horizon=10
    )
    spec = experiments.ExperimentSpec(
        env="mountain_car", method="llql", model_path=runs[0].model_path,
        eval_runs=2, horizon=10,
    )
    report = experiments.run_experiment(spec)
    assert len(report.rows) == 2
    assert report.env["name"] == "mountain_car"

    bad = experiments.ExperimentSpec(
        env="pendulum", method="llql", model_path=runs[0].model_path, eval_runs=1
    )
    with pytest.raises(ValueError, match="incompatible"):
        experiments.run_experiment(bad)


def test_run_experiment_adjust_with_goal(tmp_path):
    cfg = tiny_train_config()
    runs = experiments.train_llql_batch(
        "mountain_car", cfg, [0], tmp_path, workers=1, horizon=10
    )
    spec = experiments.ExperimentSpec(
        env="mountain_car", method="adjust",
        policy_path=runs[0].model_path, dynamics_path=runs[0].model_path,
        goal={"kind": "mc_constraint", "bound": 0.033, "margin": 0.033},
        eval_runs=1, horizon=10, hazard_limit=0.035,
    )
    report = experiments.run_experiment(spec)
    assert report.rows[0].s_out == 0


# ---------------------------------------------------------------------------
# Config files and CLI
# ---------------------------------------------------------------------------


def test_parse_config_file(tmp_path):
    p = tmp_path / "c.cfg"
    p.write_text("episodes = 3\n# comment\nsigma0=0.4\nhidden_sizes = 8,8\n\n")
    assert parse_config_file(p) == {"episodes": "3", "sigma0": "0.4", "hidden_sizes": "8,8"}


def test_parse_config_file_errors(tmp_path):
    with pytest.raises(ConfigError):
        parse_config_file(tmp_path / "missing.cfg")
    p = tmp_path / "bad.cfg"
    p.write_text("episodes 3\n")
    with pytest.raises(ConfigError):
        parse_config_file(p)


def test_build_config_types_and_unknown_keys():
    cfg = build_config(core.TrainConfig, {"episodes": "3", "sigma0": "0.4", "hidden_sizes": "8,8"})
    assert cfg.episodes == 3 and cfg.sigma0 == 0.4 and cfg.hidden_sizes == (8, 8)
    with pytest.raises(ConfigError, match="unknown config key"):
        build_config(core.TrainConfig, {"episodez": "3"})
    with pytest.raises(ConfigError):
        build_config(core.TrainConfig, {"episodes": "three"})
    with pytest.raises(ConfigError):
        build_config(core.TrainConfig, {"discount": "1.7"})  # dataclass validation


def test_cli_help_exits_zero(capsys):
    assert main(["train", "--help"]) == 0
    assert "usage" in capsys.readouterr().out


def test_cli_unknown_flag_exits_two(capsys):
    assert main(["train", "--bogus"]) == 2


def test_cli_eval_missing_model_exits_two(tmp_path, capsys):
    code = main(["eval", "--model", str(tmp_path / "nope.model")])
    assert code == 2
    assert "nope.model" in capsys.readouterr().err


def test_cli_adjust_requires_goal(tmp_path, capsys):
    code = main(["adjust", "--policy", "cmd:true", "--dynamics", str(tmp_path / "no.model")])
    assert code == 2


def test_cli_train_eval_sweep_round_trip(tmp_path, capsys):
    cfg = tmp_path / "train.cfg"
    cfg.write_text(
        "episodes = 1\nhidden_sizes = 8,8\nnormalizer_samples = 10\n"
        "short_batch = 4\nlong_batch = 4\n"
    )
    out = tmp_path / "run"
    code = main([
        "train", "--env", "mountain_car", "--config", str(cfg), "--seed", "0",
        "--horizon", "12", "--out", str(out),
    ])
    assert code == 0
    assert (out / "model.model").exists() and (out / "log.csv").exists()

    code = main([
        "eval", "--model", str(out / "model.model"), "--runs", "2",
        "--horizon", "12", "--out", str(out),
    ])
    assert code == 0
    assert (out / "report.csv").exists() and (out / "report.json").exists()

    code = main([
        "sweep", "--model", str(out / "model.model"), "--kind", "constraint",
        "--values", "0.07,0.05", "--runs", "1", "--out", str(out),
    ])
    assert code == 0
    assert (out / "sweep.csv").read_text().count("\n") == 3


def test_cli_output_dir_env_override(tmp_path, monkeypatch, capsys):
    cfg = tmp_path / "train.cfg"
    cfg.write_text("episodes = 1\nhidden_sizes = 8,8\nnormalizer_samples = 5\n"
                   "short_batch = 2\nlong_batch = 2\n")
    monkeypatch.chdir(tmp_path)
    monkeypatch.setenv("LLQL_OUTPUT_DIR", str(tmp_path / "envout"))
    code = main([
        "train", "--env", "mountain_car", "--config", str(cfg), "--horizon", "6",
    ])
    assert code == 0
    assert (tmp_path / "envout" / "model.model").exists()


def test_cli_train_bad_config_key_exits_two(tmp_path, capsys):
    cfg = tmp_path / "train.cfg"
    cfg.write_text("not_a_key = 1\n")
    code = main(["train", "--env", "mountain_car", "--config", str(cfg), "--out", str(tmp_path)])
    assert code == 2
    assert "not_a_key" in capsys.readouterr().err
