"""Experiment orchestration: evaluation metrics, comparisons, and sweeps.

Evaluation rolls a controller through seeded episodes and computes the
report columns: steps to goal, success, velocity error against a desired
value, hazard-violation step counts, and cumulative (raw) reward.  The
comparison builders train the baseline variants, the sweep driver reruns a
trained model across a range of short-term goal values, and everything is
deterministic per seed so parallel and serial execution agree.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import math
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from . import baselines, control, core
from .envs import make_env


# ---------------------------------------------------------------------------
# Evaluation
# ---------------------------------------------------------------------------


@dataclasses.dataclass
class EvalRow:
    seed: int
    steps: int
    success: bool
    vel_error: Optional[float]
    s_out: int
    cum_reward: float


@dataclasses.dataclass
class EvalReport:
    rows: list
    env: dict
    meta: dict

    def aggregates(self) -> dict:
        return compute_aggregates(self.rows)


def _mean_std(values) -> tuple:
    if not values:
        return float("nan"), float("nan")
    arr = np.asarray(values, dtype=np.float64)
    return float(arr.mean()), float(arr.std())


def compute_aggregates(rows) -> dict:
    steps_mean, steps_std = _mean_std([r.steps for r in rows])
    vel = [r.vel_error for r in rows if r.vel_error is not None]
    vel_mean, vel_std = _mean_std(vel)
    sout_mean, sout_std = _mean_std([r.s_out for r in rows])
    rew_mean, rew_std = _mean_std([r.cum_reward for r in rows])
    return {
        "runs": len(rows),
        "success": sum(1 for r in rows if r.success),
        "mean_steps": steps_mean,
        "std_steps": steps_std,
        "mean_vel_error": vel_mean,
        "std_vel_error": vel_std,
        "mean_s_out": sout_mean,
        "std_s_out": sout_std,
        "mean_reward": rew_mean,
        "std_reward": rew_std,
    }


def _as_step_fn(obj) -> Callable:
    if hasattr(obj, "act"):
        return lambda x, k: obj.act(x, k).action
    return lambda x, k: obj(x)


def evaluate(
    env,
    controller_factory: Callable[[int], object],
    *,
    runs: int = 10,
    seed0: int = 10_000,
    hazard_index: Optional[int] = None,
    hazard_limit: Optional[float] = None,
    vel_index: Optional[int] = None,
    vel_target: Optional[float] = None,
    vel_mode: str = "at_goal",
    vel_active: Optional[Callable] = None,
) -> list:
    """Run seeded evaluation episodes and compute per-run metric rows.

    `controller_factory(seed)` builds a fresh controller per run (either a
    callable state -> action or an object with .act(state, k) -> Decision).
    Velocity error is measured at the goal-reaching step ("at_goal") or as
    the mean over steps where `vel_active(state, k)` holds ("active_mean").
    Hazard violations count visited states with |state[hazard_index]| >
    hazard_limit.
    """
    rows = []
    for j in range(runs):
        seed = seed0 + j
        step_fn = _as_step_fn(controller_factory(seed))
        x = env.reset(seed)
        total = 0.0
        steps = 0
        success = False
        s_out = 0
        vel_errors = []
        vel_at_goal = None
        for k in range(env.horizon):
            u = step_fn(x, k)
            sr = env.step(x, u)
            total += sr.reward
            steps = k + 1
            x = sr.next_state
            if hazard_index is not None and abs(x[hazard_index]) > hazard_limit:
                s_out += 1
            if vel_index is not None and vel_mode == "active_mean" and vel_active is not None:
                if vel_active(x, k):
                    vel_errors.append(abs(float(x[vel_index]) - vel_target))
            if sr.done:
                if env.goal_reached(x):
                    success = True
                    if vel_index is not None and vel_mode == "at_goal":
                        vel_at_goal = abs(float(x[vel_index]) - vel_target)
                break
        if vel_index is None:
            vel_error = None
        elif vel_mode == "at_goal":
            vel_error = vel_at_goal
        else:
            vel_error = float(np.mean(vel_errors)) if vel_errors else None
        rows.append(EvalRow(seed, steps, success, vel_error, s_out, total))
    return rows


# ---------------------------------------------------------------------------
# Benchmark goal factories
# ---------------------------------------------------------------------------


def mc_velocity_goal(
    v_d: float = 0.025,
    gamma1: float = 1.0,
    gamma2: float = 2000.0,
    switch_position: float = 0.0,
) -> control.TrajectoryGoal:
    """Reach the hilltop at the desired velocity: track [p + v_d, v_d] once
    the car's position passes `switch_position` (long-term policy before)."""

    def target(x, k):
        return np.array([x[0] + v_d, v_d])

    return control.TrajectoryGoal(
        target, gamma1, gamma2, active=lambda x, k: x[0] >= switch_position
    )


def mc_speed_limit_goal(bound: float = 0.033, margin: float = 0.033) -> control.SymmetricConstraintGoal:
    """Keep |velocity| at or below `bound`, engaging once |v| exceeds `margin`."""
    return control.SymmetricConstraintGoal(state_index=1, bound=bound, margin=margin)


def pendulum_upright_velocity_goal(
    gamma1: float = 1.0,
    gamma2: float = 100.0,
    cos_threshold: float = 0.99,
    v_d: float = 0.0,
) -> control.TrajectoryGoal:
    """Drive angular velocity to v_d whenever the pendulum is near upright."""

    def target(x, k):
        return np.array([x[0], x[1], v_d])

    return control.TrajectoryGoal(
        target, gamma1, gamma2, active=lambda x, k: x[0] > cos_threshold
    )


def pendulum_speed_limit_goal(bound: float = 5.8, margin: float = 0.0) -> control.SymmetricConstraintGoal:
    """Keep |angular velocity| at or below `bound`; margin 0 keeps the
    projection engaged every step (it is a no-op while the prediction
    already satisfies the bound)."""
    return control.SymmetricConstraintGoal(state_index=2, bound=bound, margin=margin)


def goal_from_dict(d: Optional[dict]):
    """Build a goal from its flat description (as used by the CLI/config)."""
    if d is None:
        return None
    kind = d["kind"]
    if kind == "mc_trajectory":
        return mc_velocity_goal(
            v_d=d.get("v_d", 0.025),
            gamma1=d.get("gamma1", 1.0),
            gamma2=d.get("gamma2", 2000.0),
            switch_position=d.get("switch_position", 0.0),
        )
    if kind == "mc_constraint":
        return mc_speed_limit_goal(bound=d.get("bound", 0.033), margin=d.get("margin", 0.033))
    if kind == "pendulum_trajectory":
        return pendulum_upright_velocity_goal(
            gamma1=d.get("gamma1", 1.0),
            gamma2=d.get("gamma2", 100.0),
            cos_threshold=d.get("cos_threshold", 0.99),
            v_d=d.get("v_d", 0.0),
        )
    if kind == "pendulum_constraint":
        return pendulum_speed_limit_goal(bound=d.get("bound", 5.8), margin=d.get("margin", 0.0))
    raise ValueError(f"unknown goal kind {kind!r}")


# ---------------------------------------------------------------------------
# Cached training (worker-pool friendly)
# ---------------------------------------------------------------------------


@dataclasses.dataclass
class TrainedRun:
    seed: int
    model_path: str
    final_reward: float
    log: list


def _config_key(prefix: str, payload: dict) -> str:
    digest = hashlib.sha256(json.dumps(payload, sort_keys=True).encode()).hexdigest()[:12]
    return f"{prefix}-{digest}"


def _log_rows_to_dicts(log) -> list:
    return [dataclasses.asdict(r) for r in log]


def _log_dicts_to_rows(rows) -> list:
    return [core.EpisodeStats(**r) for r in rows]


def _train_llql_job(payload: dict) -> dict:
    env = make_env(
        payload["env"], goal_position=payload["goal_position"], horizon=payload["horizon"]
    )
    cfg = core.TrainConfig(**payload["config"])
    result = core.train(env, cfg)
    core.save_llql_model(
        payload["model_path"], result.dynamics, result.qmodel,
        meta={"env": env.spec.to_dict(), "config": cfg.to_dict(), "episode": cfg.episodes},
    )
    Path(payload["log_path"]).write_text(json.dumps(_log_rows_to_dicts(result.log)))
    return payload


def train_llql_batch(
    env_name: str,
    config: core.TrainConfig,
    seeds,
    cache_dir,
    *,
    workers: int = 1,
    goal_position: float = 0.45,
    horizon: Optional[int] = None,
) -> list:
    """Train one model per seed (cached by config hash), in a worker pool."""
    cache_dir = Path(cache_dir)
    cache_dir.mkdir(parents=True, exist_ok=True)
    jobs = []
    stems = {}
    for seed in seeds:
        cfg = dataclasses.replace(config, seed=seed)
        key = _config_key(
            f"llql-{env_name}",
            {"config": cfg.to_dict(), "goal_position": goal_position, "horizon": horizon},
        )
        stem = cache_dir / key
        stems[seed] = stem
        if not (stem.with_suffix(".model").exists() and stem.with_suffix(".log.json").exists()):
            jobs.append(
                {
                    "env": env_name,
                    "goal_position": goal_position,
                    "horizon": horizon,
                    "config": cfg.to_dict(),
                    "model_path": str(stem.with_suffix(".model")),
                    "log_path": str(stem.with_suffix(".log.json")),
                }
            )
    if jobs:
        if workers > 1:
            with ProcessPoolExecutor(max_workers=workers) as pool:
                list(pool.map(_train_llql_job, jobs))
        else:
            for job in jobs:
                _train_llql_job(job)
    runs = []
    for seed in seeds:
        stem = stems[seed]
        log = _log_dicts_to_rows(json.loads(stem.with_suffix(".log.json").read_text()))
        runs.append(
            TrainedRun(seed, str(stem.with_suffix(".model")), log[-1].cumulative_reward, log)
        )
    return runs


def top_k_runs(runs, k: int) -> list:
    """The k runs with the highest final cumulative reward (ties: lower seed)."""
    return sorted(runs, key=lambda r: (-r.final_reward, r.seed))[:k]


def _train_ddpg_job(payload: dict) -> dict:
    env = make_env(
        payload["env"], goal_position=payload["goal_position"], horizon=payload["horizon"]
    )
    cfg = baselines.DdpgConfig(**payload["config"])
    mod = baselines.get_reward_mod(payload["mod"]) if payload["mod"] else None
    model, log = baselines.ddpg_train(env, cfg, mod)
    baselines.save_ddpg_model(
        payload["model_path"], model,
        meta={
            "env": env.spec.to_dict(),
            "config": cfg.to_dict(),
            "reward_mod": payload["mod"],
        },
    )
    Path(payload["log_path"]).write_text(json.dumps(_log_rows_to_dicts(log)))
    return payload


def train_ddpg_batch(
    env_name: str,
    config: baselines.DdpgConfig,
    jobs_spec,  # iterable of (seed, mod_id or None)
    cache_dir,
    *,
    workers: int = 1,
    goal_position: float = 0.45,
    horizon: Optional[int] = None,
) -> dict:
    """Train DDPG variants (cached); returns {(seed, mod_id): TrainedRun}."""
    cache_dir = Path(cache_dir)
    cache_dir.mkdir(parents=True, exist_ok=True)
    jobs = []
    stems = {}
    for seed, mod_id in jobs_spec:
        cfg = dataclasses.replace(config, seed=seed)
        key = _config_key(
            f"ddpg-{env_name}-{mod_id or 'plain'}",
            {
                "config": cfg.to_dict(),
                "mod": mod_id,
                "goal_position": goal_position,
                "horizon": horizon,
            },
        )
        stem = cache_dir / key
        stems[(seed, mod_id)] = stem
        if not (stem.with_suffix(".model").exists() and stem.with_suffix(".log.json").exists()):
            jobs.append(
                {
                    "env": env_name,
                    "goal_position": goal_position,
                    "horizon": horizon,
                    "config": cfg.to_dict(),
                    "mod": mod_id,
                    "model_path": str(stem.with_suffix(".model")),
                    "log_path": str(stem.with_suffix(".log.json")),
                }
            )
    if jobs:
        if workers > 1:
            with ProcessPoolExecutor(max_workers=workers) as pool:
                list(pool.map(_train_ddpg_job, jobs))
        else:
            for job in jobs:
                _train_ddpg_job(job)
    out = {}
    for (seed, mod_id), stem in stems.items():
        log = _log_dicts_to_rows(json.loads(stem.with_suffix(".log.json").read_text()))
        out[(seed, mod_id)] = TrainedRun(
            seed, str(stem.with_suffix(".model")), log[-1].cumulative_reward, log
        )
    return out


# ---------------------------------------------------------------------------
# run_experiment: one evaluation pass over a trained/loaded configuration
# ---------------------------------------------------------------------------


@dataclasses.dataclass
class ExperimentSpec:
    env: str
    method: str  # "llql" | "ddpg" | "mpc" | "adjust"
    model_path: Optional[str] = None     # llql/ddpg model, or dynamics for mpc
    policy_path: Optional[str] = None    # for adjust: model file or "cmd:..."
    dynamics_path: Optional[str] = None  # for adjust
    goal: Optional[dict] = None
    reward_mod: Optional[str] = None     # mpc only
    mpc_horizon: int = 15
    mpc_candidates: int = 1000
    eval_runs: int = 10
    eval_seed0: int = 10_000
    goal_position: float = 0.45
    horizon: Optional[int] = None
    hazard_limit: Optional[float] = None
    v_d: Optional[float] = None


def _check_env_match(env, meta, path):
    spec = meta.get("env", {})
    if spec.get("state_dim") != env.state_dim or spec.get("action_dim") != env.action_dim:
        raise ValueError(
            f"model {path} was trained for {spec.get('name')} "
            f"({spec.get('state_dim')}x{spec.get('action_dim')}); "
            f"incompatible with {env.spec.name}"
        )


def load_policy(path_or_cmd: str, rng: Optional[np.random.Generator] = None):
    """Load a policy: a model file (llql or ddpg role) or "cmd:<argv>" for
    an external process speaking the JSON-lines protocol."""
    if path_or_cmd.startswith("cmd:"):
        return control.ExternalProcessPolicy(path_or_cmd[4:].split())
    from .nets import load_model

    meta = load_model(path_or_cmd).meta
    role = meta.get("role")
    if role == "llql":
        _, q, _ = core.load_llql_model(path_or_cmd)
        return control.LlqlPolicy(q, rng)
    if role == "ddpg":
        model, _ = baselines.load_ddpg_model(path_or_cmd)
        return model
    raise ValueError(f"{path_or_cmd}: role {role!r} is not a loadable policy")


def _metric_kwargs(env_name: str, spec: ExperimentSpec, goal) -> dict:
    kwargs: dict = {}
    vel_index = 1 if env_name == "mountain_car" else 2
    if spec.hazard_limit is not None:
        kwargs.update(hazard_index=vel_index, hazard_limit=spec.hazard_limit)
    if isinstance(goal, control.TrajectoryGoal) or spec.v_d is not None:
        v_d = spec.v_d if spec.v_d is not None else 0.025
        kwargs.update(vel_index=vel_index, vel_target=v_d)
        if env_name == "mountain_car":
            kwargs.update(vel_mode="at_goal")
        else:
            kwargs.update(vel_mode="active_mean", vel_active=goal.active if goal else None)
    return kwargs


def run_experiment(spec: ExperimentSpec) -> EvalReport:
    """Evaluate one configured method, returning the metric report."""
    env = make_env(spec.env, goal_position=spec.goal_position, horizon=spec.horizon)
    goal = goal_from_dict(spec.goal)
    meta: dict = {"method": spec.method, "goal": spec.goal, "reward_mod": spec.reward_mod}

    if spec.method == "llql":
        dyn, q, model_meta = core.load_llql_model(spec.model_path)
        _check_env_match(env, model_meta, spec.model_path)
        meta["model"] = spec.model_path

        def factory(seed):
            rng = np.random.default_rng(seed)
            if goal is None:
                return control.LlqlPolicy(q, rng)
            return control.GoalController(dyn, goal, qmodel=q, rng=rng)

    elif spec.method == "ddpg":
        model, model_meta = baselines.load_ddpg_model(spec.model_path)
        _check_env_match(env, model_meta, spec.model_path)
        meta["model"] = spec.model_path
        meta["trained_reward_mod"] = model_meta.get("reward_mod")

        def factory(seed):
            return model

    elif spec.method == "mpc":
        dyn, _, model_meta = core.load_llql_model(spec.model_path)
        _check_env_match(env, model_meta, spec.model_path)
        meta["model"] = spec.model_path
        if spec.env != "mountain_car":
            raise ValueError("the mpc baseline is defined for the mountain_car benchmark")
        mod = baselines.get_reward_mod(spec.reward_mod) if spec.reward_mod else None
        reward_fn = baselines.mountain_car_reward_fn(spec.goal_position, mod)
        cfg = baselines.MpcConfig(spec.mpc_horizon, spec.mpc_candidates)

        def factory(seed):
            return baselines.MpcPolicy(
                dyn, reward_fn, cfg, np.random.default_rng(seed),
                env.action_low, env.action_high,
            )

    elif spec.method == "adjust":
        if goal is None:
            raise ValueError("adjust requires a goal")
        dyn, _, dyn_meta = core.load_llql_model(spec.dynamics_path)
        _check_env_match(env, dyn_meta, spec.dynamics_path)
        meta["dynamics"] = spec.dynamics_path
        meta["policy"] = spec.policy_path
        policy = load_policy(spec.policy_path)

        def factory(seed):
            return control.GoalController(
                dyn, goal, policy=policy,
                action_low=env.action_low, action_high=env.action_high,
                rng=np.random.default_rng(seed),
            )

    else:
        raise ValueError(f"unknown method {spec.method!r}")

    rows = evaluate(
        env, factory, runs=spec.eval_runs, seed0=spec.eval_seed0,
        **_metric_kwargs(spec.env, spec, goal),
    )
    return EvalReport(rows=rows, env=env.spec.to_dict(), meta=meta)


# ---------------------------------------------------------------------------
# Sweeps
# ---------------------------------------------------------------------------


def sweep_short_term(
    model_path: str,
    kind: str,
    values,
    *,
    runs: int = 10,
    seed0: int = 10_000,
    goal_position: float = 0.45,
    gamma1: float = 1.0,
    gamma2: float = 2000.0,
    margin_offset: float = 0.0,
) -> list:
    """Evaluate a trained mountain-car model across short-term goal values.

    kind "constraint" sweeps the speed limit; kind "trajectory" sweeps the
    desired hilltop velocity.  Returns one row per value with mean/std
    steps to goal and the success count over `runs` episodes each.
    """
    dyn, q, _ = core.load_llql_model(model_path)
    out = []
    for value in values:
        env = make_env("mountain_car", goal_position=goal_position)
        if kind == "constraint":
            goal = mc_speed_limit_goal(bound=value, margin=value - margin_offset)
        elif kind == "trajectory":
            goal = mc_velocity_goal(v_d=value, gamma1=gamma1, gamma2=gamma2)
        else:
            raise ValueError(f"unknown sweep kind {kind!r}")

        def factory(seed):
            return control.GoalController(dyn, goal, qmodel=q, rng=np.random.default_rng(seed))

        rows = evaluate(env, factory, runs=runs, seed0=seed0)
        steps_mean, steps_std = _mean_std([r.steps for r in rows])
        out.append(
            {
                "value": float(value),
                "mean_steps": steps_mean,
                "std_steps": steps_std,
                "success": sum(1 for r in rows if r.success),
                "runs": runs,
            }
        )
    return out
