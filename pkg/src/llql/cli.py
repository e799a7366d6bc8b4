"""Command-line interface.

Subcommands: train, eval, adjust, compare, sweep.  Config files are flat
`key = value` text (one pair per line, `#` comments); keys must match the
target config's fields.  Exit codes: 0 success, 2 configuration error,
3 runtime failure.
"""

import os

for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
    os.environ.setdefault(_var, "1")

import argparse
import dataclasses
import sys
from pathlib import Path


class ConfigError(Exception):
    pass


def parse_config_file(path) -> dict:
    """Parse a flat key=value config file into a {key: str} dict."""
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    out = {}
    for lineno, raw in enumerate(path.read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value', got {raw!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if not key:
            raise ConfigError(f"{path}:{lineno}: empty key")
        out[key] = value
    return out


def _coerce(value: str, target_type):
    if target_type is bool:
        low = value.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {value!r}")
    if target_type is tuple:
        return tuple(int(v) for v in value.replace(",", " ").split())
    return target_type(value)


def build_config(cls, overrides: dict):
    """Instantiate a config dataclass from string overrides, type-checked."""
    fields = {f.name: f for f in dataclasses.fields(cls)}
    kwargs = {}
    for key, value in overrides.items():
        if key not in fields:
            raise ConfigError(
                f"unknown config key {key!r} for {cls.__name__}; "
                f"valid keys: {', '.join(sorted(fields))}"
            )
        ftype = fields[key].type
        base = {"int": int, "float": float, "str": str, "bool": bool, "tuple": tuple}.get(
            str(ftype), None
        )
        if base is None:
            base = type(fields[key].default) if fields[key].default is not None else str
        try:
            kwargs[key] = _coerce(value, base)
        except ValueError as exc:
            raise ConfigError(f"config key {key!r}: {exc}") from exc
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc


def _out_dir(args) -> Path:
    out = args.out or os.environ.get("LLQL_OUTPUT_DIR") or "out"
    path = Path(out)
    path.mkdir(parents=True, exist_ok=True)
    return path


def _goal_dict_from_args(args, env_name: str):
    if args.goal in (None, "none"):
        return None
    if args.goal == "trajectory":
        if env_name == "pendulum":
            return {
                "kind": "pendulum_trajectory",
                "v_d": args.v_d if args.v_d is not None else 0.0,
                "gamma1": args.gamma1,
                "gamma2": args.gamma2 if args.gamma2 is not None else 100.0,
            }
        return {
            "kind": "mc_trajectory",
            "v_d": args.v_d if args.v_d is not None else 0.025,
            "gamma1": args.gamma1,
            "gamma2": args.gamma2 if args.gamma2 is not None else 2000.0,
            "switch_position": args.switch_position,
        }
    if args.goal == "constraint":
        if env_name == "pendulum":
            return {
                "kind": "pendulum_constraint",
                "bound": args.bound if args.bound is not None else 5.8,
                "margin": args.margin if args.margin is not None else 0.0,
            }
        bound = args.bound if args.bound is not None else 0.033
        return {
            "kind": "mc_constraint",
            "bound": bound,
            "margin": args.margin if args.margin is not None else bound,
        }
    raise ConfigError(f"unknown goal {args.goal!r}")


def _require_file(path, what: str) -> str:
    if path is None:
        raise ConfigError(f"missing required {what}")
    if not Path(path).exists():
        raise ConfigError(f"{what} not found: {path}")
    return str(path)


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------


def cmd_train(args) -> int:
    from . import baselines, core, experiments
    from .envs import make_env

    overrides = parse_config_file(args.config) if args.config else {}
    if args.seed is not None:
        overrides["seed"] = str(args.seed)
    out = _out_dir(args)
    env = make_env(args.env, goal_position=args.goal_position, horizon=args.horizon)

    if args.method == "llql":
        cfg = build_config(core.TrainConfig, overrides)
        result = core.train(env, cfg, checkpoint_dir=out if cfg.checkpoint_every else None)
        core.save_llql_model(
            out / "model.model", result.dynamics, result.qmodel,
            meta={"env": env.spec.to_dict(), "config": cfg.to_dict(), "episode": cfg.episodes},
        )
        core.log_to_csv(result.log, out / "log.csv")
    elif args.method == "ddpg":
        cfg = build_config(baselines.DdpgConfig, overrides)
        mod = baselines.get_reward_mod(args.reward_mod) if args.reward_mod else None
        model, log = baselines.ddpg_train(env, cfg, mod)
        baselines.save_ddpg_model(
            out / "model.model", model,
            meta={"env": env.spec.to_dict(), "config": cfg.to_dict(), "reward_mod": args.reward_mod},
        )
        core.log_to_csv(log, out / "log.csv")
    elif args.method == "dynamics":
        cfg = build_config(core.TrainConfig, overrides)
        policy = experiments.load_policy(_require_file(args.policy, "policy"))
        result = core.train_dynamics(env, cfg, policy)
        core.save_llql_model(
            out / "model.model", result.dynamics, None,
            meta={"env": env.spec.to_dict(), "config": cfg.to_dict(), "episode": cfg.episodes},
        )
        core.log_to_csv(result.log, out / "log.csv")
    else:
        raise ConfigError(f"unknown training method {args.method!r}")
    print(f"wrote {out / 'model.model'} and {out / 'log.csv'}")
    return 0


def _model_env_name(path: str) -> tuple:
    from .nets import load_model

    meta = load_model(path).meta
    env_spec = meta.get("env", {})
    return env_spec.get("name"), env_spec


def cmd_eval(args) -> int:
    from . import experiments, reports

    model = _require_file(args.model, "model path")
    env_name, env_spec = _model_env_name(model)
    goal_position = args.goal_position
    if goal_position is None:
        goal_position = env_spec.get("goal_position") or 0.45
    spec = experiments.ExperimentSpec(
        env=env_name,
        method=args.method,
        model_path=model,
        goal=_goal_dict_from_args(args, env_name),
        reward_mod=args.reward_mod,
        mpc_horizon=args.mpc_horizon,
        mpc_candidates=args.mpc_candidates,
        eval_runs=args.runs,
        eval_seed0=args.seed0,
        goal_position=goal_position,
        horizon=args.horizon,
        hazard_limit=args.hazard,
        v_d=args.v_d,
    )
    report = experiments.run_experiment(spec)
    out = _out_dir(args)
    written = reports.emit_report(report, out, basename=args.basename)
    agg = report.aggregates()
    print(f"success {agg['success']}/{agg['runs']}, mean steps {agg['mean_steps']:.1f}")
    for p in written:
        print(f"wrote {p}")
    return 0


def cmd_adjust(args) -> int:
    from . import experiments, reports

    dynamics = _require_file(args.dynamics, "dynamics model path")
    policy = args.policy
    if policy is None:
        raise ConfigError("missing required policy (model path or cmd:...)")
    if not policy.startswith("cmd:"):
        policy = _require_file(policy, "policy model path")
    env_name, env_spec = _model_env_name(dynamics)
    goal = _goal_dict_from_args(args, env_name)
    if goal is None:
        raise ConfigError("adjust requires --goal trajectory or --goal constraint")
    spec = experiments.ExperimentSpec(
        env=env_name,
        method="adjust",
        policy_path=policy,
        dynamics_path=dynamics,
        goal=goal,
        eval_runs=args.runs,
        eval_seed0=args.seed0,
        goal_position=env_spec.get("goal_position") or 0.45,
        horizon=args.horizon,
        hazard_limit=args.hazard,
        v_d=args.v_d,
    )
    report = experiments.run_experiment(spec)
    out = _out_dir(args)
    written = reports.emit_report(report, out, basename=args.basename)
    for p in written:
        print(f"wrote {p}")
    return 0


def cmd_compare(args) -> int:
    from . import compare

    out = _out_dir(args)
    cache = Path(args.cache) if args.cache else out / "cache"
    paths = compare.build_table(
        args.table,
        cache_dir=cache,
        out_dir=out,
        workers=args.workers,
        llql_seeds=tuple(range(args.llql_seeds)),
        ddpg_seeds=tuple(range(args.ddpg_seeds)),
        runs=args.runs,
        mpc_candidates=args.mpc_candidates,
        mpc_horizon=args.mpc_horizon,
    )
    for p in paths:
        print(f"wrote {p}")
    return 0


def cmd_sweep(args) -> int:
    from . import experiments, reports

    model = _require_file(args.model, "model path")
    try:
        values = [float(v) for v in args.values.split(",") if v.strip()]
    except ValueError as exc:
        raise ConfigError(f"bad --values list: {exc}") from exc
    rows = experiments.sweep_short_term(
        model, args.kind, values, runs=args.runs, seed0=args.seed0,
        gamma1=args.gamma1, gamma2=args.gamma2 if args.gamma2 is not None else 2000.0,
    )
    out = _out_dir(args)
    path = out / "sweep.csv"
    reports.write_sweep(rows, path)
    print(f"wrote {path}")
    return 0


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------


def _add_goal_args(p):
    p.add_argument("--goal", choices=["none", "trajectory", "constraint"], default="none")
    p.add_argument("--v-d", dest="v_d", type=float, default=None)
    p.add_argument("--gamma1", type=float, default=1.0)
    p.add_argument("--gamma2", type=float, default=None)
    p.add_argument("--switch-position", dest="switch_position", type=float, default=0.0)
    p.add_argument("--bound", type=float, default=None)
    p.add_argument("--margin", type=float, default=None)
    p.add_argument("--hazard", type=float, default=None, help="|state| limit for counting s_out")


def _add_eval_args(p):
    p.add_argument("--runs", type=int, default=10)
    p.add_argument("--seed0", type=int, default=10_000)
    p.add_argument("--horizon", type=int, default=None)
    p.add_argument("--basename", default="report")
    p.add_argument("--out", default=None)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="llql",
        description="Locally linear Q-learning: training, evaluation, and comparisons",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a model")
    p.add_argument("--method", choices=["llql", "ddpg", "dynamics"], default="llql")
    p.add_argument("--env", choices=["mountain_car", "pendulum"], required=True)
    p.add_argument("--config", default=None, help="flat key=value config file")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--goal-position", dest="goal_position", type=float, default=0.45)
    p.add_argument("--horizon", type=int, default=None)
    p.add_argument("--reward-mod", dest="reward_mod", default=None)
    p.add_argument("--policy", default=None, help="data-collection policy for --method dynamics")
    p.add_argument("--out", default=None)
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval", help="evaluate a trained model, optionally with a goal")
    p.add_argument("--model", required=False)
    p.add_argument("--method", choices=["llql", "ddpg", "mpc"], default="llql")
    p.add_argument("--reward-mod", dest="reward_mod", default=None)
    p.add_argument("--mpc-horizon", dest="mpc_horizon", type=int, default=15)
    p.add_argument("--mpc-candidates", dest="mpc_candidates", type=int, default=1000)
    p.add_argument("--goal-position", dest="goal_position", type=float, default=None)
    _add_goal_args(p)
    _add_eval_args(p)
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("adjust", help="apply a short-term goal to a pre-trained policy")
    p.add_argument("--policy", required=False, help="policy model path or cmd:<argv>")
    p.add_argument("--dynamics", required=False, help="dynamics model path")
    _add_goal_args(p)
    _add_eval_args(p)
    p.set_defaults(fn=cmd_adjust)

    p = sub.add_parser("compare", help="reproduce a comparison table")
    p.add_argument(
        "--table",
        choices=["trajectory", "constraint", "pendulum_trajectory", "pendulum_constraint"],
        required=True,
    )
    p.add_argument("--cache", default=None)
    p.add_argument("--workers", type=int, default=2)
    p.add_argument("--llql-seeds", dest="llql_seeds", type=int, default=20)
    p.add_argument("--ddpg-seeds", dest="ddpg_seeds", type=int, default=3)
    p.add_argument("--runs", type=int, default=10)
    p.add_argument("--mpc-horizon", dest="mpc_horizon", type=int, default=15)
    p.add_argument("--mpc-candidates", dest="mpc_candidates", type=int, default=1000)
    p.add_argument("--out", default=None)
    p.set_defaults(fn=cmd_compare)

    p = sub.add_parser("sweep", help="sweep a short-term goal value on a trained model")
    p.add_argument("--model", required=False)
    p.add_argument("--kind", choices=["constraint", "trajectory"], required=True)
    p.add_argument("--values", required=True, help="comma-separated goal values")
    p.add_argument("--gamma1", type=float, default=1.0)
    p.add_argument("--gamma2", type=float, default=None)
    p.add_argument("--runs", type=int, default=10)
    p.add_argument("--seed0", type=int, default=10_000)
    p.add_argument("--out", default=None)
    p.set_defaults(fn=cmd_sweep)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.fn(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except FileNotFoundError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # runtime failure contract
        print(f"error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
