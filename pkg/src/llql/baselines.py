"""Comparison methods: DDPG with reward shaping, and random-shooting MPC.

DDPG is the standard actor-critic with target networks; the reward-mod
catalog reproduces the shaped rewards used to encode short-term goals the
traditional way.  The MPC baseline samples random action sequences through
the learned dynamics model and executes the first action of the best one.
"""

from __future__ import annotations

import dataclasses
import math
from typing import Callable, Optional

import numpy as np

from .core import (
    DynamicsModel,
    EpisodeStats,
    ExplorationNoise,
    ReplayBuffer,
    TrainingDiverged,
    Transition,
)
from .nets import Adam, Mlp, NonFiniteGradientError, Normalizer, save_model, load_model, soft_update


# ---------------------------------------------------------------------------
# Reward modifications
# ---------------------------------------------------------------------------


@dataclasses.dataclass(frozen=True)
class RewardMod:
    """Pure reward reshaping r' = apply(r, position, velocity, done).

    `position` and `velocity` are taken from the state the step arrived in.
    The callable is vectorized (works on scalars and arrays alike).
    """

    id: str
    apply: Callable


def reward_mod_catalog(
    v_d: float = 0.025,
    limit: float = 0.033,
    position_threshold: float = 0.45,
    c4_replaces: bool = True,
) -> list:
    """The eight shaped rewards: four trajectory (t1..t4), four constraint (c1..c4)."""

    def t1(r, pos, vel, done):
        return np.where(done, r - 5000.0 * np.abs(vel - v_d), r)

    def t2(r, pos, vel, done):
        return np.where(pos > position_threshold, r - 100.0 * np.abs(vel - v_d), r)

    def t3(r, pos, vel, done):
        r = np.where(pos > position_threshold, r - 100.0 * np.abs(vel - v_d), r)
        return np.where(done, r - 5000.0 * np.abs(vel - v_d), r)

    def t4(r, pos, vel, done):
        return np.where(done, r - 25000.0 * (vel - v_d) ** 2, r)

    def c1(r, pos, vel, done):
        return np.where(np.abs(vel) > limit, r - 10.0, r)

    def c2(r, pos, vel, done):
        return np.where(np.abs(vel) > limit, r - 100.0 * (np.abs(vel) - limit), r)

    def c3(r, pos, vel, done):
        return np.where(np.abs(vel) > limit, r - (100.0 * (np.abs(vel) - limit)) ** 2, r)

    def c4(r, pos, vel, done):
        replacement = -10.0 if c4_replaces else r - 10.0
        return np.where(np.abs(vel) > limit, replacement, r)

    return [
        RewardMod("t1", t1),
        RewardMod("t2", t2),
        RewardMod("t3", t3),
        RewardMod("t4", t4),
        RewardMod("c1", c1),
        RewardMod("c2", c2),
        RewardMod("c3", c3),
        RewardMod("c4", c4),
    ]


def get_reward_mod(mod_id: str, **kwargs) -> RewardMod:
    for mod in reward_mod_catalog(**kwargs):
        if mod.id == mod_id:
            return mod
    raise KeyError(f"unknown reward mod {mod_id!r}")


# ---------------------------------------------------------------------------
# DDPG
# ---------------------------------------------------------------------------


@dataclasses.dataclass
class DdpgConfig:
    episodes: int = 60
    batch: int = 8
    discount: float = 0.99
    tau: float = 0.1
    critic_lr: float = 1e-3
    actor_lr: float = 1e-4
    sigma0: float = 0.5
    sigma_decay: float = 0.99
    sigma_floor: float = 0.01
    buffer_capacity: int = 1_000_000
    normalizer_samples: int = 1000
    hidden_sizes: tuple = (200, 200)
    seed: int = 0
    dtype: str = "float32"

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["hidden_sizes"] = list(self.hidden_sizes)
        return d


@dataclasses.dataclass
class DdpgModel:
    """Actor-critic pair with target copies; the actor output is squashed to bounds."""

    actor: Mlp
    critic: Mlp
    actor_target: Mlp
    critic_target: Mlp
    normalizer: Normalizer
    action_low: np.ndarray
    action_high: np.ndarray

    def _squash(self, raw: np.ndarray) -> np.ndarray:
        center = (self.action_high + self.action_low) / 2.0
        half = (self.action_high - self.action_low) / 2.0
        return center + half * np.tanh(np.asarray(raw, dtype=np.float64))

    def act(self, x: np.ndarray) -> np.ndarray:
        z = self.normalizer.normalize(x)
        return self._squash(self.actor.forward(z))

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return self.act(x)


class _DdpgTrainer:
    def __init__(self, env, config: DdpgConfig, reward_mod: Optional[RewardMod]):
        self.env = env
        self.cfg = config
        self.reward_mod = reward_mod
        self.dtype = np.dtype(config.dtype)

        ss = np.random.SeedSequence(config.seed)
        init_rng, self.noise_rng, self.sample_rng, self.env_rng = (
            np.random.default_rng(c) for c in ss.spawn(4)
        )
        s, a = env.state_dim, env.action_dim
        hidden = tuple(config.hidden_sizes)
        self.actor = Mlp.create((s, *hidden, a), init_rng, self.dtype)
        self.critic = Mlp.create((s + a, *hidden, 1), init_rng, self.dtype)
        self.actor_target = self.actor.copy()
        self.critic_target = self.critic.copy()
        self.adam_actor = Adam(self.actor, config.actor_lr)
        self.adam_critic = Adam(self.critic, config.critic_lr)
        self.buffer = ReplayBuffer(config.buffer_capacity, s, a)
        self.noise = ExplorationNoise(config.sigma0, config.sigma_decay, config.sigma_floor)
        self.normalizer = Normalizer.identity(s)
        self.normalizer_frozen = False
        self.low = np.asarray(env.action_low, dtype=np.float64)
        self.high = np.asarray(env.action_high, dtype=np.float64)
        self.center = (self.high + self.low) / 2.0
        self.half = (self.high - self.low) / 2.0

    def model(self) -> DdpgModel:
        return DdpgModel(
            self.actor, self.critic, self.actor_target, self.critic_target,
            self.normalizer, self.low, self.high,
        )

    def _act(self, x: np.ndarray) -> np.ndarray:
        z = self.normalizer.normalize(x)
        u = self.center + self.half * np.tanh(self.actor.forward(z).astype(np.float64))
        u = u + self.noise.sample(self.noise_rng, self.env.action_dim)
        return np.clip(u, self.low, self.high)

    def _update(self, batch) -> float:
        dt = self.dtype
        n = len(batch)
        cfg = self.cfg
        Z = self.normalizer.normalize(batch.states).astype(dt)
        Z2 = self.normalizer.normalize(batch.next_states).astype(dt)
        U = batch.actions.astype(dt)

        # critic target: y = r + gamma * (1 - done) * Q'(x', mu'(x'))
        raw2 = self.actor_target.forward(Z2).astype(np.float64)
        u2 = (self.center + self.half * np.tanh(raw2)).astype(dt)
        q2 = self.critic_target.forward(np.concatenate([Z2, u2], axis=1)).astype(np.float64)[:, 0]
        y = batch.rewards + cfg.discount * (~batch.dones) * q2

        # critic regression (mean squared Bellman error)
        inp = np.concatenate([Z, U], axis=1)
        q, cache_c = self.critic.forward_cached(inp)
        res = y - q[:, 0].astype(np.float64)
        loss = float((res**2).mean())
        gq = ((-2.0 / n) * res).astype(dt)[:, None]
        grads_c, _ = self.critic.backward_cached(cache_c, gq, need_input_grad=False)
        self.adam_critic.step(self.critic, grads_c, context="critic loss")

        # actor ascends Q(x, mu(x)): gradient of -mean Q through the critic input
        raw, cache_a = self.actor.forward_cached(Z)
        tanh_raw = np.tanh(raw.astype(np.float64))
        u_pi = (self.center + self.half * tanh_raw).astype(dt)
        inp_pi = np.concatenate([Z, u_pi], axis=1)
        _, cache_q = self.critic.forward_cached(inp_pi)
        _, gin = self.critic.backward_cached(cache_q, np.full((n, 1), -1.0 / n, dtype=dt))
        du = gin[:, self.env.state_dim :].astype(np.float64)
        draw = (du * self.half * (1.0 - tanh_raw**2)).astype(dt)
        grads_a, _ = self.actor.backward_cached(cache_a, draw, need_input_grad=False)
        self.adam_actor.step(self.actor, grads_a, context="actor objective")

        soft_update(self.critic_target, self.critic, cfg.tau)
        soft_update(self.actor_target, self.actor, cfg.tau)
        return loss

    def run(self) -> tuple:
        cfg = self.cfg
        log = []
        for episode in range(1, cfg.episodes + 1):
            env_seed = int(self.env_rng.integers(0, 2**31 - 1))
            x = self.env.reset(env_seed)
            ep_reward = 0.0
            loss_sum = 0.0
            steps = 0
            steps_to_goal = -1
            for k in range(self.env.horizon):
                u = self._act(x)
                step = self.env.step(x, u)
                reward = step.reward
                if self.reward_mod is not None:
                    reward = float(
                        self.reward_mod.apply(
                            reward, step.next_state[0], step.next_state[1], step.done
                        )
                    )
                self.buffer.add(Transition(x, u, step.next_state, reward, step.done))
                ep_reward += reward
                steps = k + 1
                if not self.normalizer_frozen and len(self.buffer) >= cfg.normalizer_samples:
                    self.normalizer = Normalizer.fit(self.buffer.states(cfg.normalizer_samples))
                    self.normalizer_frozen = True
                try:
                    loss = self._update(self.buffer.sample(cfg.batch, self.sample_rng))
                except NonFiniteGradientError as exc:
                    raise TrainingDiverged(
                        str(exc), {"episode": episode, "step": k, "reason": str(exc)}
                    ) from exc
                if not math.isfinite(loss):
                    raise TrainingDiverged(
                        f"critic loss became non-finite at episode {episode}, step {k}",
                        {"episode": episode, "step": k, "loss": loss},
                    )
                loss_sum += loss
                x = step.next_state
                if step.done:
                    if self.env.goal_reached(x):
                        steps_to_goal = steps
                    break
            self.noise.update(ep_reward)
            log.append(
                EpisodeStats(
                    episode, ep_reward, steps, float("nan"), loss_sum / max(steps, 1),
                    self.noise.sigma, steps_to_goal,
                )
            )
        return self.model(), log


def ddpg_train(env, config: DdpgConfig, reward_mod: Optional[RewardMod] = None):
    """Train DDPG; deterministic given (env, config.seed, reward_mod)."""
    return _DdpgTrainer(env, config, reward_mod).run()


def save_ddpg_model(path, model: DdpgModel, meta: dict) -> None:
    meta = dict(meta)
    meta["role"] = "ddpg"
    save_model(
        path,
        {"actor": model.actor, "critic": model.critic},
        model.normalizer,
        meta,
    )


def load_ddpg_model(path) -> tuple:
    mf = load_model(path)
    if mf.meta.get("role") != "ddpg":
        raise ValueError(f"{path} does not hold a ddpg model")
    env_spec = mf.meta["env"]
    model = DdpgModel(
        mf.nets["actor"], mf.nets["critic"],
        mf.nets["actor"].copy(), mf.nets["critic"].copy(),
        mf.normalizer,
        np.asarray(env_spec["action_low"], dtype=np.float64),
        np.asarray(env_spec["action_high"], dtype=np.float64),
    )
    return model, mf.meta


# ---------------------------------------------------------------------------
# Random-shooting MPC
# ---------------------------------------------------------------------------


@dataclasses.dataclass
class MpcConfig:
    horizon: int = 15
    candidates: int = 1000
    resample: bool = True

    def __post_init__(self):
        if self.horizon < 1 or self.candidates < 1:
            raise ValueError("horizon and candidates must be >= 1")


def mpc_action(
    dyn: DynamicsModel,
    x: np.ndarray,
    reward_fn: Callable,
    cfg: MpcConfig,
    rng: np.random.Generator,
    action_low,
    action_high,
    candidates: Optional[np.ndarray] = None,
) -> np.ndarray:
    """First action of the best of `candidates` random action sequences.

    Sequences are drawn candidate-major, so a longer draw from the same
    generator state extends (never replaces) a shorter one.  Rollout scores
    are undiscounted sums of `reward_fn(states, actions, next_states)`,
    which returns (rewards, done) per candidate; candidates stop
    accumulating reward once done.
    """
    low = np.asarray(action_low, dtype=np.float64)
    high = np.asarray(action_high, dtype=np.float64)
    k, h = cfg.candidates, cfg.horizon
    if candidates is None:
        candidates = rng.uniform(low, high, size=(k, h, low.size))
    scores = np.zeros(k)
    alive = np.ones(k, dtype=bool)
    X = np.broadcast_to(np.asarray(x, dtype=np.float64), (k, len(x))).copy()
    for t in range(h):
        U = candidates[:, t, :]
        Xn = dyn.predict_next_batch(X, U)
        rewards, done = reward_fn(X, U, Xn)
        scores += np.where(alive, rewards, 0.0)
        alive &= ~np.asarray(done, dtype=bool)
        X = Xn
    best = int(np.argmax(scores))
    return candidates[best, 0].copy()


class MpcPolicy:
    """Stateful wrapper running `mpc_action` each step (callable x -> u)."""

    def __init__(self, dyn, reward_fn, cfg: MpcConfig, rng, action_low, action_high):
        self.dyn = dyn
        self.reward_fn = reward_fn
        self.cfg = cfg
        self.rng = rng
        self.low = action_low
        self.high = action_high
        self._frozen = None
        if not cfg.resample:
            self._frozen = rng.uniform(
                np.asarray(action_low, dtype=np.float64),
                np.asarray(action_high, dtype=np.float64),
                size=(cfg.candidates, cfg.horizon, len(np.atleast_1d(action_low))),
            )

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return mpc_action(
            self.dyn, x, self.reward_fn, self.cfg, self.rng, self.low, self.high,
            candidates=self._frozen,
        )


def mountain_car_reward_fn(goal_position: float, mod: Optional[RewardMod] = None) -> Callable:
    """Batched mountain-car step reward for MPC rollouts (goal bonus included)."""

    def fn(X, U, Xn):
        r = -0.1 * U[:, 0] ** 2
        done = Xn[:, 0] >= goal_position
        r = r + np.where(done, 100.0, 0.0)
        if mod is not None:
            r = mod.apply(r, Xn[:, 0], Xn[:, 1], done)
        return r, done

    return fn
