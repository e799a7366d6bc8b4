import os
os.environ.setdefault("OMP_NUM_THREADS", "1")
os.environ.setdefault("OPENBLAS_NUM_THREADS", "1")
import sys, time, json
import numpy as np
from concurrent.futures import ProcessPoolExecutor

sys.path.insert(0, "/root/pkg/src")
from llql.envs import MountainCar
from llql import core, linalg
from llql.control import LlqlPolicy
from llql.experiments import evaluate


def quick_eval(qmodel, runs=3, horizon=1000):
    env = MountainCar(horizon=horizon)
    rows = evaluate(env, lambda seed: LlqlPolicy(qmodel, np.random.default_rng(seed)),
                    runs=runs, seed0=10_000)
    return [r.steps if r.success else -1 for r in rows]


class InstrumentedTrainer(core._Trainer):
    def __init__(self, env, cfg, tag):
        super().__init__(env, cfg)
        self.tag = tag
        self.outf = open(f"/root/pkg/.probe/{tag}.jsonl", "w", buffering=1)

    def run_instrumented(self):
        cfg = self.cfg
        t0 = time.time()
        for episode in range(1, cfg.episodes + 1):
            env_seed = int(self.env_rng.integers(0, 2**31 - 1))
            x = self.env.reset(env_seed)
            ep_reward, steps, goal = 0.0, 0, -1
            for k in range(self.env.horizon):
                u = self._act(x)
                step = self.env.step(x, u)
                self.buffer.add(core.Transition(x, u, step.next_state, step.reward, step.done))
                ep_reward += step.reward
                steps = k + 1
                if not self.normalizer_frozen and len(self.buffer) >= cfg.normalizer_samples:
                    self.normalizer = core.Normalizer.fit(self.buffer.states(cfg.normalizer_samples))
                    self.normalizer_frozen = True
                for _ in range(cfg.short_iters):
                    self._short_update(self.buffer.sample(cfg.short_batch, self.sample_rng))
                for _ in range(cfg.long_iters):
                    self._long_update(self.buffer.sample(cfg.long_batch, self.sample_rng))
                x = step.next_state
                if step.done:
                    if self.env.goal_reached(x):
                        goal = steps
                    break
            self.noise.update(ep_reward)
            rec = dict(ep=episode, r=round(ep_reward,1), steps=steps, goal=goal,
                       sigma=round(self.noise.sigma,3), mins=round((time.time()-t0)/60,1))
            if episode % 10 == 0:
                rec["eval"] = quick_eval(self.q_model())
            self.outf.write(json.dumps(rec) + "\n")
        self.save(f"/root/pkg/.probe/{self.tag}.model", cfg.episodes)
        return None


def run_lane(lane):
    tag, kw = lane
    cfg = core.TrainConfig(episodes=100, seed=1, **kw)
    InstrumentedTrainer(MountainCar(), cfg, tag).run_instrumented()
    return tag


if __name__ == "__main__":
    lanes = [
        ("lane_default", {}),
        ("lane_squared", {"squared_bellman": True}),
    ]
    with ProcessPoolExecutor(2) as pool:
        for tag in pool.map(run_lane, lanes):
            print("done", tag, flush=True)
