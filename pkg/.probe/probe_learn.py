import os
os.environ.setdefault("OMP_NUM_THREADS", "1")
os.environ.setdefault("OPENBLAS_NUM_THREADS", "1")
import sys, time, json
import numpy as np
from concurrent.futures import ProcessPoolExecutor

sys.path.insert(0, "/root/pkg/src")
from llql.envs import MountainCar
from llql import core, linalg


def eval_policy(env, q, n_runs=10, seed0=10_000):
    rng = np.random.default_rng(123)
    rows = []
    for i in range(n_runs):
        x = env.reset(seed0 + i)
        steps_to_goal = -1
        total = 0.0
        for k in range(env.horizon):
            z = q.normalizer.normalize(x)
            h = q.h_net.forward(z).astype(np.float64)
            d = q.d_net.forward(z).astype(np.float64).reshape(1, 1)
            if np.linalg.norm(d) < 1e-8:
                u = rng.uniform(env.action_low, env.action_high)
            else:
                u = linalg.pinv_action(h, d)
            u = np.clip(u, env.action_low, env.action_high)
            sr = env.step(x, u)
            total += sr.reward
            x = sr.next_state
            if sr.done:
                if env.goal_reached(x):
                    steps_to_goal = k + 1
                break
        rows.append((steps_to_goal, total))
    return rows


def run_seed(seed):
    t0 = time.time()
    env = MountainCar()
    cfg = core.TrainConfig(episodes=60, seed=seed)
    res = core.train(env, cfg)
    goals = [r.steps_to_goal for r in res.log]
    first = next((i + 1 for i, g in enumerate(goals) if g > 0), -1)
    rewards = [r.cumulative_reward for r in res.log]
    ev = eval_policy(MountainCar(), res.qmodel)
    succ = sum(1 for s, _ in ev if s > 0)
    return {
        "seed": seed,
        "minutes": (time.time() - t0) / 60,
        "first_success_episode": first,
        "train_successes": sum(1 for g in goals if g > 0),
        "final10_rewards": [round(r, 1) for r in rewards[-10:]],
        "final_sigma": res.log[-1].sigma,
        "eval_success": f"{succ}/10",
        "eval_steps": [s for s, _ in ev],
    }


if __name__ == "__main__":
    seeds = [0, 1, 2, 3, 4, 5]
    with ProcessPoolExecutor(2) as pool:
        for out in pool.map(run_seed, seeds):
            print(json.dumps(out), flush=True)
