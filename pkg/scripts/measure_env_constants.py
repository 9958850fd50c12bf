#!/usr/bin/env python3
"""Measure the frozen environment constants in odt_lab/envs.py.

Estimates expert and random mean returns for both environments, then
calibrates the "medium" dataset noise so the dataset's mean return lands
near expert/3 (inside the [0.25, 0.45] * expert band). Prints the values to
paste into envs.py. Rerun only if environment dynamics change.
"""

import argparse

import numpy as np

from odt_lab import rng as rng_mod
from odt_lab.envs import GridGoal, PointCtrl, _noisy_expert, rollout_policy


def mean_return(env, policy_fn, n, seed, label):
    rng = rng_mod.np_rng(seed, "data")
    rets = [rollout_policy(env, policy_fn, rng).total_return for _ in range(n)]
    print(f"  {label}: mean {np.mean(rets):.4f}  std {np.std(rets):.4f}  n={n}")
    return float(np.mean(rets))


def calibrate_medium(env, target, grid, n, seed):
    best, best_gap = None, np.inf
    for noise in grid:
        rng = rng_mod.np_rng(seed, "data")
        policy = _noisy_expert(env, noise)
        rets = [rollout_policy(env, policy, rng).total_return for _ in range(n)]
        m = float(np.mean(rets))
        gap = abs(m - target)
        print(f"  noise {noise:.3f}: mean return {m:.4f} (target {target:.4f})")
        if gap < best_gap:
            best, best_gap = noise, gap
    return best


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--episodes", type=int, default=2000)
    ap.add_argument("--seed", type=int, default=20260815)
    args = ap.parse_args()

    for env in (PointCtrl(), GridGoal()):
        print(f"== {env.spec.name} ==")
        expert = mean_return(env, _noisy_expert(env, 0.0), args.episodes, args.seed, "expert")
        rand_policy = lambda s, r: r.uniform(-1.0, 1.0, size=2)
        rand = mean_return(env, rand_policy, args.episodes, args.seed + 1, "random")
        if isinstance(env, GridGoal):
            # The 64-step random walker already reaches the goal ~35% of the
            # time, so expert/3 sits *below* the random floor and is
            # unattainable. Aim between the floor (0.35) and the top of the
            # [0.25, 0.45]*expert calibration band: the dataset stays
            # distinguishable from random while leaving finetuning headroom.
            target = 0.42 * expert
            grid = np.arange(0.90, 1.001, 0.01)
        else:
            # The feedback controller shrugs off small action noise; only
            # sigma well past the action box meaningfully degrades it.
            target = expert / 3.0
            grid = np.concatenate([np.arange(2.0, 8.01, 0.5), [9.0, 10.0, 12.0]])
        noise = calibrate_medium(env, target, grid, args.episodes // 2, args.seed + 2)
        print(f"  => expert_return={expert:.4f} random_return={rand:.4f} medium_noise={noise:.3f}")
        print(f"     band check: medium target {target:.3f} in "
              f"[{0.25*expert:.3f}, {0.45*expert:.3f}]")


if __name__ == "__main__":
    main()
