"""Self-contained toy environments, scripted experts, and offline datasets.

Two tasks, chosen to exercise the two reward regimes the pipeline cares
about:

- ``pointctrl``: dense reward. A 2-d double integrator with damped velocity;
  state is ``[x0, x1, v0, v1]``, actions live in ``[-1, 1]^2``. Dynamics:
  ``x' = x + 0.1 v``, ``v' = 0.9 v + 0.1 a``. Reward ``max(0, 1 - |x' - target|)``
  with the target at the origin, so loitering at the target collects ~1 per
  step. Episodes end when ``|x| > 5`` or after 100 steps.

- ``gridgoal``: sparse reward. An 8x8 grid; the state is
  ``[ax, ay, gx, gy] / 7``. The continuous action in ``[-1, 1]^2`` is
  discretized to a 4-neighborhood move along the component with the larger
  magnitude (ties go to the x axis; an all-zero action stands still). Reward
  is 1 exactly when the goal cell is reached, which also ends the episode;
  otherwise 0, with a timeout after 64 steps.

Scripted experts (a damped proportional controller, greedy Manhattan moves)
provide demonstration data; ``generate_offline_dataset`` corrupts them with
calibrated noise to produce "medium" quality datasets whose mean return sits
around a third of expert level, and "medium-replay" mixtures whose quality
anneals from near-random to medium across the dataset.

Constants below marked MEASURED were produced once by
``scripts/measure_env_constants.py`` and are frozen; rerun the script to
regenerate them if the environments change.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Protocol

import numpy as np

from .trajectory import Trajectory


@dataclass(frozen=True)
class EnvSpec:
    """Static facts about a task, including measured return anchors."""

    name: str
    state_dim: int
    action_dim: int
    action_low: float
    action_high: float
    max_episode_len: int
    expert_return: float
    random_return: float
    medium_noise: float  # calibrated default noise for "medium" datasets


class Env(Protocol):
    spec: EnvSpec

    def reset(self, rng: np.random.Generator) -> np.ndarray: ...
    def step(self, action: np.ndarray) -> tuple[np.ndarray, float, bool]: ...
    def expert_action(self, state: np.ndarray) -> np.ndarray: ...


# MEASURED constants (scripts/measure_env_constants.py, 2000 episodes each).
# pointctrl medium noise is calibrated to land mean return near expert/3;
# gridgoal aims at 0.42*expert because the 64-step random walker already
# succeeds 35% of the time, putting expert/3 below the random floor.
_POINTCTRL_EXPERT_RETURN = 91.0750
_POINTCTRL_RANDOM_RETURN = 23.3534
_POINTCTRL_MEDIUM_SIGMA = 10.0  # clipped feedback control shrugs off small noise
_GRIDGOAL_EXPERT_RETURN = 1.0  # expert always reaches the goal within 14 moves
_GRIDGOAL_RANDOM_RETURN = 0.3515
_GRIDGOAL_MEDIUM_EPS = 0.98

POINTCTRL_SPEC = EnvSpec(
    name="pointctrl",
    state_dim=4,
    action_dim=2,
    action_low=-1.0,
    action_high=1.0,
    max_episode_len=100,
    expert_return=_POINTCTRL_EXPERT_RETURN,
    random_return=_POINTCTRL_RANDOM_RETURN,
    medium_noise=_POINTCTRL_MEDIUM_SIGMA,
)

GRIDGOAL_SPEC = EnvSpec(
    name="gridgoal",
    state_dim=4,
    action_dim=2,
    action_low=-1.0,
    action_high=1.0,
    max_episode_len=64,
    expert_return=_GRIDGOAL_EXPERT_RETURN,
    random_return=_GRIDGOAL_RANDOM_RETURN,
    medium_noise=_GRIDGOAL_MEDIUM_EPS,
)


class PointCtrl:
    """Damped 2-d double integrator with dense distance-shaped reward."""

    spec = POINTCTRL_SPEC

    def __init__(self) -> None:
        self._x = np.zeros(2)
        self._v = np.zeros(2)
        self._t = 0
        self._done = True

    def reset(self, rng: np.random.Generator) -> np.ndarray:
        self._x = rng.uniform(-1.0, 1.0, size=2)
        self._v = np.zeros(2)
        self._t = 0
        self._done = False
        return self._observe()

    def force_state(self, state: np.ndarray) -> np.ndarray:
        """Place the system at an arbitrary (x, v); test/diagnostic hook."""
        state = np.asarray(state, dtype=np.float64)
        if state.shape != (4,):
            raise ValueError(f"expected state shape (4,), got {state.shape}")
        self._x = state[:2].copy()
        self._v = state[2:].copy()
        self._t = 0
        self._done = False
        return self._observe()

    def _observe(self) -> np.ndarray:
        return np.concatenate([self._x, self._v])

    def step(self, action: np.ndarray) -> tuple[np.ndarray, float, bool]:
        if self._done:
            raise RuntimeError("episode finished")
        a = np.clip(np.asarray(action, dtype=np.float64), -1.0, 1.0)
        if a.shape != (2,):
            raise ValueError(f"expected action shape (2,), got {a.shape}")
        self._x = self._x + 0.1 * self._v
        self._v = 0.9 * self._v + 0.1 * a
        self._t += 1
        dist = float(np.linalg.norm(self._x))
        reward = max(0.0, 1.0 - dist)
        self._done = dist > 5.0 or self._t >= self.spec.max_episode_len
        return self._observe(), reward, self._done

    def expert_action(self, state: np.ndarray) -> np.ndarray:
        """Damped proportional controller toward the origin."""
        state = np.asarray(state, dtype=np.float64)
        x, v = state[:2], state[2:]
        return np.clip(-2.0 * x - v, -1.0, 1.0)


class GridGoal:
    """8x8 sparse-reward goal reaching with discretized continuous actions."""

    spec = GRIDGOAL_SPEC
    SIZE = 8

    def __init__(self) -> None:
        self._agent = np.zeros(2, dtype=np.int64)
        self._goal = np.zeros(2, dtype=np.int64)
        self._t = 0
        self._done = True

    def reset(self, rng: np.random.Generator) -> np.ndarray:
        cells = self.SIZE * self.SIZE
        agent = int(rng.integers(0, cells))
        goal = int(rng.integers(0, cells - 1))
        if goal >= agent:  # uniform over the 63 cells that differ from agent
            goal += 1
        self._agent = np.array(divmod(agent, self.SIZE)[::-1], dtype=np.int64)
        self._goal = np.array(divmod(goal, self.SIZE)[::-1], dtype=np.int64)
        self._t = 0
        self._done = False
        return self._observe()

    def force_state(self, state: np.ndarray) -> np.ndarray:
        """Place agent and goal from a normalized state vector; test hook."""
        cells = np.rint(np.asarray(state, dtype=np.float64) * (self.SIZE - 1))
        if cells.shape != (4,) or np.any(cells < 0) or np.any(cells >= self.SIZE):
            raise ValueError(f"state {state!r} does not describe grid cells")
        self._agent = cells[:2].astype(np.int64)
        self._goal = cells[2:].astype(np.int64)
        self._t = 0
        self._done = False
        return self._observe()

    def _observe(self) -> np.ndarray:
        return np.concatenate([self._agent, self._goal]) / (self.SIZE - 1)

    @staticmethod
    def discretize(action: np.ndarray) -> np.ndarray:
        """Map a continuous action to a 4-neighborhood move.

        The component with the larger magnitude wins; exact ties go to the
        x axis; a zero action means standing still.
        """
        a = np.asarray(action, dtype=np.float64)
        move = np.zeros(2, dtype=np.int64)
        if a[0] == 0.0 and a[1] == 0.0:
            return move
        if abs(a[0]) >= abs(a[1]):
            move[0] = 1 if a[0] > 0 else -1
        else:
            move[1] = 1 if a[1] > 0 else -1
        return move

    def step(self, action: np.ndarray) -> tuple[np.ndarray, float, bool]:
        if self._done:
            raise RuntimeError("episode finished")
        a = np.clip(np.asarray(action, dtype=np.float64), -1.0, 1.0)
        if a.shape != (2,):
            raise ValueError(f"expected action shape (2,), got {a.shape}")
        move = self.discretize(a)
        self._agent = np.clip(self._agent + move, 0, self.SIZE - 1)
        self._t += 1
        reached = bool(np.array_equal(self._agent, self._goal))
        reward = 1.0 if reached else 0.0
        self._done = reached or self._t >= self.spec.max_episode_len
        return self._observe(), reward, self._done

    def expert_action(self, state: np.ndarray) -> np.ndarray:
        """Greedy Manhattan move: largest coordinate gap first, ties to x."""
        cells = np.rint(np.asarray(state, dtype=np.float64) * (self.SIZE - 1))
        delta = cells[2:] - cells[:2]
        action = np.zeros(2)
        if delta[0] == 0.0 and delta[1] == 0.0:
            return action
        if abs(delta[0]) >= abs(delta[1]):
            action[0] = 1.0 if delta[0] > 0 else -1.0
        else:
            action[1] = 1.0 if delta[1] > 0 else -1.0
        return action


_ENVS: dict[str, type] = {"pointctrl": PointCtrl, "gridgoal": GridGoal}


def make_env(name: str) -> Env:
    if name not in _ENVS:
        raise ValueError(f"unknown environment {name!r}; known: {sorted(_ENVS)}")
    return _ENVS[name]()


def env_spec(name: str) -> EnvSpec:
    return make_env(name).spec


def scripted_expert(env: Env, state: np.ndarray) -> np.ndarray:
    """Demonstration action for ``state`` under ``env``'s scripted expert."""
    return env.expert_action(state)


def normalized_score(spec: EnvSpec, raw_return: float) -> float:
    """Scale where the random policy scores 0 and the scripted expert 100."""
    span = spec.expert_return - spec.random_return
    return 100.0 * (raw_return - spec.random_return) / span


# ---------------------------------------------------------------------------
# Rollouts and offline datasets
# ---------------------------------------------------------------------------

PolicyFn = Callable[[np.ndarray, np.random.Generator], np.ndarray]


def rollout_policy(
    env: Env, policy_fn: PolicyFn, rng: np.random.Generator
) -> Trajectory:
    """Play one episode; ``policy_fn(state, rng) -> action``."""
    states, actions, rewards = [], [], []
    state = env.reset(rng)
    done = False
    while not done:
        action = policy_fn(state, rng)
        states.append(state)
        actions.append(np.asarray(action, dtype=np.float64))
        state, reward, done = env.step(action)
        rewards.append(reward)
    return Trajectory(states=np.array(states), actions=np.array(actions), rewards=np.array(rewards))


def _noisy_expert(env: Env, noise: float) -> PolicyFn:
    """Expert corrupted per environment's noise convention.

    Dense control uses additive Gaussian noise of scale ``noise`` (clipped to
    the action box); the grid task uses epsilon-greedy with epsilon =
    ``noise`` because Gaussian jitter rarely flips a discretized move.
    """
    if isinstance(env, GridGoal):

        def policy(state: np.ndarray, rng: np.random.Generator) -> np.ndarray:
            if rng.random() < noise:
                return rng.uniform(-1.0, 1.0, size=env.spec.action_dim)
            return env.expert_action(state)

    else:

        def policy(state: np.ndarray, rng: np.random.Generator) -> np.ndarray:
            a = env.expert_action(state)
            if noise > 0.0:
                a = a + noise * rng.normal(size=a.shape)
            return np.clip(a, env.spec.action_low, env.spec.action_high)

    return policy


def generate_offline_dataset(
    env: Env,
    quality: str,
    n_trajectories: int,
    rng: np.random.Generator,
    noise_scale: float | None = None,
) -> list[Trajectory]:
    """Demonstration datasets of controlled quality.

    ``medium``: every episode from the expert corrupted with a fixed noise
    level (default: the calibrated ``spec.medium_noise``, which lands mean
    return near a third of expert level; ``noise_scale=0`` reproduces the
    expert).

    ``medium-replay``: noise anneals linearly across the dataset from a high
    level down to the medium level, imitating the replay buffer of an agent
    trained up to medium competence; early episodes are near-random, late
    ones medium.
    """
    if n_trajectories <= 0:
        raise ValueError(f"n_trajectories must be positive, got {n_trajectories}")
    if quality == "medium":
        noise = env.spec.medium_noise if noise_scale is None else float(noise_scale)
        levels = [noise] * n_trajectories
    elif quality == "medium-replay":
        end = env.spec.medium_noise if noise_scale is None else float(noise_scale)
        high = 1.0 if isinstance(env, GridGoal) else 2.5 * env.spec.medium_noise
        if n_trajectories == 1:
            levels = [end]
        else:
            levels = [
                high + (end - high) * i / (n_trajectories - 1)
                for i in range(n_trajectories)
            ]
    else:
        raise ValueError(
            f"unknown dataset quality {quality!r}; known: ['medium', 'medium-replay']"
        )
    return [rollout_policy(env, _noisy_expert(env, lvl), rng) for lvl in levels]
