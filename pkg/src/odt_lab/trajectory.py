"""Trajectory data model, return-to-go arithmetic, and training windows.

A trajectory stores one episode as dense float64 arrays: ``states`` of shape
``(T, state_dim)``, ``actions`` of shape ``(T, action_dim)`` and ``rewards``
of shape ``(T,)``, with ``actions[t]`` the action taken in ``states[t]`` and
``rewards[t]`` the reward it produced. Conditioning streams (returns-to-go)
are kept *outside* the trajectory: the same episode can carry the return
stream that drove collection, or a hindsight stream recomputed from observed
rewards, without copying the underlying arrays.

Exactness contract: ``compute_rtg`` builds the stream by backward
accumulation, so ``g[t] == r[t] + g[t+1]`` holds bit-for-bit (with ``g[T]``
taken as 0). The algebraic form ``g[t] - g[t+1] == r[t]`` is *not* promised:
re-subtracting rounds and is generally unattainable in floating point.

Serialization is line-delimited JSON. Floats go through ``repr``-faithful
JSON encoding, which round-trips IEEE-754 doubles losslessly.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable

import numpy as np


def compute_rtg(rewards: np.ndarray) -> np.ndarray:
    """Returns-to-go: ``g[t] = sum(rewards[t:])`` via backward accumulation."""
    r = np.asarray(rewards, dtype=np.float64)
    if r.ndim != 1 or r.size == 0:
        raise ValueError(f"rewards must be a non-empty 1-d array, got shape {r.shape}")
    g = np.empty_like(r)
    acc = 0.0
    for t in range(r.size - 1, -1, -1):
        acc = r[t] + acc
        g[t] = acc
    return g


def decrement_rtg(g: float, r: float) -> float:
    """Conditioning update after observing reward ``r``: the next target is
    whatever return remains to be collected."""
    return float(g) - float(r)


@dataclass
class Trajectory:
    """One complete episode."""

    states: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray

    def __post_init__(self) -> None:
        self.states = np.asarray(self.states, dtype=np.float64)
        self.actions = np.asarray(self.actions, dtype=np.float64)
        self.rewards = np.asarray(self.rewards, dtype=np.float64)
        if self.states.ndim != 2 or self.actions.ndim != 2 or self.rewards.ndim != 1:
            raise ValueError(
                "expected states (T, S), actions (T, A), rewards (T,); got "
                f"{self.states.shape}, {self.actions.shape}, {self.rewards.shape}"
            )
        T = self.states.shape[0]
        if T == 0:
            raise ValueError("empty trajectory")
        if self.actions.shape[0] != T or self.rewards.shape[0] != T:
            raise ValueError(
                f"length mismatch: {T} states, {self.actions.shape[0]} actions, "
                f"{self.rewards.shape[0]} rewards"
            )

    def __len__(self) -> int:
        return self.states.shape[0]

    @property
    def total_return(self) -> float:
        return float(np.sum(self.rewards))


def relabel_hindsight(traj: Trajectory) -> np.ndarray:
    """Return stream consistent with what actually happened.

    Whatever conditioning values drove collection, the stored episode is
    relabeled with the returns its own rewards realize, so the pair
    (trajectory, stream) is always a valid demonstration of achieving
    ``stream[0]``.
    """
    return compute_rtg(traj.rewards)


@dataclass
class TrainingWindow:
    """Fixed-length window cut from one trajectory, right-padded with zeros.

    ``mask[i]`` marks real positions; padded slots hold zeros and must not
    contribute to any loss. ``timesteps`` are global episode indices (used by
    the policy's positional embedding), ``start`` is the window's offset into
    the source trajectory and ``traj_id`` identifies that trajectory for
    diagnostics.
    """

    states: np.ndarray
    actions: np.ndarray
    rtgs: np.ndarray
    timesteps: np.ndarray
    mask: np.ndarray
    start: int = 0
    traj_id: int = -1


def sample_subsequence(
    traj: Trajectory,
    rtgs: np.ndarray,
    K: int,
    rng: np.random.Generator,
    start: int | None = None,
    traj_id: int = -1,
) -> TrainingWindow:
    """Cut a K-step window beginning at a uniformly random position.

    Every start index in ``{0, ..., T-1}`` is equally likely, including tail
    positions whose windows run off the end of the episode; those are
    right-padded and masked. ``start`` can be forced for tests/diagnostics.
    ``rtgs`` is whichever conditioning stream the caller wants sliced
    alongside the transitions (hindsight or as-collected).
    """
    if K <= 0:
        raise ValueError(f"window length must be positive, got {K}")
    rtgs = np.asarray(rtgs, dtype=np.float64)
    T = len(traj)
    if rtgs.shape != (T,):
        raise ValueError(f"rtg stream shape {rtgs.shape} does not match length {T}")
    if start is None:
        start = int(rng.integers(0, T))
    elif not 0 <= start < T:
        raise ValueError(f"start {start} out of range for length {T}")

    n = min(K, T - start)
    S = traj.states.shape[1]
    A = traj.actions.shape[1]
    states = np.zeros((K, S), dtype=np.float64)
    actions = np.zeros((K, A), dtype=np.float64)
    out_rtgs = np.zeros(K, dtype=np.float64)
    timesteps = np.zeros(K, dtype=np.int64)
    mask = np.zeros(K, dtype=bool)

    states[:n] = traj.states[start : start + n]
    actions[:n] = traj.actions[start : start + n]
    out_rtgs[:n] = rtgs[start : start + n]
    timesteps[:n] = np.arange(start, start + n)
    mask[:n] = True
    return TrainingWindow(
        states=states,
        actions=actions,
        rtgs=out_rtgs,
        timesteps=timesteps,
        mask=mask,
        start=start,
        traj_id=traj_id,
    )


# ---------------------------------------------------------------------------
# Serialization: line-delimited JSON
# ---------------------------------------------------------------------------


def to_json_line(traj: Trajectory, meta: dict[str, Any] | None = None) -> str:
    """Encode one trajectory as a single JSON line (lossless for doubles)."""
    obj: dict[str, Any] = {
        "states": traj.states.tolist(),
        "actions": traj.actions.tolist(),
        "rewards": traj.rewards.tolist(),
    }
    if meta:
        obj["meta"] = meta
    return json.dumps(obj, separators=(",", ":"), allow_nan=False)


def from_json_line(line: str) -> tuple[Trajectory, dict[str, Any]]:
    """Decode one JSON line; raises ValueError on malformed records."""
    try:
        obj = json.loads(line)
    except json.JSONDecodeError as exc:
        raise ValueError(f"malformed trajectory line: {exc}") from exc
    if not isinstance(obj, dict) or not {"states", "actions", "rewards"} <= set(obj):
        raise ValueError("trajectory line must contain states, actions and rewards")
    traj = Trajectory(
        states=np.asarray(obj["states"], dtype=np.float64),
        actions=np.asarray(obj["actions"], dtype=np.float64),
        rewards=np.asarray(obj["rewards"], dtype=np.float64),
    )
    return traj, obj.get("meta", {})


def save_jsonl(
    trajs: Iterable[Trajectory],
    path: str | Path,
    metas: Iterable[dict[str, Any]] | None = None,
) -> None:
    path = Path(path)
    metas_list = list(metas) if metas is not None else None
    with path.open("w") as fh:
        for i, traj in enumerate(trajs):
            meta = metas_list[i] if metas_list is not None else None
            fh.write(to_json_line(traj, meta) + "\n")


def load_jsonl(path: str | Path) -> list[Trajectory]:
    trajs = []
    with Path(path).open() as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                traj, _ = from_json_line(line)
            except ValueError as exc:
                raise ValueError(f"{path}:{lineno}: {exc}") from exc
            trajs.append(traj)
    return trajs
