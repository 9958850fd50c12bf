"""Trajectory-level replay buffer with FIFO eviction and two-stage sampling.

The buffer stores whole episodes, not transitions. Each record pairs a
trajectory with the conditioning stream it should be trained against
(by default the hindsight stream recomputed from observed rewards at insert
time) plus a monotonically increasing insertion counter that defines
eviction order.

Sampling is two-stage: first a trajectory with probability proportional to
its length, then a uniformly random window start inside it. The composition
makes every (trajectory, start) pair equally likely, i.e. sampling is
uniform over timesteps of the buffer rather than over episodes, so long
episodes are not underrepresented.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .trajectory import (
    Trajectory,
    TrainingWindow,
    compute_rtg,
    sample_subsequence,
)


@dataclass
class TrajectoryRecord:
    """A buffered episode, its conditioning stream, and its insertion rank."""

    trajectory: Trajectory
    rtgs: np.ndarray
    counter: int


class ReplayBuffer:
    def __init__(self, capacity: int):
        if capacity <= 0:
            raise ValueError(f"capacity must be positive, got {capacity}")
        self.capacity = int(capacity)
        self.records: list[TrajectoryRecord] = []
        self._next_counter = 0

    def __len__(self) -> int:
        return len(self.records)

    @property
    def total_timesteps(self) -> int:
        return sum(len(rec.trajectory) for rec in self.records)

    def returns(self) -> np.ndarray:
        """Total returns of buffered episodes, in insertion order."""
        return np.array([rec.trajectory.total_return for rec in self.records])

    def insert_fifo(self, traj: Trajectory, rtgs: np.ndarray | None = None) -> TrajectoryRecord:
        """Insert one episode, evicting the oldest record first when full.

        ``rtgs=None`` relabels with the hindsight stream (returns the episode
        actually realized). Passing a stream explicitly stores it verbatim;
        this is how the no-relabeling ablation keeps the stream that drove
        collection.
        """
        if rtgs is None:
            rtgs = compute_rtg(traj.rewards)
        else:
            rtgs = np.asarray(rtgs, dtype=np.float64)
            if rtgs.shape != (len(traj),):
                raise ValueError(
                    f"conditioning stream shape {rtgs.shape} does not match "
                    f"trajectory length {len(traj)}"
                )
        if len(self.records) >= self.capacity:
            # Evict before inserting: occupancy never exceeds capacity.
            oldest = min(range(len(self.records)), key=lambda i: self.records[i].counter)
            self.records.pop(oldest)
        rec = TrajectoryRecord(trajectory=traj, rtgs=rtgs, counter=self._next_counter)
        self._next_counter += 1
        self.records.append(rec)
        return rec

    # -- sampling -----------------------------------------------------------

    def sample_trajectory(self, rng: np.random.Generator) -> TrajectoryRecord:
        """Draw a record with probability proportional to its length."""
        return self.records[sample_record_index(self.records, rng)]

    def sample_trajectory_return_weighted(
        self, rng: np.random.Generator
    ) -> TrajectoryRecord:
        """Draw a record with probability proportional to its total return.

        Requires non-negative returns; falls back to uniform when every
        return is zero (the weights would otherwise be undefined).
        """
        return self.records[sample_record_index_return_weighted(self.records, rng)]

    # -- integrity ----------------------------------------------------------

    def verify_consistency(self) -> None:
        """Raise ValueError if any structural invariant is violated."""
        if len(self.records) > self.capacity:
            raise ValueError(
                f"occupancy {len(self.records)} exceeds capacity {self.capacity}"
            )
        counters = [rec.counter for rec in self.records]
        if sorted(counters) != counters or len(set(counters)) != len(counters):
            raise ValueError(f"insertion counters not strictly increasing: {counters}")
        if counters and counters[-1] >= self._next_counter:
            raise ValueError("counter bookkeeping ran behind the stored records")
        for rec in self.records:
            if np.asarray(rec.rtgs).shape != (len(rec.trajectory),):
                raise ValueError(
                    f"record {rec.counter}: stream length "
                    f"{np.asarray(rec.rtgs).shape} vs trajectory {len(rec.trajectory)}"
                )

    # -- snapshots -----------------------------------------------------------

    def save_snapshot(self, path: str | Path) -> None:
        """Header JSON line with buffer state, then one JSON line per record."""
        path = Path(path)
        header = {
            "format": 1,
            "capacity": self.capacity,
            "next_counter": self._next_counter,
            "n_records": len(self.records),
        }
        with path.open("w") as fh:
            fh.write(json.dumps(header, separators=(",", ":")) + "\n")
            for rec in self.records:
                obj = {
                    "states": rec.trajectory.states.tolist(),
                    "actions": rec.trajectory.actions.tolist(),
                    "rewards": rec.trajectory.rewards.tolist(),
                    "rtgs": np.asarray(rec.rtgs).tolist(),
                    "counter": rec.counter,
                }
                fh.write(json.dumps(obj, separators=(",", ":"), allow_nan=False) + "\n")

    @classmethod
    def load_snapshot(cls, path: str | Path) -> "ReplayBuffer":
        path = Path(path)
        with path.open() as fh:
            lines = fh.read().splitlines()
        if not lines:
            raise ValueError(f"{path}: empty snapshot")
        try:
            header = json.loads(lines[0])
        except json.JSONDecodeError as exc:
            raise ValueError(f"{path}: malformed snapshot header: {exc}") from exc
        if not isinstance(header, dict) or header.get("format") != 1:
            raise ValueError(f"{path}: unrecognized snapshot format")
        buf = cls(capacity=int(header["capacity"]))
        buf._next_counter = int(header["next_counter"])
        for lineno, line in enumerate(lines[1:], start=2):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
                rec = TrajectoryRecord(
                    trajectory=Trajectory(
                        states=np.asarray(obj["states"], dtype=np.float64),
                        actions=np.asarray(obj["actions"], dtype=np.float64),
                        rewards=np.asarray(obj["rewards"], dtype=np.float64),
                    ),
                    rtgs=np.asarray(obj["rtgs"], dtype=np.float64),
                    counter=int(obj["counter"]),
                )
            except (KeyError, json.JSONDecodeError, TypeError) as exc:
                raise ValueError(f"{path}:{lineno}: malformed record: {exc}") from exc
            buf.records.append(rec)
        if len(buf.records) != header.get("n_records"):
            raise ValueError(
                f"{path}: header promises {header.get('n_records')} records, "
                f"found {len(buf.records)}"
            )
        buf.verify_consistency()
        return buf


# ---------------------------------------------------------------------------
# Construction from an offline dataset
# ---------------------------------------------------------------------------


def as_records(offline: list[Trajectory]) -> list[TrajectoryRecord]:
    """Wrap a dataset for window sampling, with hindsight streams attached."""
    return [
        TrajectoryRecord(trajectory=t, rtgs=compute_rtg(t.rewards), counter=i)
        for i, t in enumerate(offline)
    ]


def init_top_n(offline: list[Trajectory], capacity: int) -> ReplayBuffer:
    """Buffer seeded with the highest-return episodes of the dataset.

    Ties keep the trajectory that appears earlier in the dataset. Selected
    episodes are inserted in dataset order, so with a full buffer the
    earliest-index one is evicted first.
    """
    if not offline:
        raise ValueError("cannot initialize a buffer from an empty dataset")
    n = min(capacity, len(offline))
    # Sort by (-return, index): stable preference for earlier dataset entries.
    order = sorted(range(len(offline)), key=lambda i: (-offline[i].total_return, i))
    chosen = sorted(order[:n])
    buf = ReplayBuffer(capacity=capacity)
    for i in chosen:
        buf.insert_fifo(offline[i])
    return buf


def init_random(
    offline: list[Trajectory], capacity: int, rng: np.random.Generator
) -> ReplayBuffer:
    """Buffer seeded with a uniform subset (without replacement)."""
    if not offline:
        raise ValueError("cannot initialize a buffer from an empty dataset")
    n = min(capacity, len(offline))
    chosen = sorted(rng.choice(len(offline), size=n, replace=False).tolist())
    buf = ReplayBuffer(capacity=capacity)
    for i in chosen:
        buf.insert_fifo(offline[i])
    return buf


# ---------------------------------------------------------------------------
# Two-stage window sampling
# ---------------------------------------------------------------------------


def sample_record_index(
    records: list[TrajectoryRecord], rng: np.random.Generator
) -> int:
    """Stage one: index of a record, drawn proportionally to episode length."""
    if not records:
        raise ValueError("cannot sample from an empty buffer")
    lengths = np.array([len(rec.trajectory) for rec in records], dtype=np.float64)
    return int(rng.choice(len(records), p=lengths / lengths.sum()))


def sample_record_index_return_weighted(
    records: list[TrajectoryRecord], rng: np.random.Generator
) -> int:
    """Stage-one variant weighting records by total return instead of length.

    Requires non-negative returns; falls back to uniform when every return
    is zero (the weights would otherwise be undefined).
    """
    if not records:
        raise ValueError("cannot sample from an empty buffer")
    rets = np.array([rec.trajectory.total_return for rec in records])
    if np.any(rets < 0):
        raise ValueError(
            "return-weighted sampling requires non-negative returns; "
            f"min return is {rets.min():g}"
        )
    total = rets.sum()
    if total == 0.0:
        return int(rng.integers(0, len(records)))
    return int(rng.choice(len(records), p=rets / total))


def sample_windows(
    records: list[TrajectoryRecord],
    B: int,
    K: int,
    rng: np.random.Generator,
    strategy: str = "length",
) -> list[TrainingWindow]:
    """Draw B training windows (with replacement across draws).

    With the default ``length`` strategy, stage one picks a record
    length-proportionally and stage two a uniform start within it; jointly
    every (record, start) pair has probability 1 / total_timesteps. The
    ``return`` strategy swaps stage one for return-proportional weighting.
    """
    if strategy == "length":
        pick = sample_record_index
    elif strategy == "return":
        pick = sample_record_index_return_weighted
    else:
        raise ValueError(f"unknown sampling strategy {strategy!r}")
    windows = []
    for _ in range(B):
        idx = pick(records, rng)
        rec = records[idx]
        windows.append(
            sample_subsequence(rec.trajectory, rec.rtgs, K, rng, traj_id=idx)
        )
    return windows
