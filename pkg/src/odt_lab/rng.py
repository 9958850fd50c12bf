"""Deterministic named random substreams.

Every source of randomness in a run descends from a single integer seed.
Consumers never share a stream: each named purpose (environment resets,
parameter init, dropout, batch sampling, exploration noise, the entropy
estimator, evaluation, dataset generation) gets its own substream, derived
with ``np.random.SeedSequence(seed, spawn_key=(stream_id, *extra))``.

Stream identity is a fixed registry index rather than a hash of the name,
so the seed -> stream mapping is stable across processes, platforms and
releases. Adding a stream means appending to ``STREAMS``; renumbering an
existing entry is a compatibility break.
"""

from __future__ import annotations

import numpy as np
import torch

# Registry of stream ids. Append only.
STREAMS: dict[str, int] = {
    "env": 0,
    "policy-init": 1,
    "dropout": 2,
    "sampler": 3,
    "exploration": 4,
    "entropy": 5,
    "eval": 6,
    "data": 7,
}


def seed_sequence(seed: int, stream: str, *extra: int) -> np.random.SeedSequence:
    """SeedSequence for a named substream of ``seed``.

    ``extra`` indices carve sub-substreams (e.g. one per evaluation episode)
    without consuming draws from the parent stream.
    """
    if stream not in STREAMS:
        raise KeyError(f"unknown rng stream {stream!r}; known: {sorted(STREAMS)}")
    return np.random.SeedSequence(entropy=seed, spawn_key=(STREAMS[stream], *extra))


def np_rng(seed: int, stream: str, *extra: int) -> np.random.Generator:
    """NumPy generator bound to a named substream."""
    return np.random.default_rng(seed_sequence(seed, stream, *extra))


def torch_generator(seed: int, stream: str, *extra: int) -> torch.Generator:
    """Torch generator bound to a named substream.

    Torch generators take a single 64-bit seed, so we draw one from the
    substream's SeedSequence state rather than reusing the raw run seed.
    """
    gen = torch.Generator()
    state = seed_sequence(seed, stream, *extra).generate_state(2, dtype=np.uint64)
    gen.manual_seed(int(state[0] ^ (state[1] << np.uint64(1))) & (2**63 - 1))
    return gen
