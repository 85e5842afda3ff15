"""Named random substreams derived from a single root seed.

Every random draw in the pipeline (volume synthesis, label corruption,
parameter init, batch order, per-sample augmentation) flows through a
``(root_seed, stream_id, *key)`` SeedSequence, so each component is
reproducible on its own and reruns are bit-identical.
"""

from __future__ import annotations

import numpy as np

_STREAMS = {"data": 0, "init": 1, "batch": 2, "augment": 3, "corrupt": 4}


def seed_sequence(root_seed: int, stream: str, *key: int) -> np.random.SeedSequence:
    return np.random.SeedSequence((int(root_seed), _STREAMS[stream]) + tuple(int(k) for k in key))


def generator(root_seed: int, stream: str, *key: int) -> np.random.Generator:
    return np.random.default_rng(seed_sequence(root_seed, stream, *key))


def derive_seed(root_seed: int, stream: str, *key: int) -> int:
    """Collapse a substream to one integer for APIs that take a plain seed."""
    return int(seed_sequence(root_seed, stream, *key).generate_state(1)[0])
