"""Named random streams derived from one master seed."""
import numpy as np

STREAMS = {"data": 0, "init": 1, "shuffle": 2, "reparam": 3, "probe": 4, "pairs": 5}


def seed_sequence(seed: int, name: str) -> np.random.SeedSequence:
    return np.random.SeedSequence(int(seed), spawn_key=(STREAMS[name],))


def stream(seed: int, name: str) -> np.random.Generator:
    return np.random.default_rng(seed_sequence(seed, name))
