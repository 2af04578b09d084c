"""Named random sub-streams fanned out from a single integer seed.

Every consumer of randomness asks for its own stream, so changing how many
draws one component makes never shifts the draws of another.
"""
import numpy as np

TIMESTAMPS = 1
INIT = 2
SHUFFLE = 3
NEGATIVES = 4
EVAL_TEST = 5
EVAL_VALID = 6
SYNTH = 7


def stream(seed: int, name: int, *extra: int) -> np.random.Generator:
    return np.random.default_rng([int(seed), int(name), *map(int, extra)])
