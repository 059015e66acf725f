"""Named random sub-streams derived from one root seed."""
import numpy as np

STREAMS = {"data": 0, "tasks": 1, "init": 2, "protocol": 3, "train": 4, "heatmap": 5}


def substream(seed, name, *extra):
    return np.random.SeedSequence(int(seed), spawn_key=(STREAMS[name],) + tuple(int(e) for e in extra))


def generator(seed, name, *extra):
    return np.random.default_rng(substream(seed, name, *extra))


def derive_seed(seed, name, *extra):
    return int(substream(seed, name, *extra).generate_state(1, dtype=np.uint32)[0])
