"""Named random substreams derived from one integer seed.

Each consumer draws from its own stream, so turning a component on or off
(or changing how much it draws) leaves the other streams untouched.
"""
import numpy as np

STREAMS = {"synth": 0, "init": 1, "kmeans": 2, "shuffle": 3, "probe": 4}


def substream(seed, name):
    return np.random.default_rng(np.random.SeedSequence(int(seed), spawn_key=(STREAMS[name],)))


def substream_seed(seed, name):
    """A plain integer seed for APIs that take one (e.g. k-means)."""
    return int(substream(seed, name).integers(2**31 - 1))
