# [file name]: seeding.py
"""
Named random substreams.

Every consumer of randomness draws from its own generator, derived from a
master seed and a fixed stream id, so adding draws in one consumer never
shifts another.
"""

import numpy as np

# ids are part of the reproducibility contract; append only
STREAM_IDS = {
    "init": 0,
    "minibatch": 1,
    "langevin": 2,
    "student_init": 3,
    "dropout": 4,
    "perturb": 5,
    "pool_batches": 6,
    "subsample": 7,
    "pool_subsample": 8,
    "test_subsample": 9,
    "train_mask": 10,
    "test_mask": 11,
    "blobs_train": 12,
    "blobs_test": 13,
}


def substream(seed, name):
    """Generator for the named substream of `seed`"""
    if name not in STREAM_IDS:
        raise KeyError(f"unknown random stream: {name}")
    sequence = np.random.SeedSequence(int(seed), spawn_key=(STREAM_IDS[name],))
    return np.random.Generator(np.random.PCG64(sequence))


def substream_seed(seed, name):
    """Integer seed for the named substream (for APIs that take a seed)"""
    if name not in STREAM_IDS:
        raise KeyError(f"unknown random stream: {name}")
    sequence = np.random.SeedSequence(int(seed), spawn_key=(STREAM_IDS[name],))
    return int(sequence.generate_state(1, dtype=np.uint64)[0])


def cell_seed(master_seed, coordinates):
    """Seed for one grid cell, a pure function of (master seed, coordinates)"""
    key = tuple(int(c) for c in coordinates)
    sequence = np.random.SeedSequence(int(master_seed), spawn_key=key)
    # keep it below 2**63 so it fits signed 64-bit consumers
    return int(sequence.generate_state(1, dtype=np.uint64)[0] >> np.uint64(1))


def rng_state(rng):
    return rng.bit_generator.state


def restore_rng(state):
    rng = np.random.Generator(np.random.PCG64())
    rng.bit_generator.state = state
    return rng
